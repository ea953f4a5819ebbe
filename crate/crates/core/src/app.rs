//! Subcommands of the `ionswap` binary. Each returns a JSON envelope with the
//! config hash and seed plus optional CSV tables.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::dynamics::{find_equilibrium, normal_modes, simulate_swap, swap_hold, ModeLabel, SwapSimulation};
use crate::error::{Error, Result};
use crate::optimize::optimize_swap;
use crate::ramsey::ramsey_field_scan;
use crate::sequence::TwoIonProcess;
use crate::thermometry::{fit_phonon_number, RabiDataset};
use crate::tomography::{run_process_tomography, run_reorder_experiment, ChiMatrix};
use crate::trap::{secular_frequencies, TrapGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Calibrate,
    Modes,
    Swap,
    OptimizeSwap,
    Tomography,
    Reorder,
    FieldMap,
    RabiFit,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::Modes => "modes",
            Command::Swap => "swap",
            Command::OptimizeSwap => "optimize-swap",
            Command::Tomography => "tomography",
            Command::Reorder => "reorder",
            Command::FieldMap => "field-map",
            Command::RabiFit => "rabi-fit",
        }
    }

    /// Whether the command draws random numbers and so needs a seed.
    pub fn is_stochastic(self) -> bool {
        matches!(self, Command::Tomography | Command::Reorder | Command::FieldMap | Command::RabiFit)
    }
}

/// Files produced by a command, keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub json: Value,
    pub tables: Vec<(String, String)>,
    /// Short human-readable summary.
    pub summary: String,
    /// Extra raw files, such as optimizer logs.
    pub extra: Vec<(String, String)>,
}

struct Table {
    header: String,
    rows: Vec<String>,
}

impl Table {
    fn new(header: &str) -> Self {
        Self {
            header: header.to_string(),
            rows: Vec::new(),
        }
    }

    fn render(&self, provenance: &str) -> String {
        let mut s = format!("# {provenance}\n{}\n", self.header);
        for r in &self.rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

/// Runs `command`. `seed` overrides the seed of the config.
pub fn execute(command: Command, cfg: &RunConfig, seed: Option<u64>) -> Result<Output> {
    cfg.validate()?;
    let seed = seed.or(cfg.seed);
    if command.is_stochastic() && seed.is_none() {
        return Err(Error::Config(format!("{} needs a seed (--seed or `seed` in the config)", command.name())));
    }
    let (result, tables, summary, extra) = match command {
        Command::Calibrate => calibrate_cmd(cfg)?,
        Command::Modes => modes_cmd(cfg)?,
        Command::Swap => swap_cmd(cfg)?,
        Command::OptimizeSwap => optimize_cmd(cfg, seed)?,
        Command::Tomography => tomography_cmd(cfg, seed.expect("checked"))?,
        Command::Reorder => reorder_cmd(cfg, seed.expect("checked"))?,
        Command::FieldMap => field_map_cmd(cfg, seed.expect("checked"))?,
        Command::RabiFit => rabi_fit_cmd(cfg, seed.expect("checked"))?,
    };
    let hash = cfg.hash();
    let provenance = format!(
        "config_hash={hash} seed={}",
        seed.map_or_else(|| "none".to_string(), |s| s.to_string())
    );
    Ok(Output {
        json: json!({
            "command": command.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": hash,
            "seed": seed,
            "result": result,
        }),
        tables: tables.into_iter().map(|(n, t)| (n, t.render(&provenance))).collect(),
        summary,
        extra: extra
            .into_iter()
            .map(|(n, body)| (n, format!("{{\"config_hash\":\"{hash}\",\"seed\":{}}}\n{body}", json!(seed))))
            .collect(),
    })
}

type Parts = (Value, Vec<(String, Table)>, String, Vec<(String, String)>);

fn calibrate_cmd(cfg: &RunConfig) -> Result<Parts> {
    let g = cfg.geometry()?;
    let field = g.field(&g.trapping_voltages(&[g.liz_index], cfg.trap.u_c))?;
    let f = secular_frequencies(&field, g.ion_mass(), [g.liz_center(), 0.0, 0.0])?;
    let summary = format!(
        "axial gain {:.6}, secular frequencies {:.4} / {:.4} / {:.4} MHz\n",
        g.axial_gain, f.axial_mhz, f.radial_low_mhz, f.radial_high_mhz
    );
    let mut t = Table::new("axis,target_mhz,achieved_mhz");
    for (axis, want, got) in [
        ("axial", cfg.trap.targets.axial_mhz, f.axial_mhz),
        ("radial_low", cfg.trap.targets.radial_low_mhz, f.radial_low_mhz),
        ("radial_high", cfg.trap.targets.radial_high_mhz, f.radial_high_mhz),
    ] {
        t.rows.push(format!("{axis},{want},{got}"));
    }
    Ok((
        json!({ "geometry": to_value(&g)?, "secular": to_value(&f)? }),
        vec![("secular.csv".into(), t)],
        summary,
        Vec::new(),
    ))
}

/// One row of the mode table with its analytic expectation.
#[derive(Debug, Clone, Serialize)]
pub struct ModeRow {
    pub label: String,
    pub frequency_mhz: f64,
    pub analytic_mhz: f64,
    pub relative_error: f64,
}

/// Two-ion modes in the LIZ hold well next to the closed forms built from
/// the single-ion frequencies.
pub fn mode_table(g: &TrapGeometry, u_c: f64) -> Result<Vec<ModeRow>> {
    let field = g.field(&swap_hold(g.liz_index, u_c))?;
    let x0 = g.liz_center();
    let single = normal_modes(&field, &find_equilibrium(&field, &[[x0, 0.0, 0.0]])?, g.ion_mass())?;
    let pair_eq = find_equilibrium(&field, &[[x0 - 2.0, 0.0, 0.0], [x0 + 2.0, 0.0, 0.0]])?;
    let pair = normal_modes(&field, &pair_eq, g.ion_mass())?;
    // Single-ion frequencies in ascending order: axial, radial low, radial high.
    let fz = single.frequencies_mhz[0];
    let (fr1, fr2) = (single.frequencies_mhz[1], single.frequencies_mhz[2]);
    let expected = [
        (ModeLabel::AxialCom, fz),
        (ModeLabel::AxialStretch, 3f64.sqrt() * fz),
        (ModeLabel::RadialLowCom, fr1),
        (ModeLabel::RadialLowRocking, (fr1 * fr1 - fz * fz).sqrt()),
        (ModeLabel::RadialHighCom, fr2),
        (ModeLabel::RadialHighRocking, (fr2 * fr2 - fz * fz).sqrt()),
    ];
    expected
        .iter()
        .map(|(label, want)| {
            let k = pair
                .find(*label)
                .ok_or_else(|| Error::Config(format!("mode {} not found", label.name())))?;
            let got = pair.frequencies_mhz[k];
            Ok(ModeRow {
                label: label.name(),
                frequency_mhz: got,
                analytic_mhz: *want,
                relative_error: (got - want).abs() / want,
            })
        })
        .collect()
}

fn modes_cmd(cfg: &RunConfig) -> Result<Parts> {
    let g = cfg.geometry()?;
    let rows = mode_table(&g, cfg.trap.u_c)?;
    let mut t = Table::new("mode,frequency_mhz,analytic_mhz,relative_error");
    let mut summary = format!("{:<20} {:>10} {:>10} {:>10}\n", "mode", "f/MHz", "analytic", "rel.err");
    for r in &rows {
        t.rows.push(format!("{},{},{},{}", r.label, r.frequency_mhz, r.analytic_mhz, r.relative_error));
        let _ = writeln!(
            summary,
            "{:<20} {:>10.4} {:>10.4} {:>10.2e}",
            r.label, r.frequency_mhz, r.analytic_mhz, r.relative_error
        );
    }
    Ok((json!({ "modes": to_value(&rows)? }), vec![("modes.csv".into(), t)], summary, Vec::new()))
}

fn excitation_rows(t: &mut Table, s: &SwapSimulation) {
    for m in &s.excitation.modes {
        t.rows.push(format!("{},{},{},{}", s.params.duration, m.label.name(), m.frequency_mhz, m.n_bar));
    }
}

fn swap_cmd(cfg: &RunConfig) -> Result<Parts> {
    let g = cfg.geometry()?;
    let base = &cfg.sequence.swap;
    let durations = if cfg.swap_study.sweep.is_empty() {
        vec![base.duration]
    } else {
        cfg.swap_study.sweep.clone()
    };
    let sims: Vec<SwapSimulation> = durations
        .par_iter()
        .map(|d| {
            let mut p = base.clone();
            p.duration = *d;
            p.validate()?;
            simulate_swap(&g, &p, &cfg.filter, &cfg.integrate)
        })
        .collect::<Result<_>>()?;
    let mut t = Table::new("duration_us,mode,frequency_mhz,n_bar");
    let mut summary = String::new();
    for s in &sims {
        excitation_rows(&mut t, s);
        let _ = writeln!(
            summary,
            "T = {:>7.1} us: max n = {:.4}, swapped = {}",
            s.params.duration,
            s.excitation.max_n_bar(),
            s.swapped
        );
    }
    Ok((json!({ "runs": to_value(&sims)? }), vec![("excitation.csv".into(), t)], summary, Vec::new()))
}

fn optimize_cmd(cfg: &RunConfig, seed: Option<u64>) -> Result<Parts> {
    let g = cfg.geometry()?;
    let penalty = cfg.optimize.no_swap_penalty;
    let objective = |p: &crate::waveform::SwapRampParams| match simulate_swap(&g, p, &cfg.filter, &cfg.integrate) {
        Ok(s) => s.excitation.max_n_bar() + if s.swapped { 0.0 } else { penalty },
        Err(_) => f64::INFINITY,
    };
    let mut opts = cfg.optimize.nelder_mead.clone();
    if let Some(s) = seed {
        opts.seed = s;
    }
    let mut log = Vec::new();
    let best = optimize_swap(objective, &cfg.sequence.swap, &cfg.optimize.free, &opts, Some(&mut log))?;
    let summary = format!(
        "max n {:.4} -> {:.4} after {} evaluations\n",
        best.initial_objective, best.objective, best.evaluations
    );
    let log = String::from_utf8(log).map_err(|e| Error::Optimizer(e.to_string()))?;
    Ok((to_value(&best)?, Vec::new(), summary, vec![("optimize_log.jsonl".into(), log)]))
}

fn chi_table(chi: &ChiMatrix) -> Result<Table> {
    let mut buf = Vec::new();
    chi.write_csv(&mut buf)?;
    let text = String::from_utf8(buf).map_err(|e| Error::Tomography(e.to_string()))?;
    let mut lines = text.lines();
    let mut t = Table::new(lines.next().unwrap_or_default());
    t.rows = lines.map(str::to_string).collect();
    Ok(t)
}

fn tomography_cmd(cfg: &RunConfig, seed: u64) -> Result<Parts> {
    let world = cfg.world(cfg.geometry()?);
    let tc = &cfg.tomography;
    let ideal = match tc.process {
        TwoIonProcess::Swap => ChiMatrix::swap(),
        TwoIonProcess::Identity => ChiMatrix::identity(2),
    };
    let r = run_process_tomography(&world, tc.process, &ideal, tc.shots, seed, tc.mode)?;
    let s = r.summary();
    let summary = format!(
        "{} settings x {} shots: process fidelity raw {:.4}, corrected {:.4}\n",
        s.settings, s.shots, s.fidelity_raw, s.fidelity_corrected
    );
    let parse = |c: &ChiMatrix| -> Result<Value> { Ok(serde_json::from_str(&c.to_json()?)?) };
    Ok((
        json!({
            "summary": to_value(&s)?,
            "chi_raw": parse(&r.chi_raw)?,
            "chi_corrected": parse(&r.chi_corrected)?,
        }),
        vec![
            ("chi_raw.csv".into(), chi_table(&r.chi_raw)?),
            ("chi_corrected.csv".into(), chi_table(&r.chi_corrected)?),
        ],
        summary,
        Vec::new(),
    ))
}

fn reorder_cmd(cfg: &RunConfig, seed: u64) -> Result<Parts> {
    let world = cfg.world(cfg.geometry()?);
    let rc = &cfg.reorder;
    let r = run_reorder_experiment(&world, rc.shots, seed, rc.mode)?;
    let mut summary = r.report.render_timeline();
    let _ = writeln!(
        summary,
        "budget {:.2} ms; logical fidelity raw {:.4}, corrected {:.4}",
        rc.budget_ms, r.fidelity_raw, r.fidelity_corrected
    );
    let table = |tt: &crate::tomography::TruthTable| -> Result<Table> {
        let mut buf = Vec::new();
        tt.write_csv(&mut buf)?;
        let text = String::from_utf8(buf).map_err(|e| Error::Tomography(e.to_string()))?;
        let mut lines = text.lines();
        let mut t = Table::new(lines.next().unwrap_or_default());
        t.rows = lines.map(str::to_string).collect();
        Ok(t)
    };
    Ok((
        json!({
            "fidelity_raw": r.fidelity_raw,
            "fidelity_corrected": r.fidelity_corrected,
            "budget_ms": rc.budget_ms,
            "duration_ms": r.report.total_duration_ms(),
            "shuttling_fraction": r.report.shuttling_fraction,
            "counts": to_value(&r.report.counts)?,
            "raw": to_value(&r.raw)?,
            "corrected": to_value(&r.corrected)?,
            "report": to_value(&r.report)?,
        }),
        vec![("truth_raw.csv".into(), table(&r.raw)?), ("truth_corrected.csv".into(), table(&r.corrected)?)],
        summary,
        Vec::new(),
    ))
}

fn field_map_cmd(cfg: &RunConfig, seed: u64) -> Result<Parts> {
    let mut world = cfg.world(cfg.geometry()?);
    let fc = &cfg.field_map;
    world.field = crate::qubit::FieldMap {
        x_liz: world.geometry.liz_center(),
        ..fc.injected
    };
    let points = ramsey_field_scan(&world, &fc.segments, &fc.holds, fc.shots, seed)?;
    let mut t = Table::new("segment,x_um,injected_t,recovered_t,stderr_t,z");
    let mut rows = Vec::new();
    let mut summary = String::new();
    for p in &points {
        let injected = world.field.delta_b(p.x);
        let z = (p.delta_b - injected) / p.delta_b_stderr;
        t.rows.push(format!("{},{},{},{},{},{}", p.segment, p.x, injected, p.delta_b, p.delta_b_stderr, z));
        let _ = writeln!(
            summary,
            "segment {:>2} x = {:>7.1} um: dB = {:+.3e} +- {:.1e} T (injected {:+.3e})",
            p.segment, p.x, p.delta_b, p.delta_b_stderr, injected
        );
        rows.push(json!({ "point": to_value(p)?, "injected": injected, "z": z }));
    }
    Ok((json!({ "points": rows }), vec![("field_map.csv".into(), t)], summary, Vec::new()))
}

fn rabi_fit_cmd(cfg: &RunConfig, seed: u64) -> Result<Parts> {
    let rc = &cfg.rabi_fit;
    if rc.data.is_empty() {
        return Err(Error::Config("rabi_fit.data lists no files".into()));
    }
    let data: Vec<RabiDataset> = rc
        .data
        .iter()
        .map(|d| RabiDataset::read_csv(std::fs::File::open(&d.path)?, d.transition, &d.mode))
        .collect::<Result<_>>()?;
    let mut opts = rc.fit.clone();
    opts.seed = seed;
    let fit = fit_phonon_number(&data, &opts)?;
    let summary = format!(
        "n = {:.4} [{:.4}, {:.4}], omega0 = {:.4} rad/us, eta = {:.4}, chi2 = {:.2} ({} dof)\n",
        fit.n_bar, fit.ci.0, fit.ci.1, fit.omega0, fit.eta, fit.chi2, fit.dof
    );
    let mut t = Table::new("n_bar,ci_low,ci_high,alpha,omega0,eta,decay,chi2,dof");
    t.rows.push(format!(
        "{},{},{},{},{},{},{},{},{}",
        fit.n_bar, fit.ci.0, fit.ci.1, fit.alpha, fit.omega0, fit.eta, fit.decay, fit.chi2, fit.dof
    ));
    Ok((to_value(&fit)?, vec![("rabi_fit.csv".into(), t)], summary, Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stochastic_commands_need_a_seed() {
        let e = execute(Command::Reorder, &RunConfig::default(), None).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn reorder_is_reproducible() {
        let cfg = RunConfig::from_toml("[reorder]\nshots = 50\n").unwrap();
        let a = execute(Command::Reorder, &cfg, Some(3)).unwrap();
        let b = execute(Command::Reorder, &cfg, Some(3)).unwrap();
        assert_eq!(serde_json::to_string(&a.json).unwrap(), serde_json::to_string(&b.json).unwrap());
        assert!(a.tables.iter().all(|(_, t)| t.starts_with("# config_hash=")));
    }
}
