//! Classical dynamics of small Coulomb crystals in the surrogate potential.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{FilterModel, FilteredSchedule};
use crate::trap::{Channel, ElectrodeField, Potential, TrapGeometry, Vec3, VoltageAssignment};
use crate::units::{cyclic, COULOMB_EV_UM, HBAR_EV_US};
use crate::waveform::{swap_schedule, SwapRampParams, VoltageSchedule};

/// Smallest allowed distance between two ions (µm).
pub const MIN_SEPARATION_UM: f64 = 0.1;
/// Radial distance beyond which an ion counts as lost (µm).
pub const RADIAL_ESCAPE_UM: f64 = 100.0;
/// Default integration step (µs).
pub const DEFAULT_DT_US: f64 = 0.002;

/// Positions (µm) and velocities (µm/µs) of 1 to 3 ions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

impl CrystalState {
    pub fn new(positions: Vec<Vec3>, velocities: Vec<Vec3>) -> Result<Self> {
        if positions.is_empty() || positions.len() > 3 {
            return Err(Error::Config(format!("{} ions requested, 1 to 3 supported", positions.len())));
        }
        if velocities.len() != positions.len() {
            return Err(Error::Config("positions and velocities differ in length".into()));
        }
        if let Some(d) = closest_pair(&positions) {
            if d <= MIN_SEPARATION_UM {
                return Err(Error::Coincident(d));
            }
        }
        Ok(Self { positions, velocities })
    }

    pub fn at_rest(positions: Vec<Vec3>) -> Result<Self> {
        let n = positions.len();
        Self::new(positions, vec![[0.0; 3]; n])
    }

    pub fn n_ions(&self) -> usize {
        self.positions.len()
    }
}

fn closest_pair(positions: &[Vec3]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            let d = dist(&positions[i], &positions[j]);
            best = Some(best.map_or(d, |b| b.min(d)));
        }
    }
    best
}

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Trap plus Coulomb energy (eV) of singly charged ions at `positions`.
pub fn total_energy<P: Potential + ?Sized>(field: &P, positions: &[Vec3]) -> f64 {
    let mut e: f64 = positions.iter().map(|r| field.energy(r)).sum();
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            e += COULOMB_EV_UM / dist(&positions[i], &positions[j]);
        }
    }
    e
}

/// Gradient of [`total_energy`], one 3-vector per ion.
pub fn total_gradient<P: Potential + ?Sized>(field: &P, positions: &[Vec3]) -> Vec<Vec3> {
    let mut g: Vec<Vec3> = positions.iter().map(|r| field.gradient(r)).collect();
    coulomb_gradient(positions, &mut g);
    g
}

fn coulomb_gradient(positions: &[Vec3], g: &mut [Vec3]) {
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            let d = [
                positions[i][0] - positions[j][0],
                positions[i][1] - positions[j][1],
                positions[i][2] - positions[j][2],
            ];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            let k = COULOMB_EV_UM / (r2 * r2.sqrt());
            for a in 0..3 {
                // dE/dr_i = -K d / r³ ; equal and opposite on j.
                g[i][a] -= k * d[a];
                g[j][a] += k * d[a];
            }
        }
    }
}

/// Hessian of [`total_energy`] as a 3N × 3N matrix (ion-major ordering).
pub fn total_hessian<P: Potential + ?Sized>(field: &P, positions: &[Vec3]) -> DMatrix<f64> {
    let n = positions.len();
    let mut h = DMatrix::zeros(3 * n, 3 * n);
    for (i, r) in positions.iter().enumerate() {
        let hi = field.hessian(r);
        for a in 0..3 {
            for b in 0..3 {
                h[(3 * i + a, 3 * i + b)] += hi[a][b];
            }
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let d: Vec<f64> = (0..3).map(|a| positions[i][a] - positions[j][a]).collect();
            let r2: f64 = d.iter().map(|x| x * x).sum();
            let r = r2.sqrt();
            for a in 0..3 {
                for b in 0..3 {
                    let delta = if a == b { 1.0 } else { 0.0 };
                    let m = COULOMB_EV_UM * (3.0 * d[a] * d[b] / (r2 * r2 * r) - delta / (r2 * r));
                    h[(3 * i + a, 3 * i + b)] += m;
                    h[(3 * j + a, 3 * j + b)] += m;
                    h[(3 * i + a, 3 * j + b)] -= m;
                    h[(3 * j + a, 3 * i + b)] -= m;
                }
            }
        }
    }
    h
}

fn flatten(p: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(p.len() * 3, p.iter().flat_map(|r| r.iter().copied()))
}

fn unflatten(v: &DVector<f64>) -> Vec<Vec3> {
    v.as_slice().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Gradient-norm threshold for [`find_equilibrium`] (eV/µm).
pub const EQUILIBRIUM_GRADIENT_TOL: f64 = 1e-10;

/// Locates a stable equilibrium of `n` ions near `guess`.
///
/// Newton steps use the absolute Hessian spectrum, so the iteration descends
/// everywhere; when it stalls on a saddle it is pushed off along the unstable
/// direction.
pub fn find_equilibrium<P: Potential + ?Sized>(field: &P, guess: &[Vec3]) -> Result<Vec<Vec3>> {
    if guess.is_empty() || guess.len() > 3 {
        return Err(Error::Config(format!("{} ions requested, 1 to 3 supported", guess.len())));
    }
    if let Some(d) = closest_pair(guess) {
        if d <= MIN_SEPARATION_UM {
            return Err(Error::Coincident(d));
        }
    }
    const MAX_ITER: usize = 400;
    let mut x = flatten(guess);
    let mut kicks = 0;
    let mut gnorm = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let pos = unflatten(&x);
        let g = flatten(&total_gradient(field, &pos));
        gnorm = g.norm();
        let h = total_hessian(field, &pos);
        let eig = SymmetricEigen::new(h);
        let (imin, lmin) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, l)| if *l < acc.1 { (i, *l) } else { acc });
        let scale = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
        if gnorm < EQUILIBRIUM_GRADIENT_TOL {
            if lmin > 1e-12 * scale {
                return Ok(snap_to_axis(field, pos));
            }
            if kicks >= 5 {
                return Err(Error::Saddle);
            }
            // Stuck on a symmetric saddle: leave along the softest direction.
            kicks += 1;
            x += eig.eigenvectors.column(imin) * 0.5;
            continue;
        }
        let floor = 1e-9 * scale.max(1e-30);
        let mut step = DVector::zeros(x.len());
        for k in 0..x.len() {
            let v = eig.eigenvectors.column(k);
            step -= v * (v.dot(&g) / eig.eigenvalues[k].abs().max(floor));
        }
        let max_len = 2.0;
        if step.norm() > max_len {
            step *= max_len / step.norm();
        }
        let e0 = total_energy(field, &pos);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let trial = &x + &step * t;
            let tp = unflatten(&trial);
            let ok = closest_pair(&tp).is_none_or(|d| d > MIN_SEPARATION_UM);
            if ok && total_energy(field, &tp) <= e0 + 1e-15 * e0.abs() {
                x = trial;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            // Round-off floor: accept a full Newton step if it lowers the gradient.
            let trial = &x + &step;
            let tg = flatten(&total_gradient(field, &unflatten(&trial))).norm();
            if tg < gnorm {
                x = trial;
            } else {
                break;
            }
        }
    }
    Err(Error::NoEquilibrium {
        iterations: MAX_ITER,
        gradient_norm: gnorm,
    })
}

/// Sets round-off sized radial coordinates to exactly zero when the gradient
/// allows it. Otherwise Newton leaves ~1e-20 µm offsets that an unstable
/// radial mode later amplifies into spurious symmetry breaking.
fn snap_to_axis<P: Potential + ?Sized>(field: &P, mut pos: Vec<Vec3>) -> Vec<Vec3> {
    let mut snapped = pos.clone();
    for r in snapped.iter_mut() {
        for c in &mut r[1..] {
            if c.abs() < 1e-12 {
                *c = 0.0;
            }
        }
    }
    if flatten(&total_gradient(field, &snapped)).norm() < EQUILIBRIUM_GRADIENT_TOL {
        pos = snapped;
    }
    pos
}

/// Dominant axis of a motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeLabel {
    AxialCom,
    AxialStretch,
    RadialLowCom,
    RadialLowRocking,
    RadialHighCom,
    RadialHighRocking,
    /// Modes of larger crystals, numbered by frequency along their axis.
    Other { axis: Axis, index: usize },
}

impl ModeLabel {
    pub fn name(&self) -> String {
        match self {
            ModeLabel::AxialCom => "axial_com".into(),
            ModeLabel::AxialStretch => "axial_stretch".into(),
            ModeLabel::RadialLowCom => "radial_low_com".into(),
            ModeLabel::RadialLowRocking => "radial_low_rocking".into(),
            ModeLabel::RadialHighCom => "radial_high_com".into(),
            ModeLabel::RadialHighRocking => "radial_high_rocking".into(),
            ModeLabel::Other { axis, index } => format!("{axis:?}_{index}").to_lowercase(),
        }
    }
}

/// Normal modes of a crystal at equilibrium.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSet {
    pub equilibrium: Vec<Vec3>,
    /// Mode frequencies in MHz, ascending.
    pub frequencies_mhz: Vec<f64>,
    /// Unit eigenvectors of the mass-weighted Hessian, one per mode.
    pub eigenvectors: Vec<Vec<f64>>,
    pub labels: Vec<ModeLabel>,
    /// Ion mass in internal units.
    pub mass: f64,
}

impl ModeSet {
    pub fn omega(&self, mode: usize) -> f64 {
        2.0 * std::f64::consts::PI * self.frequencies_mhz[mode]
    }

    pub fn find(&self, label: ModeLabel) -> Option<usize> {
        self.labels.iter().position(|l| *l == label)
    }

    pub fn len(&self) -> usize {
        self.frequencies_mhz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies_mhz.is_empty()
    }
}

/// Normal-mode analysis at `equilibrium`.
pub fn normal_modes<P: Potential + ?Sized>(field: &P, equilibrium: &[Vec3], mass: f64) -> Result<ModeSet> {
    let n = equilibrium.len();
    let h = total_hessian(field, equilibrium) / mass;
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..3 * n).collect();
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let min = eig.eigenvalues[order[0]];
    if min <= 0.0 {
        return Err(Error::Unstable {
            min_eigenvalue: min * mass,
        });
    }
    let frequencies_mhz: Vec<f64> = order.iter().map(|k| cyclic(eig.eigenvalues[*k].sqrt())).collect();
    let eigenvectors: Vec<Vec<f64>> = order
        .iter()
        .map(|k| {
            let v: Vec<f64> = eig.eigenvectors.column(*k).iter().copied().collect();
            // Fix the overall sign so the largest component is positive.
            let big = v.iter().copied().fold(0.0f64, |a, c| if c.abs() > a.abs() { c } else { a });
            v.into_iter().map(|c| if big < 0.0 { -c } else { c }).collect()
        })
        .collect();
    let labels = label_modes(&eigenvectors, n);
    Ok(ModeSet {
        equilibrium: equilibrium.to_vec(),
        frequencies_mhz,
        eigenvectors,
        labels,
        mass,
    })
}

fn dominant_axis(v: &[f64]) -> usize {
    let n = v.len() / 3;
    (0..3)
        .map(|a| (a, (0..n).map(|i| v[3 * i + a].powi(2)).sum::<f64>()))
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .map(|p| p.0)
        .unwrap_or(0)
}

fn label_modes(vectors: &[Vec<f64>], n: usize) -> Vec<ModeLabel> {
    let axes = [Axis::X, Axis::Y, Axis::Z];
    let mut per_axis = [0usize; 3];
    vectors
        .iter()
        .map(|v| {
            let a = dominant_axis(v);
            let index = per_axis[a];
            per_axis[a] += 1;
            match n {
                1 => [ModeLabel::AxialCom, ModeLabel::RadialLowCom, ModeLabel::RadialHighCom][a],
                2 => {
                    let in_phase = v[a] * v[3 + a] > 0.0;
                    match (a, in_phase) {
                        (0, true) => ModeLabel::AxialCom,
                        (0, false) => ModeLabel::AxialStretch,
                        (1, true) => ModeLabel::RadialLowCom,
                        (1, false) => ModeLabel::RadialLowRocking,
                        (_, true) => ModeLabel::RadialHighCom,
                        (_, false) => ModeLabel::RadialHighRocking,
                    }
                }
                _ => ModeLabel::Other { axis: axes[a], index },
            }
        })
        .collect()
}

/// Coherent excitation of one mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeExcitation {
    pub label: ModeLabel,
    pub frequency_mhz: f64,
    pub alpha_re: f64,
    pub alpha_im: f64,
    pub n_bar: f64,
    /// Zero-point amplitude in mass-weighted units (µm·√(eV·µs²/µm²)).
    pub q_zpf: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcitationReport {
    pub equilibrium: Vec<Vec3>,
    pub modes: Vec<ModeExcitation>,
}

impl ExcitationReport {
    pub fn max_n_bar(&self) -> f64 {
        self.modes.iter().map(|m| m.n_bar).fold(0.0, f64::max)
    }

    pub fn n_bar(&self, label: ModeLabel) -> Option<f64> {
        self.modes.iter().find(|m| m.label == label).map(|m| m.n_bar)
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// Projects the deviation of `state` from equilibrium onto `modes`.
pub fn project_onto_modes(state: &CrystalState, modes: &ModeSet) -> Result<Vec<ModeExcitation>> {
    if state.n_ions() != modes.equilibrium.len() {
        return Err(Error::Config("state and mode set differ in ion count".into()));
    }
    let sm = modes.mass.sqrt();
    let dq: Vec<f64> = state
        .positions
        .iter()
        .zip(&modes.equilibrium)
        .flat_map(|(r, e)| (0..3).map(move |a| sm * (r[a] - e[a])))
        .collect();
    let dp: Vec<f64> = state
        .velocities
        .iter()
        .flat_map(|v| (0..3).map(move |a| sm * v[a]))
        .collect();
    Ok((0..modes.len())
        .map(|m| {
            let e = &modes.eigenvectors[m];
            let q: f64 = e.iter().zip(&dq).map(|(a, b)| a * b).sum();
            let p: f64 = e.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let w = modes.omega(m);
            let q_zpf = (HBAR_EV_US / (2.0 * w)).sqrt();
            let p_zpf = (HBAR_EV_US * w / 2.0).sqrt();
            let alpha_re = q / (2.0 * q_zpf);
            let alpha_im = p / (2.0 * p_zpf);
            ModeExcitation {
                label: modes.labels[m],
                frequency_mhz: modes.frequencies_mhz[m],
                alpha_re,
                alpha_im,
                n_bar: alpha_re * alpha_re + alpha_im * alpha_im,
                q_zpf,
            }
        })
        .collect())
}

/// Mean phonon numbers of `state` relative to the stable equilibrium of
/// `field` closest to its positions.
pub fn mode_excitation<P: Potential + ?Sized>(state: &CrystalState, field: &P, mass: f64) -> Result<ExcitationReport> {
    let eq = find_equilibrium(field, &state.positions)?;
    let modes = normal_modes(field, &eq, mass)?;
    Ok(ExcitationReport {
        modes: project_onto_modes(state, &modes)?,
        equilibrium: eq,
    })
}

/// Classical thermal state: each mode gets an exponentially distributed
/// energy with mean `n_bar · ħω` and a uniform random phase.
pub fn thermal_state<R: Rng + ?Sized>(modes: &ModeSet, n_bar: &[f64], rng: &mut R) -> Result<CrystalState> {
    if n_bar.len() != modes.len() {
        return Err(Error::Config("one mean phonon number per mode required".into()));
    }
    let n = modes.equilibrium.len();
    let mut dq = vec![0.0; 3 * n];
    let mut dp = vec![0.0; 3 * n];
    for m in 0..modes.len() {
        let w = modes.omega(m);
        let e: f64 = Exp1.sample(rng);
        let amp2 = e * n_bar[m];
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let alpha = amp2.sqrt();
        let q = 2.0 * (HBAR_EV_US / (2.0 * w)).sqrt() * alpha * phase.cos();
        let p = 2.0 * (HBAR_EV_US * w / 2.0).sqrt() * alpha * phase.sin();
        for (k, c) in modes.eigenvectors[m].iter().enumerate() {
            dq[k] += c * q;
            dp[k] += c * p;
        }
    }
    let sm = modes.mass.sqrt();
    let positions = modes
        .equilibrium
        .iter()
        .enumerate()
        .map(|(i, r)| [r[0] + dq[3 * i] / sm, r[1] + dq[3 * i + 1] / sm, r[2] + dq[3 * i + 2] / sm])
        .collect();
    let velocities = (0..n)
        .map(|i| [dp[3 * i] / sm, dp[3 * i + 1] / sm, dp[3 * i + 2] / sm])
        .collect();
    CrystalState::new(positions, velocities)
}

/// A time-dependent electrode field.
pub trait DrivenPotential {
    /// Updates the internal field to time `t` and returns it.
    fn field_at(&mut self, t: f64) -> &ElectrodeField;
}

/// A constant field.
pub struct StaticField(pub ElectrodeField);

impl DrivenPotential for StaticField {
    fn field_at(&mut self, _t: f64) -> &ElectrodeField {
        &self.0
    }
}

/// Filtered schedule voltages applied to a geometry.
pub struct ScheduledField {
    filtered: FilteredSchedule,
    field: ElectrodeField,
    scratch: Vec<f64>,
}

impl ScheduledField {
    pub fn new(geometry: &TrapGeometry, filtered: FilteredSchedule) -> Result<Self> {
        let field = geometry.field(&filtered.assignment_at(0.0))?;
        Ok(Self {
            filtered,
            field,
            scratch: Vec::new(),
        })
    }

    pub fn filtered(&self) -> &FilteredSchedule {
        &self.filtered
    }
}

impl DrivenPotential for ScheduledField {
    fn field_at(&mut self, t: f64) -> &ElectrodeField {
        // Channel order of the filtered schedule matches the term order of the
        // compiled field (segments first, then diagonals).
        self.filtered.values_into(t, &mut self.scratch);
        for (k, v) in self.scratch.iter().enumerate() {
            self.field.set_term(k, *v);
        }
        &self.field
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrateOptions {
    pub dt: f64,
    /// Record every `stride`-th step (0 records only the endpoints).
    pub stride: usize,
    pub record_energy: bool,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT_US,
            stride: 0,
            record_energy: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub positions: Vec<Vec<Vec3>>,
    /// Total energy at the recorded times, when requested.
    pub energies: Vec<f64>,
    pub final_state: CrystalState,
    pub t_end: f64,
    /// Largest |y| any ion reached (µm).
    pub max_abs_y: f64,
}

impl Trajectory {
    /// Writes `t,x0,y0,z0,x1,...` CSV.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let n = self.final_state.n_ions();
        let mut header = vec!["t_us".to_string()];
        for i in 0..n {
            for a in ["x", "y", "z"] {
                header.push(format!("{a}{i}"));
            }
        }
        w.write_record(&header)?;
        for (t, p) in self.times.iter().zip(&self.positions) {
            let mut row = vec![t.to_string()];
            row.extend(p.iter().flat_map(|r| r.iter().map(|c| c.to_string())));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Velocity-Verlet integration over `[t0, t1]`.
pub fn integrate<D: DrivenPotential + ?Sized>(
    driven: &mut D,
    geometry: &TrapGeometry,
    state0: &CrystalState,
    t0: f64,
    t1: f64,
    options: &IntegrateOptions,
) -> Result<Trajectory> {
    if !(options.dt > 0.0) {
        return Err(Error::Config("time step must be positive".into()));
    }
    let mass = geometry.ion_mass();
    let (xlo, xhi) = geometry.axial_bounds();
    let steps = ((t1 - t0) / options.dt).round().max(0.0) as usize;
    let dt = if steps > 0 { (t1 - t0) / steps as f64 } else { 0.0 };
    let n = state0.n_ions();
    let mut x = state0.positions.clone();
    let mut v = state0.velocities.clone();
    let mut max_abs_y = x.iter().map(|r| r[1].abs()).fold(0.0, f64::max);

    let mut traj = Trajectory {
        times: Vec::new(),
        positions: Vec::new(),
        energies: Vec::new(),
        final_state: state0.clone(),
        t_end: t1,
        max_abs_y,
    };
    let record = |traj: &mut Trajectory, t: f64, x: &[Vec3], v: &[Vec3], field: &ElectrodeField| {
        traj.times.push(t);
        traj.positions.push(x.to_vec());
        if options.record_energy {
            let kin: f64 = v.iter().map(|u| 0.5 * mass * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2])).sum();
            traj.energies.push(kin + total_energy(field, x));
        }
    };

    let mut g = total_gradient(driven.field_at(t0), &x);
    record(&mut traj, t0, &x, &v, driven.field_at(t0));
    for k in 0..steps {
        let t_next = t0 + (k + 1) as f64 * dt;
        for i in 0..n {
            for a in 0..3 {
                v[i][a] -= 0.5 * dt * g[i][a] / mass;
                x[i][a] += dt * v[i][a];
            }
        }
        let field = driven.field_at(t_next);
        g = total_gradient(field, &x);
        for i in 0..n {
            for a in 0..3 {
                v[i][a] -= 0.5 * dt * g[i][a] / mass;
            }
            let r = x[i];
            max_abs_y = max_abs_y.max(r[1].abs());
            let lost = !r.iter().all(|c| c.is_finite())
                || r[0] < xlo
                || r[0] > xhi
                || r[1].abs() > RADIAL_ESCAPE_UM
                || r[2].abs() > RADIAL_ESCAPE_UM;
            if lost {
                return Err(Error::Escape {
                    ion: i,
                    time: t_next,
                    position: r,
                });
            }
        }
        let last = k + 1 == steps;
        if last || (options.stride > 0 && (k + 1) % options.stride == 0) {
            record(&mut traj, t_next, &x, &v, field);
        }
    }
    traj.max_abs_y = max_abs_y;
    traj.final_state = CrystalState::new(x, v)?;
    Ok(traj)
}

/// Secular drift of the total energy along a recorded trajectory, relative to
/// `reference`.
///
/// The energies are averaged over the first and last `window` fraction of the
/// record so that the bounded step-size oscillation of the symplectic
/// integrator does not count as drift.
pub fn relative_energy_drift(energies: &[f64], reference: f64, window: f64) -> f64 {
    let k = ((energies.len() as f64 * window).ceil() as usize).clamp(1, energies.len().max(1));
    if energies.is_empty() {
        return 0.0;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let head = mean(&energies[..k]);
    let tail = mean(&energies[energies.len() - k..]);
    ((tail - head) / reference).abs()
}

/// Hold configuration of a single well at `site` with both neighbors and
/// the site's diagonal channel at 0 V.
pub fn swap_hold(site: usize, u_c: f64) -> VoltageAssignment {
    VoltageAssignment::new()
        .with(Channel::Segment(site - 1), 0.0)
        .with(Channel::Segment(site), u_c)
        .with(Channel::Segment(site + 1), 0.0)
        .with(Channel::Diagonal(site), 0.0)
}

/// Result of simulating one swap of a two-ion crystal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwapSimulation {
    pub params: SwapRampParams,
    pub initial: Vec<Vec3>,
    pub excitation: ExcitationReport,
    /// Programmed duration plus filter settling tail (µs).
    pub simulated_time: f64,
    /// True when the ions exchanged axial order.
    pub swapped: bool,
    pub max_abs_y: f64,
}

/// Two ions start at rest in the hold well at the LIZ, the filtered swap
/// schedule is applied and the final motional excitation is measured.
pub fn simulate_swap(
    geometry: &TrapGeometry,
    params: &SwapRampParams,
    filter: &FilterModel,
    options: &IntegrateOptions,
) -> Result<SwapSimulation> {
    let site = geometry.liz_index;
    let schedule = swap_schedule(params, site)?;
    let hold = swap_hold(site, params.u_c_start);
    let static_field = geometry.field(&hold)?;
    let x0 = geometry.liz_center();
    let initial = find_equilibrium(&static_field, &[[x0 - 2.0, 0.0, 0.0], [x0 + 2.0, 0.0, 0.0]])?;
    let filtered = filter.apply(&schedule);
    let t_end = filtered.settled_end();
    let mut driven = ScheduledField::new(geometry, filtered)?;
    let state0 = CrystalState::at_rest(initial.clone())?;
    let traj = integrate(&mut driven, geometry, &state0, 0.0, t_end, options)?;
    let end = &traj.final_state;
    let excitation = mode_excitation(end, &static_field, geometry.ion_mass())?;
    let swapped = (end.positions[0][0] - end.positions[1][0]).signum()
        != (initial[0][0] - initial[1][0]).signum();
    Ok(SwapSimulation {
        params: params.clone(),
        initial,
        excitation,
        simulated_time: t_end,
        swapped,
        max_abs_y: traj.max_abs_y,
    })
}

/// Simulates an arbitrary schedule with a crystal starting at rest at the
/// equilibrium of the schedule's first sample.
pub fn simulate_schedule(
    geometry: &TrapGeometry,
    schedule: &VoltageSchedule,
    filter: &FilterModel,
    guess: &[Vec3],
    options: &IntegrateOptions,
) -> Result<Trajectory> {
    let start = geometry.field(&schedule.start_config())?;
    let initial = find_equilibrium(&start, guess)?;
    let filtered = filter.apply(schedule);
    let t_end = filtered.settled_end();
    let mut driven = ScheduledField::new(geometry, filtered)?;
    integrate(&mut driven, geometry, &CrystalState::at_rest(initial)?, 0.0, t_end, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trap::{calibrate, SecularTargets, TrapLayout};

    fn geometry() -> TrapGeometry {
        calibrate(&TrapLayout::default(), &SecularTargets::default(), -6.0).unwrap()
    }

    #[test]
    fn coincident_ions_rejected() {
        assert!(CrystalState::at_rest(vec![[0.0; 3], [0.05, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let g = geometry();
        let f = g.field(&swap_hold(20, -6.0).with(Channel::Diagonal(20), 0.7)).unwrap();
        let pos = vec![[-2.1, 0.3, 0.1], [2.4, -0.2, 0.05]];
        let h = total_hessian(&f, &pos);
        let eps = 1e-4;
        for k in 0..6 {
            let mut p = pos.clone();
            p[k / 3][k % 3] += eps;
            let gp = flatten(&total_gradient(&f, &p));
            p[k / 3][k % 3] -= 2.0 * eps;
            let gm = flatten(&total_gradient(&f, &p));
            for j in 0..6 {
                let fd = (gp[j] - gm[j]) / (2.0 * eps);
                assert!((fd - h[(j, k)]).abs() < 1e-9 * h.amax(), "{j} {k}");
            }
        }
    }

    #[test]
    fn single_ion_modes_are_secular_frequencies() {
        let g = geometry();
        let f = g.field(&swap_hold(20, -6.0)).unwrap();
        let eq = find_equilibrium(&f, &[[1.0, 0.5, -0.3]]).unwrap();
        let m = normal_modes(&f, &eq, g.ion_mass()).unwrap();
        for (got, want) in m.frequencies_mhz.iter().zip([1.488, 1.927, 3.248]) {
            assert!((got / want - 1.0).abs() < 1e-6);
        }
        assert_eq!(m.labels, vec![ModeLabel::AxialCom, ModeLabel::RadialLowCom, ModeLabel::RadialHighCom]);
    }
}
