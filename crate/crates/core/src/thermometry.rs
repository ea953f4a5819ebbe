//! Sideband Rabi oscillations in the Lamb-Dicke regime and mean phonon
//! number fits.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::{nelder_mead, NelderMeadOptions};
use crate::rng::child_rng;

/// Largest Lamb-Dicke parameter for which the expansion is trusted.
pub const MAX_ETA: f64 = 0.3;
/// Phonon distributions are truncated once the remaining mass is below this.
pub const TAIL_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    Carrier,
    Rsb,
    Bsb,
}

/// Motional state family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateModel {
    /// Poissonian populations with `|α|² = n̄`.
    Coherent,
    /// Geometric populations.
    Thermal,
}

/// What the detection reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    SingleIon,
    /// Two ions sharing the mode, at least one flipped. The ions are taken
    /// to flip independently at the same phonon number.
    AtLeastOneOfTwo,
}

/// Coupling parameters shared by all transitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiParams {
    pub eta: f64,
    /// Carrier Rabi frequency (rad/µs).
    pub omega0: f64,
    /// Contrast decay rate (1/µs), 0 for none.
    pub decay: f64,
}

/// Phonon number distribution truncated at [`TAIL_MASS`].
pub fn populations(model: StateModel, n_bar: f64) -> Vec<f64> {
    let n_bar = n_bar.max(0.0);
    if n_bar == 0.0 {
        return vec![1.0];
    }
    let mut p = Vec::new();
    let mut sum = 0.0;
    let mut term = match model {
        StateModel::Coherent => (-n_bar).exp(),
        StateModel::Thermal => 1.0 / (n_bar + 1.0),
    };
    let mut n = 0usize;
    loop {
        p.push(term);
        sum += term;
        if 1.0 - sum < TAIL_MASS || n > 10_000 {
            break;
        }
        n += 1;
        term *= match model {
            StateModel::Coherent => n_bar / n as f64,
            StateModel::Thermal => n_bar / (n_bar + 1.0),
        };
    }
    p
}

fn rabi_frequency(transition: Transition, params: &RabiParams, n: usize) -> f64 {
    let (eta, w) = (params.eta, params.omega0);
    match transition {
        Transition::Carrier => w * (1.0 - eta * eta * n as f64),
        Transition::Rsb => eta * w * (n as f64).sqrt(),
        Transition::Bsb => eta * w * (n as f64 + 1.0).sqrt(),
    }
}

/// Flip probability after a pulse of length `t` (µs). Requires `eta < MAX_ETA`.
pub fn rabi_model(
    model: StateModel,
    n_bar: f64,
    transition: Transition,
    params: &RabiParams,
    observable: Observable,
    t: f64,
) -> f64 {
    rabi_from_populations(&populations(model, n_bar), transition, params, observable, t)
}

fn rabi_from_populations(pops: &[f64], transition: Transition, params: &RabiParams, observable: Observable, t: f64) -> f64 {
    let envelope = (-params.decay * t).exp();
    let mut p = 0.0;
    for (n, w) in pops.iter().enumerate() {
        let s = 0.5 * (1.0 - envelope * (rabi_frequency(transition, params, n) * t).cos());
        p += w * match observable {
            Observable::SingleIon => s,
            Observable::AtLeastOneOfTwo => 1.0 - (1.0 - s) * (1.0 - s),
        };
    }
    p.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiPoint {
    /// Pulse length (µs).
    pub t: f64,
    /// Observed flip probability.
    pub p: f64,
    pub shots: u32,
}

/// Flip probabilities of one transition of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RabiDataset {
    pub transition: Transition,
    pub mode: String,
    pub points: Vec<RabiPoint>,
}

impl RabiDataset {
    pub fn validate(&self) -> Result<()> {
        for pt in &self.points {
            if !(0.0..=1.0).contains(&pt.p) || !(pt.t >= 0.0) || pt.shots == 0 {
                return Err(Error::Config(format!("invalid data point {pt:?}")));
            }
        }
        Ok(())
    }

    /// Simulated dataset with binomial shot noise.
    #[allow(clippy::too_many_arguments)]
    pub fn synthesize<R: Rng + ?Sized>(
        model: StateModel,
        n_bar: f64,
        transition: Transition,
        params: &RabiParams,
        observable: Observable,
        times: &[f64],
        shots: u32,
        rng: &mut R,
    ) -> Self {
        let pops = populations(model, n_bar);
        let points = times
            .iter()
            .map(|t| {
                let p = rabi_from_populations(&pops, transition, params, observable, *t);
                let k = Binomial::new(shots as u64, p).expect("p in [0, 1]").sample(rng);
                RabiPoint {
                    t: *t,
                    p: k as f64 / shots as f64,
                    shots,
                }
            })
            .collect();
        Self {
            transition,
            mode: String::new(),
            points,
        }
    }

    /// Reads `t,p,shots` rows.
    pub fn read_csv<R: Read>(reader: R, transition: Transition, mode: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut points = Vec::new();
        for row in r.deserialize() {
            let pt: RabiPoint = row?;
            points.push(pt);
        }
        let d = Self {
            transition,
            mode: mode.to_string(),
            points,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        for pt in &self.points {
            w.serialize(pt)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub model: StateModel,
    pub observable: Observable,
    /// Lamb-Dicke parameter; fitted only when carrier data is present.
    pub eta: f64,
    /// Starting value of the carrier Rabi frequency (rad/µs).
    pub omega0: f64,
    pub fit_decay: bool,
    pub bootstrap: usize,
    /// Two-sided confidence level of the bootstrap interval.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            model: StateModel::Coherent,
            observable: Observable::SingleIon,
            eta: 0.1,
            omega0: std::f64::consts::TAU * 0.5,
            fit_decay: false,
            bootstrap: 200,
            confidence: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: StateModel,
    pub n_bar: f64,
    /// `|α| = √n̄`, meaningful for the coherent model.
    pub alpha: f64,
    pub omega0: f64,
    pub eta: f64,
    pub decay: f64,
    pub chi2: f64,
    pub dof: usize,
    /// Bootstrap interval of `n̄`.
    pub ci: (f64, f64),
}

struct Layout {
    fit_eta: bool,
    fit_decay: bool,
}

impl Layout {
    fn unpack(&self, x: &[f64], opts: &FitOptions) -> (f64, RabiParams) {
        let mut k = 2;
        let eta = if self.fit_eta {
            k += 1;
            x[k - 1]
        } else {
            opts.eta
        };
        let decay = if self.fit_decay { x[k] } else { 0.0 };
        (
            x[0],
            RabiParams {
                eta,
                omega0: x[1],
                decay,
            },
        )
    }
}

fn chi2(data: &[RabiDataset], weights: &[Vec<f64>], model: StateModel, n_bar: f64, params: &RabiParams, obs: Observable) -> f64 {
    let pops = populations(model, n_bar);
    let mut s = 0.0;
    for (d, w) in data.iter().zip(weights) {
        for (pt, wi) in d.points.iter().zip(w) {
            let r = pt.p - rabi_from_populations(&pops, d.transition, params, obs, pt.t);
            s += wi * r * r;
        }
    }
    s
}

/// Binomial weights `n / (q (1 − q))`, with `q` the observed frequency on the
/// first pass and the fitted model afterwards. `q` is kept half a count away
/// from 0 and 1.
fn binomial_weights(data: &[RabiDataset], model: Option<(StateModel, f64, &RabiParams, Observable)>) -> Vec<Vec<f64>> {
    let pops = model.map(|(m, n_bar, _, _)| populations(m, n_bar));
    data.iter()
        .map(|d| {
            d.points
                .iter()
                .map(|pt| {
                    let n = pt.shots as f64;
                    let floor = 0.5 / (n + 1.0);
                    let q = match (&pops, model) {
                        (Some(pops), Some((_, _, params, obs))) => {
                            rabi_from_populations(pops, d.transition, params, obs, pt.t).clamp(floor, 1.0 - floor)
                        }
                        _ => (pt.p * n + 0.5) / (n + 1.0),
                    };
                    n / (q * (1.0 - q))
                })
                .collect()
        })
        .collect()
}

/// Rounds of reweighting after the first fit.
const REWEIGHTS: usize = 2;

/// Iteratively reweighted least squares. Weights taken from the observed
/// frequencies favor points that fluctuated low, so they are replaced by
/// weights from the fitted model.
fn fit_irls(data: &[RabiDataset], opts: &FitOptions, layout: &Layout, starts: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let mut best = minimize(data, &binomial_weights(data, None), opts, layout, starts)?;
    for _ in 0..REWEIGHTS {
        let (n_bar, params) = layout.unpack(&best.0, opts);
        let w = binomial_weights(data, Some((opts.model, n_bar, &params, opts.observable)));
        best = minimize(data, &w, opts, layout, std::slice::from_ref(&best.0))?;
    }
    Ok(best)
}

fn minimize(
    data: &[RabiDataset],
    weights: &[Vec<f64>],
    opts: &FitOptions,
    layout: &Layout,
    starts: &[Vec<f64>],
) -> Result<(Vec<f64>, f64)> {
    let mut bounds = vec![(0.0, 50.0), (0.2 * opts.omega0, 5.0 * opts.omega0)];
    let mut step = vec![0.1, 0.05 * opts.omega0];
    if layout.fit_eta {
        bounds.push((1e-3, MAX_ETA));
        step.push(0.1 * opts.eta);
    }
    if layout.fit_decay {
        bounds.push((0.0, 10.0));
        step.push(0.01);
    }
    let f = |x: &[f64]| {
        let (n_bar, params) = layout.unpack(x, opts);
        chi2(data, weights, opts.model, n_bar, &params, opts.observable)
    };
    let nm = NelderMeadOptions {
        max_evaluations: 2000,
        ftol: 1e-12,
        xtol: 1e-9,
        restarts: 1,
        seed: opts.seed,
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for x0 in starts {
        let m = nelder_mead(f, x0, &bounds, &step, &nm, None)?;
        if best.as_ref().is_none_or(|b| m.objective < b.1) {
            best = Some((m.point, m.objective));
        }
    }
    let best = best.expect("at least one start");
    if !best.1.is_finite() {
        return Err(Error::Fit("objective diverged".into()));
    }
    Ok(best)
}

/// Joint weighted least-squares fit of `n̄`, `Ω₀` (and `η` with carrier data)
/// to sideband and carrier flip probabilities, with a parametric bootstrap
/// interval for `n̄`.
pub fn fit_phonon_number(data: &[RabiDataset], opts: &FitOptions) -> Result<FitResult> {
    if data.is_empty() {
        return Err(Error::Fit("no data".into()));
    }
    for d in data {
        d.validate()?;
    }
    if !(opts.eta > 0.0 && opts.eta < MAX_ETA) || !(opts.omega0 > 0.0) {
        return Err(Error::Config(format!(
            "need 0 < eta < {MAX_ETA} and a positive Rabi frequency (eta = {}, omega0 = {})",
            opts.eta, opts.omega0
        )));
    }
    if !(opts.confidence > 0.0 && opts.confidence < 1.0) {
        return Err(Error::Config("confidence must lie in (0, 1)".into()));
    }
    let n_points: usize = data.iter().map(|d| d.points.len()).sum();
    if n_points < 10 {
        return Err(Error::Fit(format!("{n_points} points, at least 10 required")));
    }
    let (t_min, t_max) = data
        .iter()
        .flat_map(|d| d.points.iter().map(|p| p.t))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    let period = std::f64::consts::TAU / (opts.eta * opts.omega0);
    if t_max - t_min < 2.0 * period {
        return Err(Error::Fit("data spans less than two sideband periods".into()));
    }
    let first = data[0].points[0].p;
    if data.iter().all(|d| d.points.iter().all(|p| p.p == first)) {
        return Err(Error::Fit("all flip probabilities are equal".into()));
    }
    let layout = Layout {
        fit_eta: data.iter().any(|d| d.transition == Transition::Carrier),
        fit_decay: opts.fit_decay,
    };
    let extra = |n: f64| {
        let mut x = vec![n, opts.omega0];
        if layout.fit_eta {
            x.push(opts.eta);
        }
        if layout.fit_decay {
            x.push(0.0);
        }
        x
    };
    let starts: Vec<Vec<f64>> = [0.02, 0.3, 1.5].iter().map(|n| extra(*n)).collect();
    let (x, objective) = fit_irls(data, opts, &layout, &starts)?;
    let (n_bar, params) = layout.unpack(&x, opts);

    let pops = populations(opts.model, n_bar);
    let mut boot: Vec<f64> = (0..opts.bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng = child_rng(opts.seed, "bootstrap", b as u64);
            let resampled: Vec<RabiDataset> = data
                .iter()
                .map(|d| RabiDataset {
                    transition: d.transition,
                    mode: d.mode.clone(),
                    points: d
                        .points
                        .iter()
                        .map(|pt| {
                            let p = rabi_from_populations(&pops, d.transition, &params, opts.observable, pt.t);
                            let k = Binomial::new(pt.shots as u64, p).expect("p in [0, 1]").sample(&mut rng);
                            RabiPoint {
                                p: k as f64 / pt.shots as f64,
                                ..*pt
                            }
                        })
                        .collect(),
                })
                .collect();
            fit_irls(&resampled, opts, &layout, std::slice::from_ref(&x)).map(|(xb, _)| xb[0])
        })
        .collect::<Result<_>>()?;
    boot.sort_by(f64::total_cmp);
    let ci = if boot.is_empty() {
        (n_bar, n_bar)
    } else {
        let q = |f: f64| boot[((f * (boot.len() - 1) as f64).round() as usize).min(boot.len() - 1)];
        let tail = 0.5 * (1.0 - opts.confidence);
        (q(tail).min(n_bar), q(1.0 - tail).max(n_bar))
    };
    Ok(FitResult {
        model: opts.model,
        n_bar,
        alpha: n_bar.sqrt(),
        omega0: params.omega0,
        eta: params.eta,
        decay: params.decay,
        chi2: objective,
        dof: n_points.saturating_sub(x.len()),
        ci,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params() -> RabiParams {
        RabiParams {
            eta: 0.1,
            omega0: std::f64::consts::TAU * 0.5,
            decay: 0.0,
        }
    }

    #[test]
    fn ground_state_red_sideband_is_dark() {
        for t in [0.0, 1.0, 7.3, 40.0] {
            assert_eq!(rabi_model(StateModel::Thermal, 0.0, Transition::Rsb, &params(), Observable::SingleIon, t), 0.0);
        }
    }

    #[test]
    fn ground_state_blue_sideband_is_a_sinusoid() {
        let p = params();
        for t in [0.3, 2.0, 11.0] {
            let want = (p.eta * p.omega0 * t / 2.0).sin().powi(2);
            let got = rabi_model(StateModel::Coherent, 0.0, Transition::Bsb, &p, Observable::SingleIon, t);
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn coherent_series_matches_brute_force_sum() {
        let p = params();
        for t in [0.5, 3.0, 17.0] {
            let mut want = 0.0;
            let mut pn = (-1.0f64).exp();
            for n in 0..200 {
                if n > 0 {
                    pn /= n as f64;
                }
                want += pn * (p.eta * p.omega0 * ((n + 1) as f64).sqrt() * t / 2.0).sin().powi(2);
            }
            let got = rabi_model(StateModel::Coherent, 1.0, Transition::Bsb, &p, Observable::SingleIon, t);
            assert!((got - want).abs() < 1e-8);
        }
    }

    #[test]
    fn populations_are_normalized() {
        for m in [StateModel::Coherent, StateModel::Thermal] {
            let s: f64 = populations(m, 2.5).iter().sum();
            assert!((1.0 - s).abs() < TAIL_MASS);
        }
    }

    #[test]
    fn constant_data_is_rejected() {
        let d = RabiDataset {
            transition: Transition::Bsb,
            mode: "x".into(),
            points: (0..20)
                .map(|k| RabiPoint {
                    t: k as f64 * 2.0,
                    p: 0.5,
                    shots: 100,
                })
                .collect(),
        };
        assert!(matches!(fit_phonon_number(&[d], &FitOptions::default()), Err(Error::Fit(_))));
    }

    #[test]
    fn carrier_data_pins_eta() {
        let p = RabiParams { eta: 0.12, ..params() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let times: Vec<f64> = (0..120).map(|k| k as f64 * 0.5).collect();
        let data: Vec<RabiDataset> = [Transition::Carrier, Transition::Rsb, Transition::Bsb]
            .iter()
            .map(|tr| RabiDataset::synthesize(StateModel::Thermal, 0.3, *tr, &p, Observable::SingleIon, &times, 5000, &mut rng))
            .collect();
        let opts = FitOptions {
            model: StateModel::Thermal,
            eta: 0.1,
            bootstrap: 0,
            ..Default::default()
        };
        let fit = fit_phonon_number(&data, &opts).unwrap();
        assert!((fit.eta - 0.12).abs() < 0.01, "{fit:?}");
        assert!((fit.n_bar - 0.3).abs() < 0.05, "{fit:?}");
    }
}
