//! Derivative-free minimization (Nelder–Mead with bound clipping and restarts)
//! and its application to swap ramp parameters.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::waveform::SwapRampParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NelderMeadOptions {
    pub max_evaluations: usize,
    /// Stop when the simplex spread in objective falls below this.
    pub ftol: f64,
    /// Stop when the simplex diameter (in scaled coordinates) falls below this.
    pub xtol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evaluations: 400,
            ftol: 1e-10,
            xtol: 1e-7,
            restarts: 2,
            seed: 0,
        }
    }
}

/// One line of the optimizer's JSON-lines log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub restart: usize,
    pub iteration: usize,
    pub evaluations: usize,
    pub best_objective: f64,
    pub best_point: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Minimum {
    pub point: Vec<f64>,
    pub objective: f64,
    pub initial_objective: f64,
    pub evaluations: usize,
    pub iterations: usize,
}

fn clip(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Minimizes `f` from `x0` inside the box `bounds`.
///
/// `step` is the initial simplex edge along each coordinate. The returned
/// point is never worse than `x0`. Simplex vertices of a fresh start are
/// evaluated in parallel; everything else runs sequentially.
pub fn nelder_mead<F>(
    f: F,
    x0: &[f64],
    bounds: &[(f64, f64)],
    step: &[f64],
    options: &NelderMeadOptions,
    mut log: Option<&mut dyn Write>,
) -> Result<Minimum>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = x0.len();
    if n == 0 || bounds.len() != n || step.len() != n {
        return Err(Error::Optimizer("dimension mismatch or empty parameter set".into()));
    }
    if bounds.iter().any(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::Optimizer("invalid bounds".into()));
    }
    let mut start = x0.to_vec();
    clip(&mut start, bounds);
    let f0 = f(&start);
    if !f0.is_finite() {
        return Err(Error::Optimizer(format!("objective is {f0} at the initial point")));
    }
    let mut best = (start.clone(), f0);
    let mut evaluations = 1;
    let mut iterations = 0;
    if f0 == 0.0 {
        return Ok(Minimum {
            point: start,
            objective: f0,
            initial_objective: f0,
            evaluations,
            iterations,
        });
    }
    // Non-finite trial values count as +inf so the simplex moves away from them.
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() { v } else { f64::INFINITY }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    for restart in 0..=options.restarts {
        let scale = 0.5f64.powi(restart as i32);
        let centre = best.0.clone();
        let mut vertices: Vec<Vec<f64>> = vec![centre.clone()];
        for i in 0..n {
            let mut v = centre.clone();
            let jitter = if restart == 0 { 1.0 } else { rng.random_range(0.5..1.5) };
            let mut d = step[i] * scale * jitter;
            if v[i] + d > bounds[i].1 {
                d = -d;
            }
            v[i] += d;
            clip(&mut v, bounds);
            vertices.push(v);
        }
        let mut values: Vec<f64> = std::iter::once(best.1)
            .chain(vertices[1..].par_iter().map(|v| eval(v)).collect::<Vec<_>>())
            .collect();
        evaluations += n;

        let mut local_iter = 0;
        while evaluations < options.max_evaluations {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
            vertices = order.iter().map(|i| vertices[*i].clone()).collect();
            values = order.iter().map(|i| values[*i]).collect();

            if values[0] < best.1 {
                best = (vertices[0].clone(), values[0]);
            }
            iterations += 1;
            local_iter += 1;
            if let Some(w) = log.as_deref_mut() {
                let rec = IterationRecord {
                    restart,
                    iteration: local_iter,
                    evaluations,
                    best_objective: best.1,
                    best_point: best.0.clone(),
                };
                serde_json::to_writer(&mut *w, &rec)?;
                writeln!(w)?;
            }

            let spread = values[n] - values[0];
            let diameter = vertices[1..]
                .iter()
                .map(|v| {
                    v.iter()
                        .zip(&vertices[0])
                        .zip(step)
                        .map(|((a, b), s)| ((a - b) / s).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if (spread.is_finite() && spread <= options.ftol) || diameter <= options.xtol {
                break;
            }

            let centroid: Vec<f64> = (0..n)
                .map(|k| vertices[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64)
                .collect();
            let along = |t: f64| {
                let mut p: Vec<f64> = centroid
                    .iter()
                    .zip(&vertices[n])
                    .map(|(c, w)| c + t * (c - w))
                    .collect();
                clip(&mut p, bounds);
                p
            };
            let xr = along(1.0);
            let fr = eval(&xr);
            evaluations += 1;
            if fr < values[0] {
                let xe = along(2.0);
                let fe = eval(&xe);
                evaluations += 1;
                if fe < fr {
                    vertices[n] = xe;
                    values[n] = fe;
                } else {
                    vertices[n] = xr;
                    values[n] = fr;
                }
            } else if fr < values[n - 1] {
                vertices[n] = xr;
                values[n] = fr;
            } else {
                let (xc, fc) = if fr < values[n] {
                    let p = along(0.5);
                    let v = eval(&p);
                    (p, v)
                } else {
                    let p = along(-0.5);
                    let v = eval(&p);
                    (p, v)
                };
                evaluations += 1;
                if fc < values[n].min(fr) {
                    vertices[n] = xc;
                    values[n] = fc;
                } else {
                    let shrunk: Vec<Vec<f64>> = vertices[1..]
                        .iter()
                        .map(|v| {
                            v.iter()
                                .zip(&vertices[0])
                                .map(|(a, b)| b + 0.5 * (a - b))
                                .collect()
                        })
                        .collect();
                    let vals: Vec<f64> = shrunk.par_iter().map(|v| eval(v)).collect();
                    evaluations += n;
                    for (k, (v, fv)) in shrunk.into_iter().zip(vals).enumerate() {
                        vertices[k + 1] = v;
                        values[k + 1] = fv;
                    }
                }
            }
        }
        for (v, fv) in vertices.iter().zip(&values) {
            if *fv < best.1 {
                best = (v.clone(), *fv);
            }
        }
        if evaluations >= options.max_evaluations {
            break;
        }
    }
    Ok(Minimum {
        point: best.0,
        objective: best.1,
        initial_objective: f0,
        evaluations,
        iterations,
    })
}

/// Swap ramp parameters the optimizer may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapParam {
    UdPeak,
    UcDeep,
    UoPeak,
    /// First breakpoint; the last one mirrors it.
    RiseEnd,
    /// Second breakpoint; the third one mirrors it.
    FlipStart,
}

impl SwapParam {
    fn get(self, p: &SwapRampParams) -> f64 {
        match self {
            SwapParam::UdPeak => p.u_d_peak,
            SwapParam::UcDeep => p.u_c_deep,
            SwapParam::UoPeak => p.u_o_peak,
            SwapParam::RiseEnd => p.breakpoints[0],
            SwapParam::FlipStart => p.breakpoints[1],
        }
    }

    fn set(self, p: &mut SwapRampParams, v: f64) {
        match self {
            SwapParam::UdPeak => p.u_d_peak = v,
            SwapParam::UcDeep => p.u_c_deep = v,
            SwapParam::UoPeak => p.u_o_peak = v,
            SwapParam::RiseEnd => {
                p.breakpoints[0] = v;
                p.breakpoints[3] = 1.0 - v;
            }
            SwapParam::FlipStart => {
                p.breakpoints[1] = v;
                p.breakpoints[2] = 1.0 - v;
            }
        }
    }

    fn bounds(self) -> (f64, f64) {
        match self {
            SwapParam::UdPeak => (0.0, 5.0),
            SwapParam::UcDeep => (-10.0, -6.0),
            SwapParam::UoPeak => (0.0, 8.0),
            SwapParam::RiseEnd => (0.01, 0.2),
            SwapParam::FlipStart => (0.25, 0.49),
        }
    }

    fn step(self) -> f64 {
        match self {
            SwapParam::UdPeak => 0.5,
            SwapParam::UcDeep => 1.0,
            SwapParam::UoPeak => 1.0,
            SwapParam::RiseEnd => 0.03,
            SwapParam::FlipStart => 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwapOptimization {
    pub params: SwapRampParams,
    pub objective: f64,
    pub initial_objective: f64,
    pub evaluations: usize,
}

/// Tunes the `free` entries of `initial` to minimize `objective`.
///
/// Candidates that violate the ramp invariants score +inf.
pub fn optimize_swap<F>(
    objective: F,
    initial: &SwapRampParams,
    free: &[SwapParam],
    options: &NelderMeadOptions,
    log: Option<&mut dyn Write>,
) -> Result<SwapOptimization>
where
    F: Fn(&SwapRampParams) -> f64 + Sync,
{
    if free.is_empty() {
        return Err(Error::Optimizer("no free parameters".into()));
    }
    initial.validate()?;
    let build = |x: &[f64]| {
        let mut p = initial.clone();
        for (k, v) in free.iter().zip(x) {
            k.set(&mut p, *v);
        }
        p
    };
    let x0: Vec<f64> = free.iter().map(|k| k.get(initial)).collect();
    let bounds: Vec<(f64, f64)> = free.iter().map(|k| k.bounds()).collect();
    let step: Vec<f64> = free.iter().map(|k| k.step()).collect();
    let f = |x: &[f64]| {
        let p = build(x);
        if p.validate().is_err() {
            return f64::INFINITY;
        }
        objective(&p)
    };
    let m = nelder_mead(f, &x0, &bounds, &step, options, log)?;
    Ok(SwapOptimization {
        params: build(&m.point),
        objective: m.objective,
        initial_objective: m.initial_objective,
        evaluations: m.evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_minimum() {
        let m = nelder_mead(
            |x| (x[0] - 3.0).powi(2),
            &[0.0],
            &[(-10.0, 10.0)],
            &[1.0],
            &NelderMeadOptions::default(),
            None,
        )
        .unwrap();
        assert!((m.point[0] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn rosenbrock_in_two_dimensions() {
        let opts = NelderMeadOptions {
            max_evaluations: 2000,
            ..Default::default()
        };
        let m = nelder_mead(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &[(-5.0, 5.0), (-5.0, 5.0)],
            &[0.5, 0.5],
            &opts,
            None,
        )
        .unwrap();
        assert!((m.point[0] - 1.0).abs() < 1e-3 && (m.point[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn respects_bounds() {
        let m = nelder_mead(
            |x| (x[0] - 3.0).powi(2),
            &[0.0],
            &[(-1.0, 1.0)],
            &[0.5],
            &NelderMeadOptions::default(),
            None,
        )
        .unwrap();
        assert!((m.point[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_objective_returns_initial() {
        let p = SwapRampParams::default();
        let r = optimize_swap(|_| 0.0, &p, &[SwapParam::UdPeak], &NelderMeadOptions::default(), None).unwrap();
        assert_eq!(r.params, p);
        assert_eq!(r.evaluations, 1);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let p = SwapRampParams::default();
        let r = optimize_swap(|_| f64::NAN, &p, &[SwapParam::UdPeak], &NelderMeadOptions::default(), None);
        assert!(r.is_err());
        assert!(optimize_swap(|_| 1.0, &p, &[], &NelderMeadOptions::default(), None).is_err());
    }

    #[test]
    fn swap_parameter_search_is_deterministic_and_logged() {
        let p = SwapRampParams {
            u_d_peak: 0.5,
            ..Default::default()
        };
        let obj = |q: &SwapRampParams| (q.u_d_peak - 1.7).powi(2) + 0.1 * (q.breakpoints[1] - 0.4).powi(2);
        let free = [SwapParam::UdPeak, SwapParam::FlipStart];
        let opts = NelderMeadOptions {
            seed: 9,
            ..Default::default()
        };
        let mut log = Vec::new();
        let a = optimize_swap(obj, &p, &free, &opts, Some(&mut log)).unwrap();
        let b = optimize_swap(obj, &p, &free, &opts, None).unwrap();
        assert_eq!(a.params, b.params);
        assert!((a.params.u_d_peak - 1.7).abs() < 1e-3);
        assert!((a.params.breakpoints[2] + a.params.breakpoints[1] - 1.0).abs() < 1e-12);
        let lines = String::from_utf8(log).unwrap();
        let first: IterationRecord = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first.restart, 0);
    }
}
