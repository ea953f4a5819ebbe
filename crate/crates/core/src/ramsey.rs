//! Spin-echo mapping of the magnetic field along the trap axis.
//!
//! A superposition prepared at the LIZ is shuttled to a probe segment, held
//! there for `t`, brought back, refocused with a π pulse and held for `t`
//! again at the LIZ before state tomography. The echo removes slow common
//! field drifts; the remaining phase grows linearly in `t` with the local
//! field offset. Phases of all hold times are fitted by weighted least
//! squares.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::weighted_line_fit;
use crate::qubit::{Pauli, RotationAxis};
use crate::rng::child_rng;
use crate::sequence::{run, Primitive, RunMode, Sequence, SingleQubitOp, Well, World};
use crate::tomography::measured_pauli;
use crate::units::ZEEMAN_RAD_PER_US_PER_T;

/// Phase estimate of one probe position and hold time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub hold: f64,
    /// Unwrapped phase (rad).
    pub phase: f64,
    pub stderr: f64,
}

/// Fitted field offset at one probe segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldPoint {
    pub segment: usize,
    pub x: f64,
    /// Field deviation from the LIZ value (T).
    pub delta_b: f64,
    pub delta_b_stderr: f64,
    /// Constant phase picked up while shuttling (rad).
    pub phase_offset: f64,
    pub chi2: f64,
    pub points: Vec<PhasePoint>,
}

/// Echo sequence for one probe segment, hold time and analysis pulse.
pub fn echo_sequence(world: &World, segment: usize, hold: f64, analysis: SingleQubitOp) -> Result<Sequence> {
    let z = world.geometry.liz_index;
    if !world.geometry.has_segment(segment) {
        return Err(Error::Config(format!("probe segment {segment} does not exist")));
    }
    if !(hold > 0.0) {
        return Err(Error::Config(format!("hold time {hold} must be positive")));
    }
    let ion = || vec!["A".to_string()];
    let (axis, angle) = analysis.rotation();
    let rotate = |axis: RotationAxis, angle: f64| Primitive::Rotate {
        ion: "A".into(),
        axis,
        angle,
        correct_phase: false,
    };
    Ok(Sequence {
        name: format!("echo at {segment} for {hold} us"),
        wells: vec![Well { segment: z, ions: ion() }],
        setup: Vec::new(),
        body: vec![
            Primitive::InitPump { ions: ion() },
            rotate(RotationAxis::X, std::f64::consts::FRAC_PI_2),
            Primitive::Transport { from: z, to: segment },
            Primitive::Hold { duration: hold },
            Primitive::Transport { from: segment, to: z },
            rotate(RotationAxis::X, std::f64::consts::PI),
            Primitive::Hold { duration: hold },
            rotate(axis, angle),
            Primitive::Shelve { ions: ion() },
            Primitive::Readout { ions: ion() },
        ],
    })
}

/// Bloch-vector phase `atan2(⟨Y⟩, ⟨X⟩)` and its shot-noise error from the
/// dark fractions after the two equatorial analysis pulses.
fn phase_estimate(dark: [(SingleQubitOp, f64); 2], shots: usize) -> (f64, f64) {
    let n = shots as f64;
    let (mut x, mut y) = (0.0, 0.0);
    for (op, p_dark) in dark {
        let (pauli, sign) = measured_pauli(op);
        let v = sign * (1.0 - 2.0 * p_dark);
        match pauli {
            Pauli::X => x = v,
            Pauli::Y => y = v,
            _ => unreachable!("equatorial analysis"),
        }
    }
    // Binomial variances, kept away from zero at the boundary.
    let var = |v: f64| (1.0 - v * v + 1.0 / n) / n;
    let r2 = (x * x + y * y).max(1.0 / n);
    let sigma = ((y * y * var(x) + x * x * var(y)) / (r2 * r2)).sqrt();
    (y.atan2(x), sigma)
}

/// Maps the field at every probe segment from `shots` readouts per hold
/// time and analysis setting.
///
/// Hold times must be sorted and close enough that the phase changes by
/// less than π between neighbors, since phases are unwrapped in order.
/// Readouts of probe `i`, hold `j` and analysis `k` use the child stream
/// `("ramsey", (i · holds + j) · 2 + k)` of `seed`.
pub fn ramsey_field_scan(
    world: &World,
    segments: &[usize],
    holds: &[f64],
    shots: usize,
    seed: u64,
) -> Result<Vec<FieldPoint>> {
    if holds.len() < 3 {
        return Err(Error::Fit(format!("{} hold times, a slope fit needs at least 3", holds.len())));
    }
    if holds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("hold times must increase".into()));
    }
    if shots == 0 {
        return Err(Error::Config("shots must be positive".into()));
    }
    let analyses = [SingleQubitOp::RyHalf, SingleQubitOp::RxHalf];
    let readout = world.noise.readout;
    let jobs: Vec<(usize, usize)> = (0..segments.len()).flat_map(|i| (0..holds.len()).map(move |j| (i, j))).collect();
    let estimates: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|(i, j)| {
            let mut dark = [(analyses[0], 0.0), (analyses[1], 0.0)];
            for (k, op) in analyses.iter().enumerate() {
                let seq = echo_sequence(world, segments[*i], holds[*j], *op)?;
                let (_, outcome) = run(&seq, world, RunMode::Logical)?.into_result()?;
                let stream = ((*i * holds.len() + *j) * 2 + k) as u64;
                let mut rng = child_rng(seed, "ramsey", stream);
                let c = outcome.counts(shots, &readout, &mut rng);
                dark[k].1 = c[1] as f64 / shots as f64;
            }
            Ok(phase_estimate(dark, shots))
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(segments.len());
    for (i, seg) in segments.iter().enumerate() {
        let est = &estimates[i * holds.len()..(i + 1) * holds.len()];
        let mut phases: Vec<f64> = est.iter().map(|e| e.0).collect();
        for k in 1..phases.len() {
            let d = phases[k] - phases[k - 1];
            phases[k] -= (d / std::f64::consts::TAU).round() * std::f64::consts::TAU;
        }
        let sigma: Vec<f64> = est.iter().map(|e| e.1).collect();
        let fit = weighted_line_fit(holds, &phases, &sigma)
            .ok_or_else(|| Error::Fit(format!("phase fit at segment {seg} failed")))?;
        // The refocusing pulse inverts the phase gathered at the probe.
        let to_tesla = -1.0 / ZEEMAN_RAD_PER_US_PER_T;
        out.push(FieldPoint {
            segment: *seg,
            x: world.geometry.center(*seg).expect("checked"),
            delta_b: fit.slope * to_tesla,
            delta_b_stderr: fit.slope_stderr * to_tesla.abs(),
            phase_offset: fit.intercept,
            chi2: fit.chi2,
            points: holds
                .iter()
                .zip(&phases)
                .zip(&sigma)
                .map(|((h, p), s)| PhasePoint {
                    hold: *h,
                    phase: *p,
                    stderr: *s,
                })
                .collect(),
        });
    }
    Ok(out)
}
