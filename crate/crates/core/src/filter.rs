//! Second-order low-pass model of the DAC output filters.
//!
//! Each channel obeys `y'' + (ω/Q) y' + ω² y = ω² u(t)` with `u` the
//! zero-order-hold AWG output. Because `u` is piecewise constant the response
//! is propagated exactly from sample boundary to sample boundary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trap::{Channel, VoltageAssignment};
use crate::units::angular;
use crate::waveform::VoltageSchedule;

/// Settling threshold for [`FilteredSchedule::settling_tail`], in V.
pub const SETTLE_TOLERANCE_V: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterModel {
    /// Cutoff frequency in MHz.
    pub cutoff_mhz: f64,
    pub q: f64,
}

impl Default for FilterModel {
    fn default() -> Self {
        Self {
            cutoff_mhz: 0.05,
            q: std::f64::consts::FRAC_1_SQRT_2,
        }
    }
}

/// Filter state: output and its time derivative.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterState {
    pub y: f64,
    pub dy: f64,
}

impl FilterModel {
    pub fn new(cutoff_mhz: f64, q: f64) -> Result<Self> {
        let f = Self { cutoff_mhz, q };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_mhz > 0.0 && self.cutoff_mhz.is_finite()) {
            return Err(Error::Config("filter cutoff must be positive".into()));
        }
        if !(self.q > 0.0 && self.q.is_finite()) {
            return Err(Error::Config("filter Q must be positive".into()));
        }
        if self.step_overshoot() >= 0.05 {
            return Err(Error::Config(format!(
                "filter Q = {} overshoots by {:.1}%",
                self.q,
                100.0 * self.step_overshoot()
            )));
        }
        Ok(())
    }

    pub fn omega(&self) -> f64 {
        angular(self.cutoff_mhz)
    }

    pub fn damping(&self) -> f64 {
        0.5 / self.q
    }

    /// Fractional peak overshoot of the unit step response.
    pub fn step_overshoot(&self) -> f64 {
        let z = self.damping();
        if z >= 1.0 {
            0.0
        } else {
            (-std::f64::consts::PI * z / (1.0 - z * z).sqrt()).exp()
        }
    }

    /// Advances `state` by `h` under constant input `u`.
    pub fn propagate(&self, state: FilterState, u: f64, h: f64) -> FilterState {
        let (e, v) = self.free_response(state.y - u, state.dy, h);
        FilterState { y: u + e, dy: v }
    }

    /// Homogeneous response from deviation `e0` and slope `v0` after time `t`.
    fn free_response(&self, e0: f64, v0: f64, t: f64) -> (f64, f64) {
        let w = self.omega();
        let z = self.damping();
        if (z - 1.0).abs() < 1e-9 {
            let k = (-w * t).exp();
            let a = v0 + w * e0;
            (k * (e0 + a * t), k * (v0 - w * a * t))
        } else if z < 1.0 {
            let s = z * w;
            let wd = w * (1.0 - z * z).sqrt();
            let k = (-s * t).exp();
            let (sn, cs) = (wd * t).sin_cos();
            (
                k * (e0 * cs + (v0 + s * e0) / wd * sn),
                k * (v0 * cs - (w * w * e0 + s * v0) / wd * sn),
            )
        } else {
            let root = w * (z * z - 1.0).sqrt();
            let r1 = -z * w + root;
            let r2 = -z * w - root;
            let a = (v0 - r2 * e0) / (r1 - r2);
            let b = e0 - a;
            let (k1, k2) = ((r1 * t).exp(), (r2 * t).exp());
            (a * k1 + b * k2, a * r1 * k1 + b * r2 * k2)
        }
    }

    /// Upper bound on `|y(t) − u|` for all `t ≥ 0` times `exp(decay · t)`,
    /// together with that decay rate.
    fn envelope(&self, e0: f64, v0: f64) -> (f64, f64) {
        let w = self.omega();
        let z = self.damping();
        if (z - 1.0).abs() < 1e-9 {
            // |e0 + a t| e^{-wt} <= (|e0| + |a|/(w/2) / e) e^{-wt/2}
            let a = v0 + w * e0;
            (e0.abs() + 2.0 * a.abs() / (w * std::f64::consts::E), 0.5 * w)
        } else if z < 1.0 {
            let s = z * w;
            let wd = w * (1.0 - z * z).sqrt();
            (e0.abs() + ((v0 + s * e0) / wd).abs(), s)
        } else {
            let root = w * (z * z - 1.0).sqrt();
            let r1 = -z * w + root;
            let r2 = -z * w - root;
            let a = (v0 - r2 * e0) / (r1 - r2);
            let b = e0 - a;
            (a.abs() + b.abs(), -r1)
        }
    }

    /// Time after which a channel left in `state` with input `u` stays within
    /// `tol` of `u`.
    pub fn settle_time(&self, state: FilterState, u: f64, tol: f64) -> f64 {
        let (m, decay) = self.envelope(state.y - u, state.dy);
        if m <= tol {
            0.0
        } else {
            (m / tol).ln() / decay
        }
    }

    /// Pre-distorts a smooth schedule so that its filtered output follows the
    /// original samples.
    ///
    /// Each programmed sample is `v + (2ζ/ω) v' + v''/ω²` evaluated half a
    /// sample late, which inverts the filter and the zero-order hold for
    /// waveforms that vary slowly on the sample scale. The first and last
    /// samples are kept so the schedule starts and ends at the same voltages.
    pub fn precompensate(&self, schedule: &VoltageSchedule) -> Result<VoltageSchedule> {
        let h = 1.0 / schedule.sample_rate();
        let (w, z) = (self.omega(), self.damping());
        let mut channels = BTreeMap::new();
        for channel in schedule.channels() {
            let v = schedule.samples(channel).expect("listed channel");
            let n = v.len();
            let at = |i: isize| v[i.clamp(0, n as isize - 1) as usize];
            let mut p = Vec::with_capacity(n);
            for i in 0..n {
                if i == 0 || i + 1 == n {
                    p.push(v[i]);
                    continue;
                }
                let k = i as isize;
                let mid = 0.5 * (at(k) + at(k + 1));
                let d1 = (at(k + 1) - at(k)) / h;
                let d2 = 0.5 * (at(k + 2) - at(k + 1) - at(k) + at(k - 1)) / (h * h);
                p.push(mid + 2.0 * z / w * d1 + d2 / (w * w));
            }
            channels.insert(channel, p);
        }
        VoltageSchedule::new(schedule.sample_rate(), schedule.duration(), channels, schedule.metadata().clone())
    }

    /// Filters `schedule`, starting every channel in steady state at its first sample.
    pub fn apply(&self, schedule: &VoltageSchedule) -> FilteredSchedule {
        let mut channels = BTreeMap::new();
        let h = 1.0 / schedule.sample_rate();
        for c in schedule.channels() {
            let samples = schedule.samples(c).expect("listed channel").to_vec();
            let mut states = Vec::with_capacity(samples.len() + 1);
            let mut st = FilterState {
                y: samples.first().copied().unwrap_or(0.0),
                dy: 0.0,
            };
            states.push(st);
            for &u in &samples {
                st = self.propagate(st, u, h);
                states.push(st);
            }
            channels.insert(c, FilteredChannel { samples, states });
        }
        FilteredSchedule {
            filter: *self,
            sample_rate: schedule.sample_rate(),
            channels,
        }
    }
}

#[derive(Debug, Clone)]
struct FilteredChannel {
    samples: Vec<f64>,
    /// Filter state at every sample boundary, `samples.len() + 1` entries.
    states: Vec<FilterState>,
}

impl FilteredChannel {
    fn at(&self, filter: &FilterModel, rate: f64, t: f64) -> f64 {
        let n = self.samples.len();
        if n == 0 {
            return 0.0;
        }
        if t <= 0.0 {
            return self.states[0].y;
        }
        let k = (t * rate).floor() as usize;
        if k >= n {
            let last = self.samples[n - 1];
            return filter.propagate(self.states[n], last, t - n as f64 / rate).y;
        }
        filter.propagate(self.states[k], self.samples[k], t - k as f64 / rate).y
    }
}

/// Continuous-time filtered voltages of a schedule.
#[derive(Debug, Clone)]
pub struct FilteredSchedule {
    filter: FilterModel,
    sample_rate: f64,
    channels: BTreeMap<Channel, FilteredChannel>,
}

impl FilteredSchedule {
    pub fn filter(&self) -> &FilterModel {
        &self.filter
    }

    pub fn programmed_duration(&self) -> f64 {
        self.channels
            .values()
            .map(|c| c.samples.len())
            .max()
            .unwrap_or(0) as f64
            / self.sample_rate
    }

    pub fn channels(&self) -> impl Iterator<Item = Channel> + '_ {
        self.channels.keys().copied()
    }

    /// Filtered voltage of `channel` at time `t` (µs); 0 V for unknown channels.
    pub fn value(&self, channel: Channel, t: f64) -> f64 {
        self.channels
            .get(&channel)
            .map(|c| c.at(&self.filter, self.sample_rate, t))
            .unwrap_or(0.0)
    }

    /// Filtered voltages of every channel at time `t`.
    pub fn assignment_at(&self, t: f64) -> VoltageAssignment {
        self.channels
            .iter()
            .map(|(c, ch)| (*c, ch.at(&self.filter, self.sample_rate, t)))
            .collect()
    }

    /// Writes the filtered voltages of every channel at time `t` in channel order.
    pub fn values_into(&self, t: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.channels
                .values()
                .map(|ch| ch.at(&self.filter, self.sample_rate, t)),
        );
    }

    /// Extra time after the programmed end until every channel stays within
    /// [`SETTLE_TOLERANCE_V`] of its final sample.
    pub fn settling_tail(&self) -> f64 {
        self.channels
            .values()
            .filter(|c| !c.samples.is_empty())
            .map(|c| {
                let n = c.samples.len();
                self.filter
                    .settle_time(c.states[n], c.samples[n - 1], SETTLE_TOLERANCE_V)
            })
            .fold(0.0, f64::max)
    }

    /// Programmed duration plus settling tail.
    pub fn settled_end(&self) -> f64 {
        self.programmed_duration() + self.settling_tail()
    }

    /// Interval during which the filtered output is in motion.
    ///
    /// Each channel's excursion is measured relative to its largest deviation
    /// from the start value. The window opens when the first channel has
    /// departed from its start by `fraction` of that excursion and closes
    /// when the last channel has come back within `fraction` of its end
    /// value. Channels that start and end at different values are measured
    /// against their net step. Returns `None` when nothing moves.
    pub fn activity_window(&self, fraction: f64, resolution: f64) -> Option<(f64, f64)> {
        let end = self.settled_end();
        let steps = (end / resolution).ceil() as usize + 1;
        let mut open: Option<f64> = None;
        let mut close: Option<f64> = None;
        for ch in self.channels.values() {
            let n = ch.samples.len();
            if n == 0 {
                continue;
            }
            let start = ch.states[0].y;
            let fin = ch.samples[n - 1];
            let trace: Vec<(f64, f64)> = (0..steps)
                .map(|i| {
                    let t = i as f64 * resolution;
                    (t, ch.at(&self.filter, self.sample_rate, t))
                })
                .collect();
            let scale = trace
                .iter()
                .map(|(_, y)| (y - start).abs().max((y - fin).abs()))
                .fold(0.0, f64::max);
            if scale <= 0.0 {
                continue;
            }
            let thr = fraction * scale;
            if let Some((t, _)) = trace.iter().find(|(_, y)| (y - start).abs() > thr) {
                open = Some(open.map_or(*t, |o: f64| o.min(*t)));
            }
            if let Some((t, _)) = trace.iter().rev().find(|(_, y)| (y - fin).abs() > thr) {
                close = Some(close.map_or(*t, |c: f64| c.max(*t)));
            }
        }
        Some((open?, close?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::{swap_schedule, ScheduleMetadata, SwapRampParams};

    fn step_schedule(n: usize, rate: f64, before: usize) -> VoltageSchedule {
        let s: Vec<f64> = (0..n).map(|i| if i < before { 0.0 } else { 1.0 }).collect();
        VoltageSchedule::new(
            rate,
            n as f64 / rate,
            BTreeMap::from([(Channel::Segment(20), s)]),
            ScheduleMetadata::Hold,
        )
        .unwrap()
    }

    #[test]
    fn butterworth_step_matches_closed_form() {
        let f = FilterModel::default();
        let sched = step_schedule(200, 2.5, 1);
        let out = f.apply(&sched);
        let w = f.omega();
        let z = f.damping();
        let wd = w * (1.0 - z * z).sqrt();
        for i in 0..400 {
            let t = i as f64 * 0.173;
            let tau = t - 0.4;
            let exact = if tau <= 0.0 {
                0.0
            } else {
                1.0 - (-z * w * tau).exp() * ((wd * tau).cos() + z / (1.0 - z * z).sqrt() * (wd * tau).sin())
            };
            assert!((out.value(Channel::Segment(20), t) - exact).abs() < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn critical_and_overdamped_match_numerical_integration() {
        for q in [0.5, 0.3] {
            let f = FilterModel::new(0.05, q).unwrap();
            let mut st = FilterState { y: 0.3, dy: -0.02 };
            let exact = f.propagate(st, 1.0, 5.0);
            // RK4 reference
            let w = f.omega();
            let rhs = |s: FilterState| (s.dy, w * w * (1.0 - s.y) - w / q * s.dy);
            let h = 1e-3;
            for _ in 0..5000 {
                let k1 = rhs(st);
                let s2 = FilterState { y: st.y + 0.5 * h * k1.0, dy: st.dy + 0.5 * h * k1.1 };
                let k2 = rhs(s2);
                let s3 = FilterState { y: st.y + 0.5 * h * k2.0, dy: st.dy + 0.5 * h * k2.1 };
                let k3 = rhs(s3);
                let s4 = FilterState { y: st.y + h * k3.0, dy: st.dy + h * k3.1 };
                let k4 = rhs(s4);
                st.y += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
                st.dy += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            }
            assert!((st.y - exact.y).abs() < 1e-10);
            assert!((st.dy - exact.dy).abs() < 1e-10);
        }
    }

    #[test]
    fn overshoot_below_five_percent() {
        let f = FilterModel::default();
        let out = f.apply(&step_schedule(300, 2.5, 1));
        let peak = (0..3000)
            .map(|i| out.value(Channel::Segment(20), i as f64 * 0.05))
            .fold(f64::MIN, f64::max);
        assert!(peak - 1.0 < 0.05);
        assert!(peak > 1.0);
        assert!(FilterModel::new(0.05, 2.0).is_err());
    }

    #[test]
    fn activity_window_of_a_sharp_pulse_is_close_to_its_length() {
        let n = 100;
        let s: Vec<f64> = (0..n).map(|i| if (10..60).contains(&i) { 1.0 } else { 0.0 }).collect();
        let sched = VoltageSchedule::new(
            2.5,
            n as f64 / 2.5,
            BTreeMap::from([(Channel::Segment(3), s)]),
            ScheduleMetadata::Hold,
        )
        .unwrap();
        let fast = FilterModel::new(5.0, std::f64::consts::FRAC_1_SQRT_2).unwrap();
        let (a, b) = fast.apply(&sched).activity_window(0.1, 0.01).unwrap();
        assert!((b - a - 20.0).abs() < 0.2, "{a} {b}");
    }

    #[test]
    fn settled_after_tail() {
        let f = FilterModel::default();
        let sched = swap_schedule(&SwapRampParams::default(), 20).unwrap();
        let out = f.apply(&sched);
        let end = out.settled_end();
        assert!(out.settling_tail() > 0.0);
        let fin = sched.end_config();
        for k in 0..200 {
            let t = end + k as f64 * 0.5;
            for c in sched.channels() {
                assert!((out.value(c, t) - fin.get(c)).abs() < SETTLE_TOLERANCE_V);
            }
        }
    }
}
