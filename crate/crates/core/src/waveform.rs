//! Sampled voltage schedules for swap, transport, separation and merge.
//!
//! Every schedule is a set of equally long per-channel sample arrays played
//! out by a zero-order hold at `sample_rate` samples per µs. Sample `i` of an
//! `n`-sample ramp sits at the dimensionless time `τ = i / (n − 1)`, so the
//! first and last samples are the hold configurations the schedule connects.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::brent;
use crate::trap::{Channel, ElectrodeField, Potential, TrapGeometry, VoltageAssignment, SEGMENT_SPACING_UM};
use crate::units::COULOMB_EV_UM;

/// Default AWG update rate in samples per µs.
pub const DEFAULT_SAMPLE_RATE: f64 = 2.5;
/// Default trapping voltage of a single well.
pub const DEFAULT_TRAP_VOLTAGE: f64 = -6.0;

/// Number of samples covering `duration` at `sample_rate`.
pub fn sample_count(duration: f64, sample_rate: f64) -> usize {
    let raw = duration * sample_rate;
    // Guard against 22 * 2.5 = 55.000000000000004 style rounding.
    (raw - 1e-9 * raw.abs().max(1.0)).ceil().max(0.0) as usize
}

/// Ramp parameters of the on-site swap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwapRampParams {
    pub u_d_peak: f64,
    pub u_c_start: f64,
    pub u_c_deep: f64,
    pub u_o_peak: f64,
    /// Dimensionless breakpoints `τ₁ < τ₂ < τ₃ < τ₄` in (0, 1).
    pub breakpoints: [f64; 4],
    /// Programmed duration `T` in µs.
    pub duration: f64,
    pub sample_rate: f64,
}

impl Default for SwapRampParams {
    fn default() -> Self {
        Self {
            u_d_peak: 1.4,
            u_c_start: -6.0,
            u_c_deep: -9.5,
            u_o_peak: 4.0,
            breakpoints: [0.05, 0.45, 0.55, 0.95],
            duration: 22.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl SwapRampParams {
    pub fn validate(&self) -> Result<()> {
        let b = self.breakpoints;
        let increasing = b.windows(2).all(|w| w[0] < w[1]);
        if !(increasing && b[0] > 0.0 && b[3] < 1.0) {
            return Err(Error::Schedule(format!(
                "breakpoints must increase strictly inside (0, 1): {b:?}"
            )));
        }
        // Time symmetry about τ = 0.5 requires mirrored breakpoints.
        if (b[0] + b[3] - 1.0).abs() > 1e-12 || (b[1] + b[2] - 1.0).abs() > 1e-12 {
            return Err(Error::Schedule(format!(
                "breakpoints must be symmetric about 0.5: {b:?}"
            )));
        }
        if !(self.duration > 0.0 && self.sample_rate > 0.0) {
            return Err(Error::Schedule("duration and sample rate must be positive".into()));
        }
        if sample_count(self.duration, self.sample_rate) < 3 {
            return Err(Error::Schedule("swap needs at least three samples".into()));
        }
        Ok(())
    }
}

/// Parameters of a linear transport between neighboring segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportParams {
    /// Duration of one segment-to-segment move in µs.
    pub per_pair_duration: f64,
    pub trap_voltage: f64,
    pub sample_rate: f64,
}

impl Default for TransportParams {
    fn default() -> Self {
        Self {
            per_pair_duration: 28.0,
            trap_voltage: DEFAULT_TRAP_VOLTAGE,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

/// Parameters of the single-well to double-well morph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparationParams {
    pub duration: f64,
    pub trap_voltage: f64,
    /// Voltage on the outer segments at the quartic keyframe.
    pub quartic_outer: f64,
    /// Dimensionless time of the quartic keyframe.
    pub quartic_time: f64,
    pub sample_rate: f64,
}

impl Default for SeparationParams {
    fn default() -> Self {
        Self {
            duration: 100.0,
            trap_voltage: DEFAULT_TRAP_VOLTAGE,
            quartic_outer: -4.0,
            quartic_time: 0.6,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

/// What a schedule implements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleMetadata {
    Swap { site: usize, params: SwapRampParams },
    Transport { from: usize, to: usize, per_pair_duration: f64 },
    Separation { site: usize, bias: f64 },
    Merge { site: usize, bias: f64 },
    Hold,
    Composite { parts: usize },
    Imported,
}

/// Per-channel sampled voltages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageSchedule {
    sample_rate: f64,
    duration: f64,
    channels: BTreeMap<Channel, Vec<f64>>,
    metadata: ScheduleMetadata,
}

impl VoltageSchedule {
    /// Checked constructor: every channel must carry `ceil(T · rate)` samples.
    pub fn new(
        sample_rate: f64,
        duration: f64,
        channels: BTreeMap<Channel, Vec<f64>>,
        metadata: ScheduleMetadata,
    ) -> Result<Self> {
        if !(sample_rate > 0.0 && duration >= 0.0) {
            return Err(Error::Schedule(format!(
                "bad timing: rate {sample_rate}, duration {duration}"
            )));
        }
        let n = sample_count(duration, sample_rate);
        for (c, samples) in &channels {
            if samples.len() != n {
                return Err(Error::Schedule(format!(
                    "channel {c} has {} samples, expected {n}",
                    samples.len()
                )));
            }
            if samples.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schedule(format!("channel {c} has non-finite samples")));
            }
        }
        Ok(Self {
            sample_rate,
            duration,
            channels,
            metadata,
        })
    }

    /// A schedule that keeps `volts` for `duration` µs.
    pub fn hold(volts: &VoltageAssignment, duration: f64, sample_rate: f64) -> Result<Self> {
        let n = sample_count(duration, sample_rate);
        let channels = volts.iter().map(|(c, v)| (c, vec![v; n])).collect();
        Self::new(sample_rate, duration, channels, ScheduleMetadata::Hold)
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn len(&self) -> usize {
        sample_count(self.duration, self.sample_rate)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn metadata(&self) -> &ScheduleMetadata {
        &self.metadata
    }

    pub fn channels(&self) -> impl Iterator<Item = Channel> + '_ {
        self.channels.keys().copied()
    }

    pub fn samples(&self, channel: Channel) -> Option<&[f64]> {
        self.channels.get(&channel).map(Vec::as_slice)
    }

    pub fn sample_time(&self, index: usize) -> f64 {
        index as f64 / self.sample_rate
    }

    /// Voltages of the first sample.
    pub fn start_config(&self) -> VoltageAssignment {
        self.channels
            .iter()
            .filter_map(|(c, s)| s.first().map(|v| (*c, *v)))
            .collect()
    }

    /// Voltages of the last sample.
    pub fn end_config(&self) -> VoltageAssignment {
        self.channels
            .iter()
            .filter_map(|(c, s)| s.last().map(|v| (*c, *v)))
            .collect()
    }

    /// The zero-order-hold value of `channel` at time `t`.
    pub fn value_at(&self, channel: Channel, t: f64) -> Option<f64> {
        let s = self.channels.get(&channel)?;
        if s.is_empty() {
            return None;
        }
        let i = ((t * self.sample_rate).floor().max(0.0) as usize).min(s.len() - 1);
        Some(s[i])
    }

    /// Sample order reversed in time.
    pub fn time_reversed(&self, metadata: ScheduleMetadata) -> Self {
        let channels = self
            .channels
            .iter()
            .map(|(c, s)| (*c, s.iter().rev().copied().collect()))
            .collect();
        Self {
            sample_rate: self.sample_rate,
            duration: self.duration,
            channels,
            metadata,
        }
    }

    /// `a · self + b · other` on the union of channels (missing channels count as 0 V).
    pub fn linear_combination(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.len() != other.len() || self.sample_rate != other.sample_rate {
            return Err(Error::Schedule("schedules differ in timing".into()));
        }
        let n = self.len();
        let zeros = vec![0.0; n];
        let mut channels = BTreeMap::new();
        for c in self.channels().chain(other.channels()) {
            let x = self.channels.get(&c).unwrap_or(&zeros);
            let y = other.channels.get(&c).unwrap_or(&zeros);
            channels.insert(c, x.iter().zip(y).map(|(p, q)| a * p + b * q).collect());
        }
        Self::new(self.sample_rate, self.duration, channels, ScheduleMetadata::Composite { parts: 2 })
    }

    /// Concatenates schedules in time.
    ///
    /// Channels missing from a part keep their most recent value, starting
    /// from `background` (or 0 V).
    pub fn concat(parts: &[VoltageSchedule], background: &VoltageAssignment) -> Result<Self> {
        let sample_rate = parts
            .first()
            .map(|p| p.sample_rate)
            .unwrap_or(DEFAULT_SAMPLE_RATE);
        if parts.iter().any(|p| p.sample_rate != sample_rate) {
            return Err(Error::Schedule("cannot concatenate different sample rates".into()));
        }
        let mut all: Vec<Channel> = background.channels().collect();
        for p in parts {
            all.extend(p.channels());
        }
        all.sort();
        all.dedup();
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut current: BTreeMap<Channel, f64> = all.iter().map(|c| (*c, background.get(*c))).collect();
        let mut channels: BTreeMap<Channel, Vec<f64>> =
            all.iter().map(|c| (*c, Vec::with_capacity(total))).collect();
        for p in parts {
            let n = p.len();
            for c in &all {
                let out = channels.get_mut(c).expect("channel registered");
                match p.channels.get(c) {
                    Some(s) => {
                        out.extend_from_slice(s);
                        if let Some(v) = s.last() {
                            current.insert(*c, *v);
                        }
                    }
                    None => out.extend(std::iter::repeat_n(current[c], n)),
                }
            }
        }
        let duration = total as f64 / sample_rate;
        Self::new(sample_rate, duration, channels, ScheduleMetadata::Composite { parts: parts.len() })
    }

    /// Writes `t,<channel>...` CSV with one row per sample.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t_us".to_string()];
        header.extend(self.channels().map(|c| c.to_string()));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![format!("{}", self.sample_time(i))];
            row.extend(self.channels.values().map(|s| format!("{}", s[i])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a schedule from the CSV format of [`write_csv`](Self::write_csv).
    ///
    /// The duration is `rows / rate`, with the rate taken from the time column.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let chans: Vec<Channel> = header
            .iter()
            .skip(1)
            .map(str::parse)
            .collect::<Result<_>>()?;
        let mut times = Vec::new();
        let mut data: Vec<Vec<f64>> = vec![Vec::new(); chans.len()];
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Schedule(format!("bad number {s:?}")))
            };
            times.push(parse(&rec[0])?);
            for (k, col) in data.iter_mut().enumerate() {
                col.push(parse(&rec[k + 1])?);
            }
        }
        let sample_rate = if times.len() >= 2 {
            1.0 / (times[1] - times[0])
        } else {
            DEFAULT_SAMPLE_RATE
        };
        let duration = times.len() as f64 / sample_rate;
        let channels = chans.into_iter().zip(data).collect();
        Self::new(sample_rate, duration, channels, ScheduleMetadata::Imported)
    }
}

/// Piecewise-linear interpolation through `(τ, value)` knots.
fn piecewise(knots: &[(f64, f64)], tau: f64) -> f64 {
    if tau <= knots[0].0 {
        return knots[0].1;
    }
    for w in knots.windows(2) {
        let ((t0, v0), (t1, v1)) = (w[0], w[1]);
        if tau <= t1 {
            if t1 == t0 {
                return v1;
            }
            return v0 + (v1 - v0) * (tau - t0) / (t1 - t0);
        }
    }
    knots[knots.len() - 1].1
}

/// Generates the swap ramp at `site`.
///
/// `U_d` rises to its peak within the first breakpoint, `U_c` deepens while
/// `U_o` rises on both neighbors, `U_d` changes polarity around `τ = 0.5`, and
/// the second half mirrors the first with inverted diagonal polarity.
pub fn swap_schedule(params: &SwapRampParams, site: usize) -> Result<VoltageSchedule> {
    params.validate()?;
    let site_l = site
        .checked_sub(1)
        .ok_or_else(|| Error::Schedule("swap site needs a left neighbor".into()))?;
    let [b1, b2, b3, _] = params.breakpoints;
    let n = sample_count(params.duration, params.sample_rate);
    let ud = [(0.0, 0.0), (b1, params.u_d_peak), (b2, params.u_d_peak), (0.5, 0.0), (b3, -params.u_d_peak)];
    let uc = [(0.0, params.u_c_start), (b1, params.u_c_start), (b2, params.u_c_deep), (0.5, params.u_c_deep)];
    let uo = [(0.0, 0.0), (b1, 0.0), (b2, params.u_o_peak), (0.5, params.u_o_peak)];

    let mut d = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut o = vec![0.0; n];
    for i in 0..n {
        let mirror = n - 1 - i;
        if i > mirror {
            // Second half mirrors the first sample-for-sample.
            d[i] = -d[mirror];
            c[i] = c[mirror];
            o[i] = o[mirror];
            continue;
        }
        let tau = i as f64 / (n - 1) as f64;
        d[i] = if i == mirror { 0.0 } else { piecewise(&ud, tau) };
        c[i] = piecewise(&uc, tau);
        o[i] = piecewise(&uo, tau);
    }
    let channels = BTreeMap::from([
        (Channel::Segment(site_l), o.clone()),
        (Channel::Segment(site), c),
        (Channel::Segment(site + 1), o),
        (Channel::Diagonal(site), d),
    ]);
    VoltageSchedule::new(
        params.sample_rate,
        params.duration,
        channels,
        ScheduleMetadata::Swap {
            site,
            params: params.clone(),
        },
    )
}

/// Normalized hop profile `(position, velocity, acceleration)` in units of
/// one segment spacing and one hop duration.
///
/// Single hops follow a minimum-jerk curve. In longer transports the first
/// hop accelerates to unit velocity, inner hops are uniform and the last hop
/// decelerates; the acceleration vanishes at every segment center.
fn hop_profile(tau: f64, first: bool, last: bool) -> (f64, f64, f64) {
    let t = tau;
    match (first, last) {
        (true, true) => (
            t * t * t * (10.0 - 15.0 * t + 6.0 * t * t),
            30.0 * t * t * (1.0 - t) * (1.0 - t),
            60.0 * t * (1.0 - t) * (1.0 - 2.0 * t),
        ),
        (true, false) => (
            t * t * t * (6.0 - 8.0 * t + 3.0 * t * t),
            t * t * (18.0 - 32.0 * t + 15.0 * t * t),
            t * (36.0 - 96.0 * t + 60.0 * t * t),
        ),
        (false, true) => {
            let (p, v, a) = hop_profile(1.0 - t, true, false);
            (1.0 - p, v, -a)
        }
        (false, false) => (t, 1.0, 0.0),
    }
}

/// Moves a single well from `from` to `to`.
///
/// The well follows [`hop_profile`]; at every sample the two segments
/// bracketing the well are solved such that the well curvature equals that of
/// a static well and the axial force yields the profile's acceleration. At
/// segment centers this reduces to the static configuration with only that
/// segment at the trapping voltage.
pub fn transport_schedule(
    geometry: &TrapGeometry,
    from: usize,
    to: usize,
    params: &TransportParams,
) -> Result<VoltageSchedule> {
    for s in [from, to] {
        if !geometry.has_segment(s) {
            return Err(Error::Schedule(format!("segment {s} does not exist")));
        }
    }
    let meta = ScheduleMetadata::Transport {
        from,
        to,
        per_pair_duration: params.per_pair_duration,
    };
    if from == to {
        return VoltageSchedule::new(params.sample_rate, 0.0, BTreeMap::new(), meta);
    }
    let hops = from.abs_diff(to);
    let n_hop = sample_count(params.per_pair_duration, params.sample_rate);
    if n_hop < 2 {
        return Err(Error::Schedule("transport hop needs at least two samples".into()));
    }
    let path: Vec<usize> = if to > from {
        (from..=to).collect()
    } else {
        (to..=from).rev().collect()
    };
    let unit = |k: usize| geometry.field(&VoltageAssignment::new().with(Channel::Segment(k), 1.0));
    let unit_fields: Vec<ElectrodeField> = path.iter().map(|k| unit(*k)).collect::<Result<_>>()?;
    let centers: Vec<f64> = path.iter().map(|k| geometry.center(*k).expect("checked")).collect();
    let curvature = params.trap_voltage * unit_fields[0].hessian(&[centers[0], 0.0, 0.0])[0][0];
    let mass = geometry.ion_mass();
    let hop_time = params.per_pair_duration;

    let n = hops * n_hop;
    let mut channels: BTreeMap<Channel, Vec<f64>> = path
        .iter()
        .map(|s| (Channel::Segment(*s), vec![0.0; n]))
        .collect();
    for i in 0..n {
        let u = hops as f64 * i as f64 / (n - 1) as f64;
        let hop = (u.floor() as usize).min(hops - 1);
        let tau = u - hop as f64;
        let (p, _, a) = hop_profile(tau, hop == 0, hop == hops - 1);
        let (xa, xb) = (centers[hop], centers[hop + 1]);
        let x = xa + (xb - xa) * p;
        let acc = (xb - xa) * a / (hop_time * hop_time);
        // [g_a g_b; c_a c_b] [u_a; u_b] = [−m·acc; curvature]
        let r = [x, 0.0, 0.0];
        let (ga, gb) = (unit_fields[hop].gradient(&r)[0], unit_fields[hop + 1].gradient(&r)[0]);
        let (ca, cb) = (unit_fields[hop].hessian(&r)[0][0], unit_fields[hop + 1].hessian(&r)[0][0]);
        let det = ga * cb - gb * ca;
        if det.abs() < 1e-300 {
            return Err(Error::Schedule(format!("singular transport solve at {x:.2} um")));
        }
        let f = -mass * acc;
        let ua = (f * cb - gb * curvature) / det;
        let ub = (ga * curvature - ca * f) / det;
        channels.get_mut(&Channel::Segment(path[hop])).expect("on path")[i] = ua;
        channels.get_mut(&Channel::Segment(path[hop + 1])).expect("on path")[i] = ub;
    }
    // The end points are static wells; remove solver round-off there.
    for (k, seg) in path.iter().enumerate() {
        let v = channels.get_mut(&Channel::Segment(*seg)).expect("on path");
        v[0] = if k == 0 { params.trap_voltage } else { 0.0 };
        v[n - 1] = if k == hops { params.trap_voltage } else { 0.0 };
    }
    VoltageSchedule::new(
        params.sample_rate,
        hops as f64 * params.per_pair_duration,
        channels,
        meta,
    )
}

/// Center voltage that makes the curvature at `site` vanish when both
/// neighbors sit at `outer`.
pub fn quartic_center_voltage(geometry: &TrapGeometry, outer: f64) -> f64 {
    let u = crate::trap::SEGMENT_SPACING_UM / geometry.axial_width;
    let f = (u * u - 1.0) * (-0.5 * u * u).exp();
    2.0 * outer * f
}

/// Equilibrium half-distance of two ions split symmetrically about `xc`.
///
/// Scans outward from the center for the first point where the outward
/// electrode force no longer exceeds the Coulomb repulsion.
fn pair_half_distance(field: &ElectrodeField, xc: f64) -> Option<f64> {
    let g = |x: f64| field.gradient(&[xc + x, 0.0, 0.0])[0] - COULOMB_EV_UM / (4.0 * x * x);
    let step = 0.25;
    let mut a = 0.2;
    let mut ga = g(a);
    while a < 1.5 * SEGMENT_SPACING_UM {
        let b = a + step;
        let gb = g(b);
        if ga < 0.0 && gb >= 0.0 {
            return brent(g, a, b, 1e-9, 100);
        }
        a = b;
        ga = gb;
    }
    None
}

/// Voltage path of the separation morph, quadratic in `λ` through the
/// single-well, quartic and double-well keyframes, so that it has no corner at
/// the quartic point where the ions are most sensitive to the voltages.
#[derive(Debug, Clone, Copy)]
struct MorphPath {
    tq: f64,
    quartic_outer: f64,
    quartic_center: f64,
    trap: f64,
}

impl MorphPath {
    /// Checks the site and returns its neighbors with the path.
    fn new(geometry: &TrapGeometry, site: usize, params: &SeparationParams) -> Result<(usize, usize, Self)> {
        let left = site
            .checked_sub(1)
            .filter(|s| geometry.has_segment(*s))
            .ok_or_else(|| Error::Schedule(format!("site {site} has no left neighbor")))?;
        let right = site + 1;
        if !geometry.has_segment(right) || !geometry.has_segment(site) {
            return Err(Error::Schedule(format!("site {site} has no right neighbor")));
        }
        if !(params.quartic_time > 0.0 && params.quartic_time < 1.0) {
            return Err(Error::Schedule("quartic keyframe must lie inside (0, 1)".into()));
        }
        if sample_count(params.duration, params.sample_rate) < 3 {
            return Err(Error::Schedule("separation needs at least three samples".into()));
        }
        let path = Self {
            tq: params.quartic_time,
            quartic_outer: params.quartic_outer,
            quartic_center: quartic_center_voltage(geometry, params.quartic_outer),
            trap: params.trap_voltage,
        };
        Ok((left, right, path))
    }

    /// `(outer, center)` voltages at path parameter `lambda`.
    fn volts(&self, lambda: f64) -> (f64, f64) {
        let tq = self.tq;
        let l = lambda;
        let q = |v0: f64, vq: f64, v1: f64| {
            v0 * (l - tq) * (l - 1.0) / tq + vq * l * (l - 1.0) / (tq * (tq - 1.0)) + v1 * l * (l - tq) / (1.0 - tq)
        };
        (q(0.0, self.quartic_outer, self.trap), q(self.trap, self.quartic_center, 0.0))
    }
}

/// Morphs the single well at `site` into wells at `site − 1` and `site + 1`.
///
/// The voltages move along a smooth path through three keyframes (single
/// well, quartic with zero curvature at the site, double well), parameterized
/// by `λ`. The time dependence is inverse engineered: the half-distance of a
/// symmetric ion pair follows a minimum-jerk profile, and at every sample `λ`
/// is solved such that the net force on each ion produces the acceleration of
/// that profile, so a pair starting at rest ends at rest. `bias` tilts the
/// potential (positive bias raises the right-hand side) with weight
/// `sin(πλ)`, so zero bias gives a mirror-symmetric double well.
pub fn separation_schedule(
    geometry: &TrapGeometry,
    site: usize,
    bias: f64,
    params: &SeparationParams,
) -> Result<VoltageSchedule> {
    let (left, right, path) = MorphPath::new(geometry, site, params)?;
    let n = sample_count(params.duration, params.sample_rate);
    let volts = |lambda: f64| path.volts(lambda);

    let xc = geometry.center(site).expect("checked");
    let mass = geometry.ion_mass();
    let field_at = |lambda: f64| {
        let (o, c) = volts(lambda);
        geometry.field(
            &VoltageAssignment::new()
                .with(Channel::Segment(left), o)
                .with(Channel::Segment(site), c)
                .with(Channel::Segment(right), o),
        )
    };
    let x0 = pair_half_distance(&field_at(0.0)?, xc)
        .ok_or_else(|| Error::Schedule("no pair equilibrium in the initial well".into()))?;
    let x1 = pair_half_distance(&field_at(1.0)?, xc)
        .ok_or_else(|| Error::Schedule("no pair equilibrium in the final wells".into()))?;

    // The pair half-distance follows a minimum-jerk profile; at each sample
    // the path parameter is chosen so that the net force on each ion yields
    // exactly the acceleration of that profile.
    let grid = 400;
    let fields: Vec<ElectrodeField> = (0..=grid)
        .map(|k| field_at(k as f64 / grid as f64))
        .collect::<Result<_>>()?;
    let residual = |field: &ElectrodeField, x: f64, acc: f64| {
        field.gradient(&[xc + x, 0.0, 0.0])[0] - COULOMB_EV_UM / (4.0 * x * x) + mass * acc
    };
    let duration = params.duration;
    let mut lambdas = Vec::with_capacity(n);
    let mut previous = 0.0;
    for i in 0..n {
        let tau = i as f64 / (n - 1) as f64;
        let s = tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau);
        let s_dd = 60.0 * tau * (1.0 - tau) * (1.0 - 2.0 * tau) / (duration * duration);
        let x = x0 + (x1 - x0) * s;
        let acc = (x1 - x0) * s_dd;
        let lambda = if i == 0 {
            0.0
        } else if i == n - 1 {
            1.0
        } else {
            let r: Vec<f64> = fields.iter().map(|f| residual(f, x, acc)).collect();
            let crossing = (0..grid)
                .filter(|&k| r[k] >= 0.0 && r[k + 1] < 0.0)
                .min_by(|&a, &b| {
                    let da = (a as f64 / grid as f64 - previous).abs();
                    let db = (b as f64 / grid as f64 - previous).abs();
                    da.total_cmp(&db)
                })
                .ok_or_else(|| Error::Schedule(format!("separation profile unreachable at t = {:.2} us", tau * duration)))?;
            let (la, lb) = (crossing as f64 / grid as f64, (crossing + 1) as f64 / grid as f64);
            brent(
                |l| field_at(l).map(|f| residual(&f, x, acc)).unwrap_or(f64::NAN),
                la,
                lb,
                1e-12,
                100,
            )
            .unwrap_or(0.5 * (la + lb))
        };
        previous = lambda;
        lambdas.push(lambda);
    }

    let mut l = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    for lambda in lambdas {
        let tilt = bias * (std::f64::consts::PI * lambda).sin();
        let (outer, center) = volts(lambda);
        l.push(outer - tilt);
        c.push(center);
        r.push(outer + tilt);
    }
    let channels = BTreeMap::from([
        (Channel::Segment(left), l),
        (Channel::Segment(site), c),
        (Channel::Segment(right), r),
    ]);
    VoltageSchedule::new(
        params.sample_rate,
        params.duration,
        channels,
        ScheduleMetadata::Separation { site, bias },
    )
}

fn min_jerk(tau: f64) -> (f64, f64) {
    let t = tau.clamp(0.0, 1.0);
    (
        t * t * t * (10.0 - 15.0 * t + 6.0 * t * t),
        60.0 * t * (1.0 - t) * (1.0 - 2.0 * t),
    )
}

/// Splits three co-trapped ions at `site` into `left` and `3 − left`.
///
/// Two controls are inverse engineered at every sample: the morph parameter
/// of [`separation_schedule`] and an antisymmetric tilt of the outer
/// segments. The single ion and the center of mass of the pair follow
/// minimum-jerk trajectories to their final wells while the pair spacing and
/// the radial positions stay in internal equilibrium. The latter matters
/// because three ions at the trapping voltage form a zigzag that straightens
/// as the well opens. `bias` adds a manual `sin(πτ)` trim on top.
pub fn unequal_separation_schedule(
    geometry: &TrapGeometry,
    site: usize,
    ions: usize,
    left: usize,
    bias: f64,
    params: &SeparationParams,
) -> Result<VoltageSchedule> {
    if ions != 3 || !(left == 1 || left == 2) {
        return Err(Error::Schedule(format!(
            "unequal split of {ions} ions into {left} and {} is not supported",
            ions.saturating_sub(left)
        )));
    }
    let (lseg, rseg, path) = MorphPath::new(geometry, site, params)?;
    let n = sample_count(params.duration, params.sample_rate);
    let xc = geometry.center(site).expect("checked");
    let mass = geometry.ion_mass();
    let field = |lambda: f64, tilt: f64| {
        let (o, c) = path.volts(lambda);
        geometry.field(
            &VoltageAssignment::new()
                .with(Channel::Segment(lseg), o - tilt)
                .with(Channel::Segment(site), c)
                .with(Channel::Segment(rseg), o + tilt),
        )
    };
    let (xl, xr) = (xc - SEGMENT_SPACING_UM, xc + SEGMENT_SPACING_UM);
    let start = crate::dynamics::find_equilibrium(
        &field(0.0, 0.0)?,
        &[[xc - 5.0, 0.0, 0.0], [xc, 0.0, 0.0], [xc + 5.0, 0.0, 0.0]],
    )?;
    let end_guess = if left == 2 {
        [[xl - 2.5, 0.0, 0.0], [xl + 2.5, 0.0, 0.0], [xr, 0.0, 0.0]]
    } else {
        [[xl, 0.0, 0.0], [xr - 2.5, 0.0, 0.0], [xr + 2.5, 0.0, 0.0]]
    };
    let end = crate::dynamics::find_equilibrium(&field(1.0, 0.0)?, &end_guess)?;
    let (pair, single) = if left == 2 { ([0, 1], 2) } else { ([1, 2], 0) };
    let mean = |x: &[[f64; 3]]| 0.5 * (x[pair[0]][0] + x[pair[1]][0]);
    let (g0, g1) = (mean(&start), mean(&end));
    let (s0, s1) = (start[single][0], end[single][0]);

    // Unknowns z = (λ, tilt, pair half-spacing, y₀, y₁, y₂). Residuals are the
    // axial force balance of the pair center, the single ion and the pair
    // difference, then the radial force on every ion.
    type V6 = nalgebra::SVector<f64, 6>;
    let residual = |z: &V6, g: f64, s: f64, ag: f64, as_: f64| -> Option<V6> {
        let f = field(z[0], z[1]).ok()?;
        let mut r = [[0.0; 3]; 3];
        r[pair[0]][0] = g - z[2];
        r[pair[1]][0] = g + z[2];
        r[single][0] = s;
        for (i, ri) in r.iter_mut().enumerate() {
            ri[1] = z[3 + i];
        }
        let force = |i: usize| {
            let gi = f.gradient(&r[i]);
            let mut fi = [-gi[0], -gi[1]];
            for (j, rj) in r.iter().enumerate() {
                if j != i {
                    let d = [r[i][0] - rj[0], r[i][1] - rj[1], r[i][2] - rj[2]];
                    let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    let k = COULOMB_EV_UM / (d2 * d2.sqrt());
                    fi[0] += k * d[0];
                    fi[1] += k * d[1];
                }
            }
            fi
        };
        let fs = [force(0), force(1), force(2)];
        let (fa, fb) = (fs[pair[0]], fs[pair[1]]);
        Some(V6::from([
            0.5 * (fa[0] + fb[0]) - mass * ag,
            fs[single][0] - mass * as_,
            fb[0] - fa[0],
            fs[0][1],
            fs[1][1],
            fs[2][1],
        ]))
    };
    let norm = |r: &V6| r.amax();
    let solve_error = |tau: f64| Error::Schedule(format!("split solve left the trap model at t = {:.2} us", tau * params.duration));

    let duration = params.duration;
    let mut z = V6::from([
        0.0,
        0.0,
        0.5 * (start[pair[1]][0] - start[pair[0]][0]),
        start[0][1],
        start[1][1],
        start[2][1],
    ]);
    let mut controls = Vec::with_capacity(n);
    controls.push((0.0, 0.0));
    for i in 1..n - 1 {
        let tau = i as f64 / (n - 1) as f64;
        let (p, a) = min_jerk(tau);
        let g = g0 + (g1 - g0) * p;
        let s = s0 + (s1 - s0) * p;
        let ag = (g1 - g0) * a / (duration * duration);
        let as_ = (s1 - s0) * a / (duration * duration);
        let r_at = |z: &V6| residual(z, g, s, ag, as_);
        let mut r = r_at(&z).ok_or_else(|| solve_error(tau))?;
        for _ in 0..80 {
            if norm(&r) < 1e-13 {
                break;
            }
            let steps = [1e-7, 1e-7, 1e-6, 1e-6, 1e-6, 1e-6];
            let mut jac = nalgebra::SMatrix::<f64, 6, 6>::zeros();
            for (k, h) in steps.iter().enumerate() {
                let mut zk = z;
                zk[k] += h;
                let rk = r_at(&zk).ok_or_else(|| solve_error(tau))?;
                jac.set_column(k, &((rk - r) / *h));
            }
            let Some(delta) = jac.lu().solve(&(-r)) else { break };
            let mut step = 1.0;
            let mut accepted = false;
            while step > 1e-4 {
                let mut trial = z + delta * step;
                trial[2] = trial[2].max(0.1);
                if let Some(rt) = r_at(&trial) {
                    if norm(&rt) < norm(&r) {
                        z = trial;
                        r = rt;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if norm(&r) > 1e-9 {
            return Err(Error::Schedule(format!(
                "split solve did not converge at t = {:.2} us (residual {:.2e})",
                tau * duration,
                norm(&r)
            )));
        }
        controls.push((z[0], z[1]));
    }
    controls.push((1.0, 0.0));

    let mut l = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    for (i, (lambda, tilt)) in controls.into_iter().enumerate() {
        let tau = i as f64 / (n - 1) as f64;
        let trim = if i == 0 || i + 1 == n {
            0.0
        } else {
            bias * (std::f64::consts::PI * tau).sin()
        };
        let (outer, center) = path.volts(lambda);
        l.push(outer - tilt - trim);
        c.push(center);
        r.push(outer + tilt + trim);
    }
    let channels = BTreeMap::from([
        (Channel::Segment(lseg), l),
        (Channel::Segment(site), c),
        (Channel::Segment(rseg), r),
    ]);
    VoltageSchedule::new(
        params.sample_rate,
        params.duration,
        channels,
        ScheduleMetadata::Separation { site, bias },
    )
}

/// Time reverse of [`separation_schedule`].
pub fn merge_schedule(
    geometry: &TrapGeometry,
    site: usize,
    bias: f64,
    params: &SeparationParams,
) -> Result<VoltageSchedule> {
    Ok(separation_schedule(geometry, site, bias, params)?
        .time_reversed(ScheduleMetadata::Merge { site, bias }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trap::{calibrate, SecularTargets, TrapLayout};

    fn geometry() -> TrapGeometry {
        calibrate(&TrapLayout::default(), &SecularTargets::default(), -6.0).unwrap()
    }

    #[test]
    fn swap_midpoint_values() {
        let s = swap_schedule(&SwapRampParams::default(), 20).unwrap();
        assert_eq!(s.len(), 55);
        let mid = 27;
        assert_eq!(s.samples(Channel::Diagonal(20)).unwrap()[mid], 0.0);
        assert!((s.samples(Channel::Segment(20)).unwrap()[mid] + 9.5).abs() < 1e-12);
        assert!((s.samples(Channel::Segment(19)).unwrap()[mid] - 4.0).abs() < 1e-12);
        assert!((s.samples(Channel::Segment(21)).unwrap()[mid] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn swap_is_time_symmetric_at_samples() {
        for duration in [22.0, 44.0, 17.2] {
            let p = SwapRampParams {
                duration,
                ..Default::default()
            };
            let s = swap_schedule(&p, 20).unwrap();
            let n = s.len();
            let d = s.samples(Channel::Diagonal(20)).unwrap();
            let c = s.samples(Channel::Segment(20)).unwrap();
            let o = s.samples(Channel::Segment(21)).unwrap();
            for i in 0..n {
                let j = n - 1 - i;
                assert_eq!(c[i], c[j]);
                assert_eq!(o[i], o[j]);
                assert_eq!(d[i], -d[j]);
            }
        }
    }

    #[test]
    fn swap_starts_and_ends_in_hold() {
        let s = swap_schedule(&SwapRampParams::default(), 20).unwrap();
        let hold = VoltageAssignment::new()
            .with(Channel::Segment(19), 0.0)
            .with(Channel::Segment(20), -6.0)
            .with(Channel::Segment(21), 0.0)
            .with(Channel::Diagonal(20), 0.0);
        assert_eq!(s.start_config(), hold);
        assert_eq!(s.end_config(), hold);
    }

    #[test]
    fn zero_diagonal_peak_gives_zero_diagonal_voltage() {
        let p = SwapRampParams {
            u_d_peak: 0.0,
            ..Default::default()
        };
        let s = swap_schedule(&p, 20).unwrap();
        assert!(s.samples(Channel::Diagonal(20)).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn asymmetric_breakpoints_rejected() {
        let p = SwapRampParams {
            breakpoints: [0.05, 0.4, 0.55, 0.95],
            ..Default::default()
        };
        assert!(swap_schedule(&p, 20).is_err());
    }

    #[test]
    fn transport_lengths() {
        let g = geometry();
        let p = TransportParams::default();
        let one = transport_schedule(&g, 20, 21, &p).unwrap();
        assert_eq!(one.len(), 70);
        assert!((one.duration() - 28.0).abs() < 1e-12);
        let six = transport_schedule(&g, 20, 26, &p).unwrap();
        assert!((six.duration() - 168.0).abs() < 1e-12);
        assert_eq!(six.len(), 420);
        let none = transport_schedule(&g, 20, 20, &p).unwrap();
        assert_eq!(none.len(), 0);
        assert_eq!(none.duration(), 0.0);
    }

    #[test]
    fn transport_endpoints_are_static_wells() {
        let g = geometry();
        let s = transport_schedule(&g, 22, 19, &TransportParams::default()).unwrap();
        let start = s.start_config();
        let end = s.end_config();
        assert_eq!(start.get(Channel::Segment(22)), -6.0);
        assert_eq!(end.get(Channel::Segment(19)), -6.0);
        for seg in [19, 20, 21] {
            assert_eq!(start.get(Channel::Segment(seg)), 0.0);
        }
        for seg in [20, 21, 22] {
            assert_eq!(end.get(Channel::Segment(seg)), 0.0);
        }
    }

    #[test]
    fn merge_of_separation_restores_initial_configuration() {
        let g = geometry();
        let p = SeparationParams::default();
        let sep = separation_schedule(&g, 20, 0.3, &p).unwrap();
        let merge = merge_schedule(&g, 20, 0.3, &p).unwrap();
        assert_eq!(merge.end_config(), sep.start_config());
        let joined = VoltageSchedule::concat(&[sep.clone(), merge], &VoltageAssignment::new()).unwrap();
        assert_eq!(joined.end_config(), sep.start_config());
    }

    #[test]
    fn unbiased_separation_is_symmetric() {
        let g = geometry();
        let sep = separation_schedule(&g, 20, 0.0, &SeparationParams::default()).unwrap();
        assert_eq!(sep.samples(Channel::Segment(19)), sep.samples(Channel::Segment(21)));
    }

    #[test]
    fn quartic_keyframe_has_zero_curvature() {
        let g = geometry();
        let qc = quartic_center_voltage(&g, -4.0);
        let volts = VoltageAssignment::new()
            .with(Channel::Segment(19), -4.0)
            .with(Channel::Segment(20), qc)
            .with(Channel::Segment(21), -4.0);
        let field = g.field(&volts).unwrap();
        use crate::trap::Potential;
        assert!(field.hessian(&[0.0; 3])[0][0].abs() < 1e-18);
    }

    #[test]
    fn checked_constructor_rejects_ragged_channels() {
        let channels = BTreeMap::from([(Channel::Segment(1), vec![0.0; 3])]);
        assert!(VoltageSchedule::new(2.5, 2.0, channels, ScheduleMetadata::Hold).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = swap_schedule(&SwapRampParams::default(), 20).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = VoltageSchedule::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), s.len());
        for c in s.channels() {
            assert_eq!(back.samples(c), s.samples(c));
        }
    }
}
