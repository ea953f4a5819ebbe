//! Analytic surrogate for a segmented multilayer Paul trap.
//!
//! Each DC segment contributes a Gaussian bump along the trap axis, the radial
//! directions are confined by a static harmonic pseudopotential and the
//! diagonal (symmetry-breaking) voltage of a trap site produces an `x·y`
//! quadrupole under a Gaussian envelope centered on that site:
//!
//! ```text
//! Φ(r) = g Σ_k U_k G(x − x_k) + ½ κ_y y² + ½ κ_z z² + c_d Σ_s U_d,s (x − x_s) G(x − x_s) y
//! G(d) = exp(−d² / 2w²)
//! ```
//!
//! The envelope `(x − x_s) G` is odd about the site, which is how the inverted
//! polarity of the electrode pair left of the site enters the model.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::brent;
use crate::units::{angular, cyclic, mass_internal, CA40_MASS_U};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Distance between consecutive segment centers in µm.
pub const SEGMENT_SPACING_UM: f64 = 200.0;

/// A voltage channel of the trap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    /// DC electrode pair of one segment (trapping `U_c` or offset `U_o` role).
    Segment(usize),
    /// Diagonal electrode set around a trap site (`U_d` role).
    Diagonal(usize),
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::Segment(k) => write!(f, "seg{k}"),
            Channel::Diagonal(k) => write!(f, "diag{k}"),
        }
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::UnknownChannel(s.to_string()))
        };
        if let Some(rest) = s.strip_prefix("seg") {
            Ok(Channel::Segment(parse(rest)?))
        } else if let Some(rest) = s.strip_prefix("diag") {
            Ok(Channel::Diagonal(parse(rest)?))
        } else {
            Err(Error::UnknownChannel(s.to_string()))
        }
    }
}

/// Voltages applied to a set of channels; channels not listed are at 0 V.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VoltageAssignment {
    volts: BTreeMap<Channel, f64>,
}

impl VoltageAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, channel: Channel, volts: f64) -> Self {
        self.set(channel, volts);
        self
    }

    pub fn set(&mut self, channel: Channel, volts: f64) {
        self.volts.insert(channel, volts);
    }

    pub fn get(&self, channel: Channel) -> f64 {
        self.volts.get(&channel).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Channel, f64)> + '_ {
        self.volts.iter().map(|(c, v)| (*c, *v))
    }

    pub fn channels(&self) -> impl Iterator<Item = Channel> + '_ {
        self.volts.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.volts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volts.is_empty()
    }
}

impl FromIterator<(Channel, f64)> for VoltageAssignment {
    fn from_iter<I: IntoIterator<Item = (Channel, f64)>>(iter: I) -> Self {
        Self {
            volts: iter.into_iter().collect(),
        }
    }
}

/// Segment layout and the uncalibrated shape constants of the surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapLayout {
    pub first_segment: usize,
    pub last_segment: usize,
    pub liz_segment: usize,
    /// Gaussian width `w` of one segment's axial contribution (µm).
    pub axial_width: f64,
    /// Diagonal quadrupole strength per volt of `U_d` (1/µm²).
    pub diagonal_coupling: f64,
    pub ion_mass_u: f64,
}

impl Default for TrapLayout {
    fn default() -> Self {
        Self {
            first_segment: 14,
            last_segment: 30,
            liz_segment: 20,
            axial_width: 120.0,
            diagonal_coupling: 4.0e-6,
            ion_mass_u: CA40_MASS_U,
        }
    }
}

/// Single-ion secular frequencies (MHz, cyclic) used as calibration targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecularTargets {
    pub axial_mhz: f64,
    pub radial_low_mhz: f64,
    pub radial_high_mhz: f64,
}

impl Default for SecularTargets {
    fn default() -> Self {
        Self {
            axial_mhz: 1.488,
            radial_low_mhz: 1.927,
            radial_high_mhz: 3.248,
        }
    }
}

/// Calibrated surrogate geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapGeometry {
    pub first_segment: usize,
    /// Axial centers of the segments `first_segment..`, in µm, LIZ at 0.
    pub segment_centers: Vec<f64>,
    pub liz_index: usize,
    pub axial_width: f64,
    /// Dimensionless voltage-to-potential efficiency of the axial basis.
    pub axial_gain: f64,
    /// Pseudopotential curvatures `[κ_y, κ_z]` in V/µm².
    pub radial_curvatures: [f64; 2],
    pub diagonal_coupling: f64,
    pub ion_mass_u: f64,
}

impl TrapGeometry {
    /// Builds a geometry with explicit constants and checks its invariants.
    pub fn new(
        layout: &TrapLayout,
        axial_gain: f64,
        radial_curvatures: [f64; 2],
    ) -> Result<Self> {
        if layout.last_segment < layout.first_segment {
            return Err(Error::Config("last_segment precedes first_segment".into()));
        }
        if !(layout.first_segment..=layout.last_segment).contains(&layout.liz_segment) {
            return Err(Error::Config(format!(
                "LIZ segment {} outside {}..={}",
                layout.liz_segment, layout.first_segment, layout.last_segment
            )));
        }
        let segment_centers = (layout.first_segment..=layout.last_segment)
            .map(|k| (k as f64 - layout.liz_segment as f64) * SEGMENT_SPACING_UM)
            .collect();
        let geometry = Self {
            first_segment: layout.first_segment,
            segment_centers,
            liz_index: layout.liz_segment,
            axial_width: layout.axial_width,
            axial_gain,
            radial_curvatures,
            diagonal_coupling: layout.diagonal_coupling,
            ion_mass_u: layout.ion_mass_u,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.segment_centers.windows(2) {
            if ((pair[1] - pair[0]) - SEGMENT_SPACING_UM).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "segment spacing {} µm, expected {SEGMENT_SPACING_UM}",
                    pair[1] - pair[0]
                )));
            }
        }
        let [ky, kz] = self.radial_curvatures;
        if !(ky > 0.0 && kz > 0.0) {
            return Err(Error::Config("radial curvatures must be positive".into()));
        }
        if (ky - kz).abs() <= 1e-12 * ky.max(kz) {
            return Err(Error::Config("radial curvatures must differ".into()));
        }
        if !(self.axial_width > 0.0 && self.axial_gain > 0.0) {
            return Err(Error::Config("axial width and gain must be positive".into()));
        }
        Ok(())
    }

    pub fn last_segment(&self) -> usize {
        self.first_segment + self.segment_centers.len() - 1
    }

    pub fn has_segment(&self, segment: usize) -> bool {
        (self.first_segment..=self.last_segment()).contains(&segment)
    }

    /// Axial center of `segment` in µm.
    pub fn center(&self, segment: usize) -> Option<f64> {
        segment
            .checked_sub(self.first_segment)
            .and_then(|i| self.segment_centers.get(i).copied())
    }

    pub fn liz_center(&self) -> f64 {
        self.center(self.liz_index).unwrap_or(0.0)
    }

    /// Ion mass in internal units (eV·µs²/µm²).
    pub fn ion_mass(&self) -> f64 {
        mass_internal(self.ion_mass_u)
    }

    /// Axial extent in which ions are considered trapped (µm).
    pub fn axial_bounds(&self) -> (f64, f64) {
        let lo = self.segment_centers.first().copied().unwrap_or(0.0);
        let hi = self.segment_centers.last().copied().unwrap_or(0.0);
        (lo - 2.0 * self.axial_width, hi + 2.0 * self.axial_width)
    }

    /// Compiles a voltage assignment into a fast field evaluator.
    pub fn field(&self, volts: &VoltageAssignment) -> Result<ElectrodeField> {
        let mut field = ElectrodeField::empty(self);
        for (channel, v) in volts.iter() {
            field.push(self, channel, v)?;
        }
        Ok(field)
    }

    /// Static trapping configuration: `u_c` on each listed segment.
    pub fn trapping_voltages(&self, segments: &[usize], u_c: f64) -> VoltageAssignment {
        segments.iter().map(|&s| (Channel::Segment(s), u_c)).collect()
    }

    /// Returns a copy with every curvature constant scaled by `factor`.
    pub fn scaled_curvatures(&self, factor: f64) -> Self {
        let mut g = self.clone();
        g.axial_gain *= factor;
        g.radial_curvatures = [g.radial_curvatures[0] * factor, g.radial_curvatures[1] * factor];
        g.diagonal_coupling *= factor;
        g
    }
}

/// Something that yields the potential energy (eV) of a unit charge and its
/// first two derivatives.
pub trait Potential {
    fn energy(&self, r: &Vec3) -> f64;
    fn gradient(&self, r: &Vec3) -> Vec3;
    fn hessian(&self, r: &Vec3) -> Mat3;
}

/// Electrode voltages compiled against a geometry.
#[derive(Debug, Clone)]
pub struct ElectrodeField {
    pub(crate) inv_w2: f64,
    pub(crate) gain: f64,
    pub(crate) kappa: [f64; 2],
    pub(crate) c_d: f64,
    /// `(center, volts)` of DC segment terms.
    pub(crate) segments: Vec<(f64, f64)>,
    /// `(site center, volts)` of diagonal terms.
    pub(crate) diagonals: Vec<(f64, f64)>,
}

impl ElectrodeField {
    pub(crate) fn empty(geometry: &TrapGeometry) -> Self {
        Self {
            inv_w2: 1.0 / (geometry.axial_width * geometry.axial_width),
            gain: geometry.axial_gain,
            kappa: geometry.radial_curvatures,
            c_d: geometry.diagonal_coupling,
            segments: Vec::new(),
            diagonals: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, geometry: &TrapGeometry, channel: Channel, volts: f64) -> Result<()> {
        let center = |k| {
            geometry
                .center(k)
                .ok_or_else(|| Error::UnknownChannel(channel.to_string()))
        };
        match channel {
            Channel::Segment(k) => self.segments.push((center(k)?, volts)),
            Channel::Diagonal(k) => self.diagonals.push((center(k)?, volts)),
        }
        Ok(())
    }

    /// Overwrites the voltage of the i-th compiled term (segments first, then diagonals).
    pub(crate) fn set_term(&mut self, index: usize, volts: f64) {
        if index < self.segments.len() {
            self.segments[index].1 = volts;
        } else {
            self.diagonals[index - self.segments.len()].1 = volts;
        }
    }
}

impl Potential for ElectrodeField {
    fn energy(&self, r: &Vec3) -> f64 {
        let [x, y, z] = *r;
        let mut phi = 0.5 * (self.kappa[0] * y * y + self.kappa[1] * z * z);
        let mut axial = 0.0;
        for &(xc, u) in &self.segments {
            let d = x - xc;
            axial += u * (-0.5 * d * d * self.inv_w2).exp();
        }
        phi += self.gain * axial;
        for &(xc, u) in &self.diagonals {
            let d = x - xc;
            phi += self.c_d * u * d * (-0.5 * d * d * self.inv_w2).exp() * y;
        }
        phi
    }

    fn gradient(&self, r: &Vec3) -> Vec3 {
        let [x, y, z] = *r;
        let mut gx = 0.0;
        for &(xc, u) in &self.segments {
            let d = x - xc;
            gx -= u * d * self.inv_w2 * (-0.5 * d * d * self.inv_w2).exp();
        }
        gx *= self.gain;
        let mut gy = self.kappa[0] * y;
        for &(xc, u) in &self.diagonals {
            let d = x - xc;
            let g = (-0.5 * d * d * self.inv_w2).exp();
            let cu = self.c_d * u;
            gx += cu * g * (1.0 - d * d * self.inv_w2) * y;
            gy += cu * d * g;
        }
        [gx, gy, self.kappa[1] * z]
    }

    fn hessian(&self, r: &Vec3) -> Mat3 {
        let [x, y, _] = *r;
        let mut hxx = 0.0;
        for &(xc, u) in &self.segments {
            let d = x - xc;
            let u2 = d * d * self.inv_w2;
            hxx += u * (u2 - 1.0) * self.inv_w2 * (-0.5 * u2).exp();
        }
        hxx *= self.gain;
        let mut hxy = 0.0;
        for &(xc, u) in &self.diagonals {
            let d = x - xc;
            let u2 = d * d * self.inv_w2;
            let g = (-0.5 * u2).exp();
            let cu = self.c_d * u;
            hxx += cu * g * (-d * self.inv_w2) * (3.0 - u2) * y;
            hxy += cu * g * (1.0 - u2);
        }
        [
            [hxx, hxy, 0.0],
            [hxy, self.kappa[0], 0.0],
            [0.0, 0.0, self.kappa[1]],
        ]
    }
}

/// Potential of a unit charge at `r` for the given voltages.
pub fn potential(geometry: &TrapGeometry, volts: &VoltageAssignment, r: &Vec3) -> Result<f64> {
    Ok(geometry.field(volts)?.energy(r))
}

/// Single-ion secular frequencies along the axial, lower radial and upper
/// radial principal directions, in MHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecularFrequencies {
    pub position: Vec3,
    pub axial_mhz: f64,
    pub radial_low_mhz: f64,
    pub radial_high_mhz: f64,
}

/// Finds the single-ion minimum near `guess` and evaluates its secular
/// frequencies.
pub fn secular_frequencies<P: Potential>(
    field: &P,
    mass: f64,
    guess: Vec3,
) -> Result<SecularFrequencies> {
    let position = single_ion_minimum(field, guess)?;
    let h = Matrix3::from_fn(|i, j| field.hessian(&position)[i][j]);
    let eig = SymmetricEigen::new(h);
    // Assign each principal direction to the axis it is mostly aligned with.
    let mut by_axis = [f64::NAN; 3];
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut used = [false; 3];
    for &i in &order {
        let v = eig.eigenvectors.column(i);
        let axis = (0..3)
            .filter(|&a| !used[a])
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap_or(0);
        used[axis] = true;
        let lambda = eig.eigenvalues[i];
        if lambda <= 0.0 {
            return Err(Error::Unstable {
                min_eigenvalue: lambda,
            });
        }
        by_axis[axis] = cyclic((lambda / mass).sqrt());
    }
    Ok(SecularFrequencies {
        position,
        axial_mhz: by_axis[0],
        radial_low_mhz: by_axis[1],
        radial_high_mhz: by_axis[2],
    })
}

fn single_ion_minimum<P: Potential>(field: &P, guess: Vec3) -> Result<Vec3> {
    let mut r = Vector3::from(guess);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..200 {
        let g = Vector3::from(field.gradient(&r.into()));
        grad_norm = g.norm();
        if grad_norm < 1e-15 {
            return Ok(r.into());
        }
        let h = Matrix3::from_fn(|i, j| field.hessian(&r.into())[i][j]);
        let eig = SymmetricEigen::new(h);
        // Saddle-free Newton: use |λ| so every step descends.
        let mut step = Vector3::zeros();
        for k in 0..3 {
            let v = eig.eigenvectors.column(k);
            let lam = eig.eigenvalues[k].abs().max(1e-12);
            step -= v * (v.dot(&g) / lam);
        }
        let e0 = field.energy(&r.into());
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = r + step * t;
            if field.energy(&trial.into()) <= e0 {
                r = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        if (step * t).norm() < 1e-13 {
            let g = Vector3::from(field.gradient(&r.into()));
            if g.norm() < 1e-12 {
                return Ok(r.into());
            }
        }
    }
    let g = Vector3::from(field.gradient(&r.into()));
    if g.norm() < 1e-12 {
        Ok(r.into())
    } else {
        Err(Error::NoEquilibrium {
            iterations: 200,
            gradient_norm: grad_norm,
        })
    }
}

/// Calibrates the surrogate so that a single ion held by `u_c` on the LIZ
/// segment has the target secular frequencies.
///
/// The axial gain and the two radial curvatures are found by bracketed root
/// finding; the Gaussian width and diagonal coupling are taken from `layout`.
pub fn calibrate(layout: &TrapLayout, targets: &SecularTargets, u_c: f64) -> Result<TrapGeometry> {
    let t = [targets.axial_mhz, targets.radial_low_mhz, targets.radial_high_mhz];
    if t.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::Calibration(format!("targets must be positive, got {t:?}")));
    }
    if (t[1] - t[2]).abs() <= 1e-12 * t[2] {
        return Err(Error::Calibration("radial targets must be distinct".into()));
    }
    if u_c >= 0.0 {
        return Err(Error::Calibration(format!(
            "trapping voltage must be negative to confine a positive ion, got {u_c} V"
        )));
    }
    let mass = mass_internal(layout.ion_mass_u);
    // Starting point that satisfies the invariants; refined below.
    let guess_k = |f: f64| mass * angular(f).powi(2);
    let mut geometry = TrapGeometry::new(layout, 0.1, [guess_k(t[1]), guess_k(t[2])])?;
    let volts = VoltageAssignment::new().with(Channel::Segment(layout.liz_segment), u_c);
    let origin = [geometry.liz_center(), 0.0, 0.0];

    let freqs = |g: &TrapGeometry| -> Result<SecularFrequencies> {
        secular_frequencies(&g.field(&volts)?, mass, origin)
    };

    let solve = |name: &str, target: f64, mut apply: Box<dyn FnMut(f64) -> Option<f64> + '_>, lo: f64, hi: f64| -> Result<f64> {
        brent(|p| apply(p).map_or(f64::NAN, |f| f - target), lo, hi, 1e-16 * hi, 500).ok_or_else(|| {
            Error::Calibration(format!(
                "no {name} parameter in [{lo:.3e}, {hi:.3e}] reproduces {target} MHz"
            ))
        })
    };

    let base = geometry.clone();
    let gain = solve(
        "axial gain",
        t[0],
        Box::new(|p| {
            let mut g = base.clone();
            g.axial_gain = p;
            freqs(&g).ok().map(|f| f.axial_mhz)
        }),
        1e-6,
        1e3,
    )?;
    geometry.axial_gain = gain;

    for (idx, name) in [(0usize, "lower radial curvature"), (1, "upper radial curvature")] {
        let base = geometry.clone();
        let k = solve(
            name,
            t[idx + 1],
            Box::new(move |p| {
                let mut g = base.clone();
                g.radial_curvatures[idx] = p;
                freqs(&g).ok().map(|f| if idx == 0 { f.radial_low_mhz } else { f.radial_high_mhz })
            }),
            1e-3 * guess_k(t[idx + 1]),
            1e3 * guess_k(t[idx + 1]),
        )?;
        geometry.radial_curvatures[idx] = k;
    }
    geometry.validate()?;

    let check = freqs(&geometry)?;
    let got = [check.axial_mhz, check.radial_low_mhz, check.radial_high_mhz];
    for (g, w) in got.iter().zip(t) {
        if ((g - w) / w).abs() > 1e-6 {
            return Err(Error::Calibration(format!(
                "round trip mismatch: got {got:?}, wanted {t:?}"
            )));
        }
    }
    Ok(geometry)
}
