//! Spin qubits of the ions: rotations, phase accumulation in an inhomogeneous
//! magnetic field, shelving and noisy fluorescence readout.
//!
//! Basis convention: `|↓⟩ = |0⟩`, `|↑⟩ = |1⟩`, Pauli matrices in their
//! standard form on that basis. Ion 0 is the most significant bit of a basis
//! index. A readout bit of 1 means "dark", i.e. the ion was in `|↑⟩` and got
//! shelved.

use std::io::Write;

use nalgebra::{Complex, DMatrix, Matrix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::simpson;
use crate::units::ZEEMAN_RAD_PER_US_PER_T;

pub type C64 = Complex<f64>;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

/// Single-qubit Pauli operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub const ALL: [Pauli; 4] = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];

    pub fn matrix(self) -> Matrix2<C64> {
        match self {
            Pauli::I => Matrix2::new(ONE, ZERO, ZERO, ONE),
            Pauli::X => Matrix2::new(ZERO, ONE, ONE, ZERO),
            Pauli::Y => Matrix2::new(ZERO, -I, I, ZERO),
            Pauli::Z => Matrix2::new(ONE, ZERO, ZERO, -ONE),
        }
    }
}

/// Rotation axis in the equatorial plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationAxis {
    X,
    Y,
}

impl RotationAxis {
    pub fn phase(self) -> f64 {
        match self {
            RotationAxis::X => 0.0,
            RotationAxis::Y => std::f64::consts::FRAC_PI_2,
        }
    }
}

/// `exp(−iθ (cos φ X + sin φ Y) / 2)`.
pub fn rotation_matrix(theta: f64, phi: f64) -> Matrix2<C64> {
    let c = C64::new((theta / 2.0).cos(), 0.0);
    let s = (theta / 2.0).sin();
    // −i s (cos φ X + sin φ Y) = −i s [[0, e^{−iφ}], [e^{iφ}, 0]]
    let off_up = -I * s * C64::from_polar(1.0, -phi);
    let off_dn = -I * s * C64::from_polar(1.0, phi);
    Matrix2::new(c, off_up, off_dn, c)
}

/// `exp(−iφ Z / 2)`.
pub fn z_rotation_matrix(phi: f64) -> Matrix2<C64> {
    Matrix2::new(
        C64::from_polar(1.0, -phi / 2.0),
        ZERO,
        ZERO,
        C64::from_polar(1.0, phi / 2.0),
    )
}

/// Kronecker product of dense complex matrices.
pub fn kron(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

fn to_dynamic(m: &Matrix2<C64>) -> DMatrix<C64> {
    DMatrix::from_fn(2, 2, |i, j| m[(i, j)])
}

/// `op` acting on qubit `k` of `n`.
pub fn embed(op: &Matrix2<C64>, k: usize, n: usize) -> DMatrix<C64> {
    let mut full = DMatrix::from_element(1, 1, ONE);
    for q in 0..n {
        let f = if q == k {
            to_dynamic(op)
        } else {
            DMatrix::identity(2, 2)
        };
        full = kron(&full, &f);
    }
    full
}

/// Tensor product of Paulis, first entry on qubit 0.
pub fn pauli_string(ps: &[Pauli]) -> DMatrix<C64> {
    ps.iter()
        .fold(DMatrix::from_element(1, 1, ONE), |acc, p| kron(&acc, &to_dynamic(&p.matrix())))
}

/// Joint state of labeled ions as a density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QubitRegister {
    labels: Vec<String>,
    rho: DMatrix<C64>,
}

impl QubitRegister {
    /// All ions in `|↑⟩`, the optically pumped state.
    pub fn new<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let bits = vec![true; labels.len()];
        Self::from_bits(labels, &bits)
    }

    /// Product state with ion `k` in `|↑⟩` when `bits[k]`.
    pub fn from_bits<S: AsRef<str>>(labels: &[S], bits: &[bool]) -> Result<Self> {
        let n = labels.len();
        if n == 0 || n > 6 || bits.len() != n {
            return Err(Error::Qubit(format!("register of {n} ions with {} bits", bits.len())));
        }
        let labels: Vec<String> = labels.iter().map(|s| s.as_ref().to_string()).collect();
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Qubit(format!("duplicate ion label {l}")));
            }
        }
        let idx = bits
            .iter()
            .fold(0usize, |acc, b| (acc << 1) | usize::from(*b));
        let dim = 1 << n;
        let mut rho = DMatrix::from_element(dim, dim, ZERO);
        rho[(idx, idx)] = ONE;
        Ok(Self { labels, rho })
    }

    /// Pure state from an amplitude vector.
    pub fn from_amplitudes<S: AsRef<str>>(labels: &[S], psi: &[C64]) -> Result<Self> {
        let mut r = Self::new(labels)?;
        if psi.len() != r.dim() {
            return Err(Error::Qubit("amplitude vector has the wrong dimension".into()));
        }
        let norm: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
        r.rho = DMatrix::from_fn(psi.len(), psi.len(), |i, j| psi[i] * psi[j].conj() / norm);
        Ok(r)
    }

    pub fn from_density<S: AsRef<str>>(labels: &[S], rho: DMatrix<C64>) -> Result<Self> {
        let mut r = Self::new(labels)?;
        if rho.shape() != (r.dim(), r.dim()) {
            return Err(Error::Qubit("density matrix has the wrong dimension".into()));
        }
        r.rho = rho;
        Ok(r)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_qubits(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        1 << self.labels.len()
    }

    pub fn density(&self) -> &DMatrix<C64> {
        &self.rho
    }

    pub fn index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Qubit(format!("unknown ion {label}")))
    }

    pub fn trace(&self) -> f64 {
        self.rho.trace().re
    }

    /// Applies a single-qubit unitary to ion `k`.
    pub fn apply(&mut self, k: usize, u: &Matrix2<C64>) {
        let full = embed(u, k, self.n_qubits());
        self.rho = &full * &self.rho * full.adjoint();
    }

    /// Applies a single-qubit channel given by Kraus operators to ion `k`.
    pub fn apply_kraus(&mut self, k: usize, ops: &[Matrix2<C64>]) {
        let n = self.n_qubits();
        let mut out = DMatrix::from_element(self.dim(), self.dim(), ZERO);
        for op in ops {
            let full = embed(op, k, n);
            out += &full * &self.rho * full.adjoint();
        }
        self.rho = out;
    }

    /// Rotation by `angle` about `cos(φ)X + sin(φ)Y` with `φ = axis phase + phase_offset`.
    pub fn rotate(&mut self, label: &str, axis: RotationAxis, angle: f64, phase_offset: f64) -> Result<()> {
        let k = self.index(label)?;
        self.apply(k, &rotation_matrix(angle, axis.phase() + phase_offset));
        Ok(())
    }

    /// Phase accumulation as a Z rotation `exp(−iφZ/2)`.
    pub fn phase(&mut self, label: &str, phi: f64) -> Result<()> {
        let k = self.index(label)?;
        self.apply(k, &z_rotation_matrix(phi));
        Ok(())
    }

    /// Optical pumping to `|↑⟩`, ending in `|↓⟩` with probability `error`.
    pub fn reset(&mut self, label: &str, error: f64) -> Result<()> {
        let k = self.index(label)?;
        let a = (1.0 - error).sqrt();
        let b = error.sqrt();
        let up_up = Matrix2::new(ZERO, ZERO, ZERO, ONE * a);
        let up_dn = Matrix2::new(ZERO, ZERO, ONE * a, ZERO);
        let dn_up = Matrix2::new(ZERO, ONE * b, ZERO, ZERO);
        let dn_dn = Matrix2::new(ONE * b, ZERO, ZERO, ZERO);
        self.apply_kraus(k, &[up_up, up_dn, dn_up, dn_dn]);
        Ok(())
    }

    /// Removes all coherence of ion `label` in the Z basis (shelving or measurement).
    pub fn dephase(&mut self, label: &str) -> Result<()> {
        let k = self.index(label)?;
        let p0 = Matrix2::new(ONE, ZERO, ZERO, ZERO);
        let p1 = Matrix2::new(ZERO, ZERO, ZERO, ONE);
        self.apply_kraus(k, &[p0, p1]);
        Ok(())
    }

    /// Depolarizing channel `ρ → (1 − p)ρ + p Tr_k(ρ) ⊗ 𝟙/2`.
    pub fn depolarize(&mut self, label: &str, p: f64) -> Result<()> {
        if p <= 0.0 {
            return Ok(());
        }
        let k = self.index(label)?;
        let ops: Vec<Matrix2<C64>> = Pauli::ALL
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let w = if i == 0 { 1.0 - 0.75 * p } else { 0.25 * p };
                q.matrix() * C64::new(w.sqrt(), 0.0)
            })
            .collect();
        self.apply_kraus(k, &ops);
        Ok(())
    }

    /// Joint Z-basis probabilities indexed by basis state.
    pub fn probabilities(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.rho[(i, i)].re.max(0.0)).collect()
    }

    /// Probabilities over the ions in `labels`, in that bit order (first = MSB).
    pub fn marginal<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<f64>> {
        let n = self.n_qubits();
        let idx: Vec<usize> = labels.iter().map(|l| self.index(l.as_ref())).collect::<Result<_>>()?;
        let mut out = vec![0.0; 1 << idx.len()];
        for (b, p) in self.probabilities().into_iter().enumerate() {
            let key = idx
                .iter()
                .fold(0usize, |acc, k| (acc << 1) | ((b >> (n - 1 - k)) & 1));
            out[key] += p;
        }
        Ok(out)
    }

    /// `Tr(ρ P)` for a Pauli string in register order.
    pub fn expectation(&self, ps: &[Pauli]) -> Result<f64> {
        if ps.len() != self.n_qubits() {
            return Err(Error::Qubit("Pauli string length differs from register size".into()));
        }
        Ok((pauli_string(ps) * &self.rho).trace().re)
    }

    /// Fidelity `⟨ψ|ρ|ψ⟩` with a pure state.
    pub fn fidelity_pure(&self, psi: &[C64]) -> f64 {
        let mut f = ZERO;
        for i in 0..psi.len() {
            for j in 0..psi.len() {
                f += psi[i].conj() * self.rho[(i, j)] * psi[j];
            }
        }
        f.re
    }

    /// Samples Z-basis outcomes over the ions in `labels` and passes each bit
    /// through the readout confusion model.
    pub fn measure<S: AsRef<str>, R: Rng + ?Sized>(
        &self,
        labels: &[S],
        readout: &ReadoutModel,
        shots: usize,
        rng: &mut R,
    ) -> Result<Vec<u32>> {
        let probs = self.marginal(labels)?;
        Ok(sample_shots(&probs, labels.len(), readout, shots, rng))
    }
}

/// Draws `shots` bitstrings from `probs` over `n` bits and applies readout errors.
pub fn sample_shots<R: Rng + ?Sized>(
    probs: &[f64],
    n: usize,
    readout: &ReadoutModel,
    shots: usize,
    rng: &mut R,
) -> Vec<u32> {
    let total: f64 = probs.iter().sum();
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in probs {
        acc += p / total;
        cdf.push(acc);
    }
    (0..shots)
        .map(|_| {
            let u: f64 = rng.random();
            let truth = cdf.iter().position(|c| u < *c).unwrap_or(probs.len() - 1) as u32;
            readout.corrupt(truth, n, rng)
        })
        .collect()
}

/// Per-ion fluorescence readout errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadoutModel {
    /// Probability that a shelved `|↑⟩` ion is detected bright.
    pub eps_up: f64,
    /// Probability that a `|↓⟩` ion is detected dark.
    pub eps_down: f64,
}

impl Default for ReadoutModel {
    fn default() -> Self {
        Self::ideal()
    }
}

impl ReadoutModel {
    pub fn new(eps_up: f64, eps_down: f64) -> Result<Self> {
        let m = Self { eps_up, eps_down };
        m.validate()?;
        Ok(m)
    }

    pub fn ideal() -> Self {
        Self {
            eps_up: 0.0,
            eps_down: 0.0,
        }
    }

    pub fn symmetric(eps: f64) -> Result<Self> {
        Self::new(eps, eps)
    }

    pub fn validate(&self) -> Result<()> {
        for e in [self.eps_up, self.eps_down] {
            if !(0.0..0.5).contains(&e) {
                return Err(Error::Config(format!("readout error {e} outside [0, 0.5)")));
            }
        }
        Ok(())
    }

    /// Single-ion confusion matrix `C[measured][true]`, index 1 = dark.
    pub fn confusion(&self) -> [[f64; 2]; 2] {
        [
            [1.0 - self.eps_down, self.eps_up],
            [self.eps_down, 1.0 - self.eps_up],
        ]
    }

    /// Applies independent bit flips to an `n`-bit outcome.
    pub fn corrupt<R: Rng + ?Sized>(&self, truth: u32, n: usize, rng: &mut R) -> u32 {
        if self.eps_up == 0.0 && self.eps_down == 0.0 {
            return truth;
        }
        let mut out = truth;
        for k in 0..n {
            let bit = 1u32 << (n - 1 - k);
            let flip = if truth & bit != 0 { self.eps_up } else { self.eps_down };
            if rng.random::<f64>() < flip {
                out ^= bit;
            }
        }
        out
    }
}

/// Formats an outcome as a bit string, most significant ion first.
pub fn bitstring(outcome: u32, n: usize) -> String {
    (0..n)
        .map(|k| if outcome >> (n - 1 - k) & 1 == 1 { '1' } else { '0' })
        .collect()
}

/// Writes one `shot,bits` row per shot.
pub fn write_shots_csv<W: Write>(w: W, shots: &[u32], n: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["shot", "bits"])?;
    for (i, s) in shots.iter().enumerate() {
        w.write_record([i.to_string(), bitstring(*s, n)])?;
    }
    w.flush()?;
    Ok(())
}

/// Magnetic field deviation from its LIZ value along the trap axis:
/// `ΔB(x) = g₁ (x − x_LIZ) + g₂ (x − x_LIZ)²` in tesla.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldMap {
    pub x_liz: f64,
    /// T/µm
    pub gradient: f64,
    /// T/µm²
    pub curvature: f64,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            x_liz: 0.0,
            gradient: 1e-10,
            curvature: 1e-13,
        }
    }
}

impl FieldMap {
    pub fn zero() -> Self {
        Self {
            x_liz: 0.0,
            gradient: 0.0,
            curvature: 0.0,
        }
    }

    pub fn delta_b(&self, x: f64) -> f64 {
        let d = x - self.x_liz;
        self.gradient * d + self.curvature * d * d
    }

    /// Qubit frequency shift in rad/µs at `x`.
    pub fn detuning(&self, x: f64) -> f64 {
        ZEEMAN_RAD_PER_US_PER_T * self.delta_b(x)
    }
}

/// Axial position of one ion versus time, linear between knots.
///
/// Knots may share a time stamp, which represents a jump.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionHistory {
    knots: Vec<(f64, f64)>,
}

impl PositionHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(t: f64, x: f64) -> Self {
        Self { knots: vec![(t, x)] }
    }

    pub fn push(&mut self, t: f64, x: f64) -> Result<()> {
        if let Some((tl, _)) = self.knots.last() {
            if t < *tl {
                return Err(Error::Qubit(format!("history knot at {t} precedes {tl}")));
            }
        }
        self.knots.push((t, x));
        Ok(())
    }

    /// Extends the history by holding the last position until `t`.
    pub fn hold_until(&mut self, t: f64) -> Result<()> {
        let x = self.knots.last().map(|k| k.1).ok_or_else(|| Error::Qubit("empty history".into()))?;
        self.push(t, x)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn start(&self) -> Option<f64> {
        self.knots.first().map(|k| k.0)
    }

    pub fn end(&self) -> Option<f64> {
        self.knots.last().map(|k| k.0)
    }

    /// Position at `t`; at a jump the later value is returned.
    pub fn at(&self, t: f64) -> Option<f64> {
        let (start, end) = (self.start()?, self.end()?);
        if t < start || t > end {
            return None;
        }
        let i = self.knots.partition_point(|k| k.0 <= t);
        if i == 0 {
            return Some(self.knots[0].1);
        }
        if i == self.knots.len() {
            return Some(self.knots[i - 1].1);
        }
        let (t0, x0) = self.knots[i - 1];
        let (t1, x1) = self.knots[i];
        Some(x0 + (x1 - x0) * (t - t0) / (t1 - t0))
    }

    /// Position at the last knot.
    pub fn last(&self) -> Option<f64> {
        self.knots.last().map(|k| k.1)
    }
}

/// `φ = (μ_B g_J/ħ) ∫ ΔB(x(t)) dt` over `[t0, t1]`.
///
/// The integrand is smooth between knots, so Simpson's rule is applied on
/// each knot interval separately. With the polynomial field map and linear
/// motion between knots the result is exact.
pub fn accumulate_phase(history: &PositionHistory, field: &FieldMap, t0: f64, t1: f64) -> Result<f64> {
    if t1 < t0 {
        return Err(Error::Qubit(format!("phase window [{t0}, {t1}] is reversed")));
    }
    let (start, end) = match (history.start(), history.end()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Qubit("empty position history".into())),
    };
    let slack = 1e-9 * (1.0 + t1.abs());
    if t0 < start - slack || t1 > end + slack {
        return Err(Error::Qubit(format!(
            "position history [{start}, {end}] does not cover [{t0}, {t1}]"
        )));
    }
    let mut phase = 0.0;
    for w in history.knots.windows(2) {
        let ((ta, xa), (tb, xb)) = (w[0], w[1]);
        let a = ta.max(t0);
        let b = tb.min(t1);
        if b <= a || tb <= ta {
            continue;
        }
        let x = |t: f64| xa + (xb - xa) * (t - ta) / (tb - ta);
        phase += simpson(|t| field.detuning(x(t)), a, b, 2);
    }
    Ok(phase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn close(a: C64, b: C64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn rx_pi_half_on_up() {
        let u = rotation_matrix(PI / 2.0, 0.0);
        // column |↑⟩ = index 1
        assert!(close(u[(1, 1)], C64::new(FRAC_1_SQRT_2, 0.0)));
        assert!(close(u[(0, 1)], C64::new(0.0, -FRAC_1_SQRT_2)));
    }

    #[test]
    fn ry_pi_half_on_up() {
        let u = rotation_matrix(PI / 2.0, PI / 2.0);
        assert!(close(u[(1, 1)], C64::new(FRAC_1_SQRT_2, 0.0)));
        assert!(close(u[(0, 1)], C64::new(-FRAC_1_SQRT_2, 0.0)));
    }

    #[test]
    fn rx_pi_flips() {
        let mut r = QubitRegister::new(&["A"]).unwrap();
        r.rotate("A", RotationAxis::X, PI, 0.0).unwrap();
        assert!((r.probabilities()[0] - 1.0).abs() < 1e-12);
        assert!(r.rotate("Q", RotationAxis::X, PI, 0.0).is_err());
    }

    #[test]
    fn phase_offset_cancels_accumulated_phase() {
        let mut r = QubitRegister::new(&["A"]).unwrap();
        r.rotate("A", RotationAxis::X, PI / 2.0, 0.0).unwrap();
        r.phase("A", 0.83).unwrap();
        r.rotate("A", RotationAxis::X, -PI / 2.0, 0.83).unwrap();
        assert!((r.probabilities()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn readout_confusion_columns_sum_to_one() {
        let m = ReadoutModel::new(0.02, 0.05).unwrap();
        let c = m.confusion();
        for t in 0..2 {
            assert!((c[0][t] + c[1][t] - 1.0).abs() < 1e-15);
        }
        assert!(ReadoutModel::new(0.5, 0.0).is_err());
    }

    #[test]
    fn measurement_is_seeded() {
        let r = QubitRegister::from_amplitudes(
            &["A", "B"],
            &[ZERO, ONE, ONE, ZERO],
        )
        .unwrap();
        let m = ReadoutModel::ideal();
        let a = r.measure(&["A", "B"], &m, 1000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = r.measure(&["A", "B"], &m, 1000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| *s == 1 || *s == 2));
    }

    #[test]
    fn reset_with_error_mixes() {
        let mut r = QubitRegister::from_bits(&["A", "B"], &[false, true]).unwrap();
        r.reset("A", 0.1).unwrap();
        let p = r.marginal(&["A"]).unwrap();
        assert!((p[1] - 0.9).abs() < 1e-12);
        assert!((r.trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn depolarize_fully_mixes() {
        let mut r = QubitRegister::new(&["A"]).unwrap();
        r.depolarize("A", 1.0).unwrap();
        assert!((r.probabilities()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn phase_at_liz_is_zero_and_linear_elsewhere() {
        let f = FieldMap::default();
        let mut h = PositionHistory::starting_at(0.0, 0.0);
        h.hold_until(100.0).unwrap();
        assert_eq!(accumulate_phase(&h, &f, 0.0, 100.0).unwrap(), 0.0);
        let mut h = PositionHistory::starting_at(0.0, 600.0);
        h.hold_until(100.0).unwrap();
        let p = accumulate_phase(&h, &f, 10.0, 60.0).unwrap();
        assert!((p - f.detuning(600.0) * 50.0).abs() < 1e-12);
        assert!(accumulate_phase(&h, &f, 50.0, 150.0).is_err());
    }
}
