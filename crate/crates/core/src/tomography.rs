//! Linear-inversion state and process tomography, readout-error correction
//! and register truth tables.
//!
//! Outcomes use the readout convention of [`crate::qubit`]: bit 1 is a dark
//! ion, i.e. `|↑⟩ = |1⟩`, which is the `−1` eigenstate of `Z`. Qubit 0 is
//! the most significant bit.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qubit::{pauli_string, rotation_matrix, Pauli, ReadoutModel, C64};
use crate::rng::child_rng;
use crate::sequence::{
    build_swap_tomography, build_three_ion_reorder, run, RunMode, SequenceReport, SingleQubitOp, TwoIonProcess, World,
};

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Observable measured by a Z readout after `op`, as `sign · pauli`.
pub fn measured_pauli(op: SingleQubitOp) -> (Pauli, f64) {
    let (axis, angle) = op.rotation();
    let u = rotation_matrix(angle, axis.phase());
    let m = u.adjoint() * Pauli::Z.matrix() * u;
    for p in [Pauli::X, Pauli::Y, Pauli::Z] {
        let c = (p.matrix() * m).trace().re / 2.0;
        if (c.abs() - 1.0).abs() < 1e-9 {
            return (p, c.signum());
        }
    }
    unreachable!("analysis rotations map Z onto a Pauli axis")
}

/// All Pauli strings on `n` qubits, qubit 0 varying slowest.
pub fn pauli_basis(n: usize) -> Vec<Vec<Pauli>> {
    (0..4usize.pow(n as u32))
        .map(|m| (0..n).map(|k| Pauli::ALL[(m >> (2 * (n - 1 - k))) & 3]).collect())
        .collect()
}

pub fn pauli_label(ps: &[Pauli]) -> String {
    ps.iter()
        .map(|p| match p {
            Pauli::I => 'I',
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ComplexMatrixJson {
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

impl ComplexMatrixJson {
    fn from(m: &DMatrix<C64>) -> Self {
        let rows = |f: &dyn Fn(C64) -> f64| (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| f(m[(i, j)])).collect()).collect();
        Self {
            re: rows(&|c| c.re),
            im: rows(&|c| c.im),
        }
    }
}

/// Density matrix of one or more qubits from linear inversion.
///
/// Positivity is not enforced; see [`DensityMatrix::nearest_physical`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    rho: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn new(rho: DMatrix<C64>) -> Result<Self> {
        let d = rho.nrows();
        if d < 2 || !d.is_power_of_two() || rho.ncols() != d {
            return Err(Error::Tomography(format!("{}x{} is not a qubit density matrix", d, rho.ncols())));
        }
        let herm = (&rho - rho.adjoint()).camax();
        if herm > 1e-12 {
            return Err(Error::Tomography(format!("matrix is not Hermitian ({herm:.1e})")));
        }
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > 1e-10 || tr.im.abs() > 1e-10 {
            return Err(Error::Tomography(format!("trace {tr} differs from 1")));
        }
        Ok(Self { rho })
    }

    /// `|ψ⟩⟨ψ|` for a normalized amplitude vector.
    pub fn pure(psi: &[C64]) -> Result<Self> {
        let norm: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
        let rho = DMatrix::from_fn(psi.len(), psi.len(), |i, j| psi[i] * psi[j].conj() / norm);
        Self::new(rho)
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.rho
    }

    pub fn n_qubits(&self) -> usize {
        self.rho.nrows().trailing_zeros() as usize
    }

    pub fn expectation(&self, ps: &[Pauli]) -> f64 {
        (pauli_string(ps) * &self.rho).trace().re
    }

    /// `⟨ψ|ρ|ψ⟩`.
    pub fn fidelity_pure(&self, psi: &[C64]) -> f64 {
        let v = nalgebra::DVector::from_column_slice(psi);
        (v.adjoint() * &self.rho * &v)[(0, 0)].re
    }

    /// Smallest eigenvalue; negative for unphysical reconstructions.
    pub fn min_eigenvalue(&self) -> f64 {
        self.rho.clone().symmetric_eigen().eigenvalues.min()
    }

    /// Closest positive semidefinite matrix of unit trace in Frobenius norm.
    pub fn nearest_physical(&self) -> Self {
        let e = self.rho.clone().symmetric_eigen();
        let mut lam: Vec<f64> = e.eigenvalues.iter().copied().collect();
        // Project the spectrum onto the probability simplex.
        let mut sorted = lam.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut cum = 0.0;
        let mut theta = 0.0;
        for (k, v) in sorted.iter().enumerate() {
            cum += v;
            let t = (cum - 1.0) / (k as f64 + 1.0);
            if v - t > 0.0 {
                theta = t;
            }
        }
        for v in lam.iter_mut() {
            *v = (*v - theta).max(0.0);
        }
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(lam.len(), lam.iter().map(|v| C64::new(*v, 0.0))));
        let rho = &e.eigenvectors * d * e.eigenvectors.adjoint();
        Self {
            rho: (&rho + rho.adjoint()) * C64::new(0.5, 0.0),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ComplexMatrixJson::from(&self.rho))?)
    }
}

/// Counts (or probabilities) of one analysis setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingCounts {
    /// Analysis operation per qubit.
    pub analysis: Vec<SingleQubitOp>,
    /// Weight of each outcome, indexed by bit string with qubit 0 as MSB.
    pub counts: Vec<f64>,
}

impl SettingCounts {
    fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Mean of the product of the `±1` Z values of the qubits in `mask`.
    fn parity(&self, n: usize, mask: &[bool]) -> f64 {
        let mut s = 0.0;
        for (o, c) in self.counts.iter().enumerate() {
            let ones = (0..n).filter(|k| mask[*k] && (o >> (n - 1 - k)) & 1 == 1).count();
            s += if ones % 2 == 0 { *c } else { -*c };
        }
        s / self.total()
    }
}

/// Linear-inversion state estimate from Z readouts after analysis rotations.
///
/// Every Pauli expectation value is averaged over all settings whose
/// analysis measures it, weighted by their counts; correlators with
/// identities come from marginals of the full settings.
pub fn state_from_counts(settings: &[SettingCounts]) -> Result<DensityMatrix> {
    let n = settings
        .first()
        .map(|s| s.analysis.len())
        .ok_or_else(|| Error::Tomography("no settings".into()))?;
    if n == 0 || n > 4 {
        return Err(Error::Tomography(format!("{n} qubits not supported")));
    }
    for s in settings {
        if s.analysis.len() != n || s.counts.len() != 1 << n {
            return Err(Error::Tomography("settings disagree on the number of qubits".into()));
        }
        if !(s.total() > 0.0) || s.counts.iter().any(|c| !c.is_finite()) {
            return Err(Error::Tomography("setting without shots".into()));
        }
    }
    let measured: Vec<Vec<(Pauli, f64)>> = settings
        .iter()
        .map(|s| s.analysis.iter().map(|op| measured_pauli(*op)).collect())
        .collect();
    let d = 1 << n;
    let mut rho = DMatrix::from_element(d, d, ZERO);
    for ps in pauli_basis(n) {
        let value = if ps.iter().all(|p| *p == Pauli::I) {
            1.0
        } else {
            let mask: Vec<bool> = ps.iter().map(|p| *p != Pauli::I).collect();
            let (mut num, mut den) = (0.0, 0.0);
            for (s, m) in settings.iter().zip(&measured) {
                if !(0..n).all(|k| !mask[k] || m[k].0 == ps[k]) {
                    continue;
                }
                let sign: f64 = (0..n).filter(|k| mask[*k]).map(|k| m[k].1).product();
                let w = s.total();
                num += w * sign * s.parity(n, &mask);
                den += w;
            }
            if den == 0.0 {
                return Err(Error::Tomography(format!("no setting measures {}", pauli_label(&ps))));
            }
            num / den
        };
        rho += pauli_string(&ps) * C64::new(value / d as f64, 0.0);
    }
    let rho = (&rho + rho.adjoint()) * C64::new(0.5, 0.0);
    DensityMatrix::new(rho)
}

/// Input state of a preparation setting: every qubit pumped to `|↑⟩`, then rotated.
pub fn preparation_state(ops: &[SingleQubitOp]) -> DensityMatrix {
    let mut psi = nalgebra::DVector::from_element(1, ONE);
    for op in ops {
        let (axis, angle) = op.rotation();
        let u = rotation_matrix(angle, axis.phase());
        let q = nalgebra::DVector::from_column_slice(&[u[(0, 1)], u[(1, 1)]]);
        psi = psi.kronecker(&q);
    }
    DensityMatrix::pure(psi.as_slice()).expect("rotations of a basis state are normalized")
}

/// Process matrix in the Pauli basis, `E(ρ) = Σ χ_mn P_m ρ P_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiMatrix {
    n_qubits: usize,
    chi: DMatrix<C64>,
}

impl ChiMatrix {
    pub fn new(n_qubits: usize, chi: DMatrix<C64>) -> Result<Self> {
        let dim = 4usize.pow(n_qubits as u32);
        if chi.nrows() != dim || chi.ncols() != dim {
            return Err(Error::Tomography("chi matrix has the wrong dimension".into()));
        }
        Ok(Self { n_qubits, chi })
    }

    /// χ of the unitary channel `ρ ↦ U ρ U†`.
    pub fn from_unitary(u: &DMatrix<C64>) -> Result<Self> {
        let d = u.nrows();
        if d < 2 || !d.is_power_of_two() || u.ncols() != d {
            return Err(Error::Tomography("unitary has the wrong dimension".into()));
        }
        let n = d.trailing_zeros() as usize;
        let coeff: Vec<C64> = pauli_basis(n)
            .iter()
            .map(|ps| (pauli_string(ps).adjoint() * u).trace() / d as f64)
            .collect();
        let chi = DMatrix::from_fn(coeff.len(), coeff.len(), |m, k| coeff[m] * coeff[k].conj());
        Self::new(n, chi)
    }

    pub fn identity(n_qubits: usize) -> Self {
        Self::from_unitary(&DMatrix::identity(1 << n_qubits, 1 << n_qubits)).expect("valid dimension")
    }

    pub fn swap() -> Self {
        let mut u = DMatrix::from_element(4, 4, ZERO);
        for (i, j) in [(0, 0), (1, 2), (2, 1), (3, 3)] {
            u[(i, j)] = ONE;
        }
        Self::from_unitary(&u).expect("valid dimension")
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.chi
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn labels(&self) -> Vec<String> {
        pauli_basis(self.n_qubits).iter().map(|p| pauli_label(p)).collect()
    }

    pub fn apply(&self, rho: &DMatrix<C64>) -> DMatrix<C64> {
        let basis: Vec<DMatrix<C64>> = pauli_basis(self.n_qubits).iter().map(|p| pauli_string(p)).collect();
        let d = rho.nrows();
        let mut out = DMatrix::from_element(d, d, ZERO);
        for (m, pm) in basis.iter().enumerate() {
            let left = pm * rho;
            for (k, pk) in basis.iter().enumerate() {
                let c = self.chi[(m, k)];
                if c != ZERO {
                    out += &left * pk.adjoint() * c;
                }
            }
        }
        out
    }

    /// `‖Σ χ_mn P_n† P_m − I‖_max`, zero for a trace-preserving process.
    pub fn trace_preservation_residual(&self) -> f64 {
        let basis: Vec<DMatrix<C64>> = pauli_basis(self.n_qubits).iter().map(|p| pauli_string(p)).collect();
        let d = 1 << self.n_qubits;
        let mut s = DMatrix::from_element(d, d, ZERO);
        for (m, pm) in basis.iter().enumerate() {
            for (k, pk) in basis.iter().enumerate() {
                s += pk.adjoint() * pm * self.chi[(m, k)];
            }
        }
        (s - DMatrix::<C64>::identity(d, d)).camax()
    }

    /// Elements sorted by decreasing magnitude: `(row, col, |χ|, arg χ)`.
    pub fn largest(&self, count: usize) -> Vec<(usize, usize, f64, f64)> {
        let mut all: Vec<(usize, usize, f64, f64)> = (0..self.chi.nrows())
            .flat_map(|i| (0..self.chi.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, self.chi[(i, j)].norm(), self.chi[(i, j)].arg()))
            .collect();
        all.sort_by(|a, b| b.2.total_cmp(&a.2));
        all.truncate(count);
        all
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out {
            labels: Vec<String>,
            #[serde(flatten)]
            m: ComplexMatrixJson,
        }
        Ok(serde_json::to_string_pretty(&Out {
            labels: self.labels(),
            m: ComplexMatrixJson::from(&self.chi),
        })?)
    }

    /// Bar-plot table: one row per element with magnitude and phase.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let labels = self.labels();
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["row", "col", "abs", "phase"])?;
        for i in 0..self.chi.nrows() {
            for j in 0..self.chi.ncols() {
                let c = self.chi[(i, j)];
                w.write_record([labels[i].clone(), labels[j].clone(), c.norm().to_string(), c.arg().to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Second linear inversion: solves `E(ρ_j) = Σ χ_mn P_m ρ_j P_n` for χ.
///
/// The result is made Hermitian and normalized to unit trace.
pub fn chi_from_states(inputs: &[DensityMatrix], outputs: &[DensityMatrix]) -> Result<ChiMatrix> {
    if inputs.is_empty() || inputs.len() != outputs.len() {
        return Err(Error::Tomography("need one output per input state".into()));
    }
    let d = inputs[0].matrix().nrows();
    if inputs.iter().chain(outputs).any(|r| r.matrix().nrows() != d) {
        return Err(Error::Tomography("states of different dimension".into()));
    }
    let n = d.trailing_zeros() as usize;
    let basis: Vec<DMatrix<C64>> = pauli_basis(n).iter().map(|p| pauli_string(p)).collect();
    let nb = basis.len();
    let rows = inputs.len() * d * d;
    let mut a = DMatrix::from_element(rows, nb * nb, ZERO);
    let mut b = nalgebra::DVector::from_element(rows, ZERO);
    for (j, (rin, rout)) in inputs.iter().zip(outputs).enumerate() {
        for (m, pm) in basis.iter().enumerate() {
            let left = pm * rin.matrix();
            for (k, pk) in basis.iter().enumerate() {
                let term = &left * pk.adjoint();
                for (e, v) in term.iter().enumerate() {
                    a[(j * d * d + e, m * nb + k)] = *v;
                }
            }
        }
        for (e, v) in rout.matrix().iter().enumerate() {
            b[j * d * d + e] = *v;
        }
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::Tomography("preparation set does not span operator space".into()));
    }
    let x = svd
        .solve(&b, 1e-12 * smax)
        .map_err(|e| Error::Tomography(format!("chi inversion failed: {e}")))?;
    let chi = DMatrix::from_fn(nb, nb, |m, k| x[m * nb + k]);
    let chi = (&chi + chi.adjoint()) * C64::new(0.5, 0.0);
    let tr = chi.trace().re;
    if !(tr.abs() > 1e-12) {
        return Err(Error::Tomography("reconstructed process has zero trace".into()));
    }
    ChiMatrix::new(n, chi / C64::new(tr, 0.0))
}

/// `Re Tr(χ_meas† χ_ideal)`.
pub fn process_fidelity(measured: &ChiMatrix, ideal: &ChiMatrix) -> f64 {
    (measured.matrix().adjoint() * ideal.matrix()).trace().re
}

/// Probabilities after inverting the readout confusion model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutCorrection {
    pub probabilities: Vec<f64>,
    /// Total negative probability removed by clipping.
    pub clipped: f64,
}

fn invert_confusion(counts: &[f64], models: &[ReadoutModel]) -> Result<Vec<f64>> {
    let n = models.len();
    if counts.len() != 1 << n {
        return Err(Error::Tomography(format!("{} outcomes for {n} ions", counts.len())));
    }
    let total: f64 = counts.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Tomography("no counts".into()));
    }
    let mut p: Vec<f64> = counts.iter().map(|c| c / total).collect();
    for (k, m) in models.iter().enumerate() {
        let c = m.confusion();
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::Tomography(format!("confusion matrix of ion {k} is singular")));
        }
        let inv = [[c[1][1] / det, -c[0][1] / det], [-c[1][0] / det, c[0][0] / det]];
        let bit = 1 << (n - 1 - k);
        for o in 0..p.len() {
            if o & bit == 0 {
                let (p0, p1) = (p[o], p[o | bit]);
                p[o] = inv[0][0] * p0 + inv[0][1] * p1;
                p[o | bit] = inv[1][0] * p0 + inv[1][1] * p1;
            }
        }
    }
    Ok(p)
}

/// Applies the inverse tensor-product confusion matrix, clips negative
/// entries and renormalizes.
pub fn readout_correct(counts: &[f64], models: &[ReadoutModel]) -> Result<ReadoutCorrection> {
    let mut p = invert_confusion(counts, models)?;
    let clipped: f64 = p.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    for v in p.iter_mut() {
        *v = v.max(0.0);
    }
    let s: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= s;
    }
    Ok(ReadoutCorrection { probabilities: p, clipped })
}

/// Inverse confusion map without clipping; entries may be slightly
/// negative but the estimate stays unbiased.
pub fn readout_invert(counts: &[f64], models: &[ReadoutModel]) -> Result<Vec<f64>> {
    invert_confusion(counts, models)
}

/// Input × output probabilities of a register permutation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// `probabilities[input][output]`, each row normalized.
    pub probabilities: Vec<Vec<f64>>,
    /// Index of the correct output for every input.
    pub expected: Vec<usize>,
}

impl TruthTable {
    /// Mean over inputs of the probability of the correct output.
    pub fn mean_fidelity(&self) -> f64 {
        let n = self.expected.len() as f64;
        self.probabilities.iter().zip(&self.expected).map(|(row, e)| row[*e]).sum::<f64>() / n
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["input".to_string()];
        header.extend(self.outputs.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in self.inputs.iter().zip(&self.probabilities) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Normalizes per-input histograms into a truth table over `n` bits.
pub fn truth_table_from_counts(counts: &[Vec<f64>], expected: &[usize], n: usize) -> Result<TruthTable> {
    if counts.len() != expected.len() || counts.is_empty() {
        return Err(Error::Tomography("one expected output per input row required".into()));
    }
    let dim = 1 << n;
    let mut rows = Vec::with_capacity(counts.len());
    for (row, e) in counts.iter().zip(expected) {
        if row.len() != dim || *e >= dim {
            return Err(Error::Tomography(format!("row of {} entries for {n} bits", row.len())));
        }
        let total: f64 = row.iter().sum();
        if total == 0.0 || !total.is_finite() {
            return Err(Error::Tomography("input without shots".into()));
        }
        rows.push(row.iter().map(|c| c / total).collect());
    }
    let labels: Vec<String> = (0..dim as u32).map(|o| crate::qubit::bitstring(o, n)).collect();
    Ok(TruthTable {
        inputs: labels[..counts.len().min(dim)].to_vec(),
        outputs: labels,
        probabilities: rows,
        expected: expected.to_vec(),
    })
}

/// Result of the full two-ion process tomography.
#[derive(Debug, Clone)]
pub struct ProcessTomography {
    pub process: TwoIonProcess,
    pub settings: usize,
    pub shots: usize,
    pub chi_raw: ChiMatrix,
    pub chi_corrected: ChiMatrix,
    pub fidelity_raw: f64,
    pub fidelity_corrected: f64,
    /// Largest clipped probability mass over all settings.
    pub max_clipped: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProcessTomographySummary {
    pub process: TwoIonProcess,
    pub settings: usize,
    pub shots: usize,
    pub fidelity_raw: f64,
    pub fidelity_corrected: f64,
    pub max_clipped: f64,
    pub trace_preservation_residual_raw: f64,
}

impl ProcessTomography {
    pub fn summary(&self) -> ProcessTomographySummary {
        ProcessTomographySummary {
            process: self.process,
            settings: self.settings,
            shots: self.shots,
            fidelity_raw: self.fidelity_raw,
            fidelity_corrected: self.fidelity_corrected,
            max_clipped: self.max_clipped,
            trace_preservation_residual_raw: self.chi_raw.trace_preservation_residual(),
        }
    }
}

/// Runs all 16 × 9 preparation/analysis settings of the two-ion sequence,
/// samples `shots` readouts per setting and reconstructs χ.
///
/// Setting `i` draws from the child stream `("tomography", i)` of `seed`,
/// so results do not depend on scheduling. Fidelities are taken against
/// `ideal`; correction assumes the world's readout model is known.
pub fn run_process_tomography(
    world: &World,
    process: TwoIonProcess,
    ideal: &ChiMatrix,
    shots: usize,
    seed: u64,
    mode: RunMode,
) -> Result<ProcessTomography> {
    if shots == 0 {
        return Err(Error::Config("shots must be positive".into()));
    }
    let preps: Vec<[SingleQubitOp; 2]> = SingleQubitOp::PREPARATIONS
        .iter()
        .flat_map(|a| SingleQubitOp::PREPARATIONS.iter().map(move |b| [*a, *b]))
        .collect();
    let analyses: Vec<[SingleQubitOp; 2]> = SingleQubitOp::ANALYSES
        .iter()
        .flat_map(|a| SingleQubitOp::ANALYSES.iter().map(move |b| [*a, *b]))
        .collect();
    let jobs: Vec<(usize, [SingleQubitOp; 2], [SingleQubitOp; 2])> = preps
        .iter()
        .flat_map(|p| analyses.iter().map(move |a| (*p, *a)))
        .enumerate()
        .map(|(i, (p, a))| (i, p, a))
        .collect();
    let readout = world.noise.readout;
    let counts: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|(i, prep, analysis)| {
            let seq = build_swap_tomography(&world.geometry, *prep, *analysis, process)?;
            let (_, outcome) = run(&seq, world, mode)?.into_result()?;
            let mut rng = child_rng(seed, "tomography", *i as u64);
            Ok(outcome.counts(shots, &readout, &mut rng).into_iter().map(|c| c as f64).collect())
        })
        .collect::<Result<_>>()?;

    let models = [readout, readout];
    let mut max_clipped: f64 = 0.0;
    let mut inputs = Vec::new();
    let mut raw_states = Vec::new();
    let mut corrected_states = Vec::new();
    for (k, prep) in preps.iter().enumerate() {
        let block = &counts[k * analyses.len()..(k + 1) * analyses.len()];
        let mut raw = Vec::new();
        let mut cor = Vec::new();
        for (a, c) in analyses.iter().zip(block) {
            raw.push(SettingCounts {
                analysis: a.to_vec(),
                counts: c.clone(),
            });
            let fixed = readout_correct(c, &models)?;
            max_clipped = max_clipped.max(fixed.clipped);
            cor.push(SettingCounts {
                analysis: a.to_vec(),
                counts: fixed.probabilities,
            });
        }
        inputs.push(preparation_state(prep));
        raw_states.push(state_from_counts(&raw)?);
        corrected_states.push(state_from_counts(&cor)?);
    }
    let chi_raw = chi_from_states(&inputs, &raw_states)?;
    let chi_corrected = chi_from_states(&inputs, &corrected_states)?;
    Ok(ProcessTomography {
        process,
        settings: jobs.len(),
        shots,
        fidelity_raw: process_fidelity(&chi_raw, ideal),
        fidelity_corrected: process_fidelity(&chi_corrected, ideal),
        chi_raw,
        chi_corrected,
        max_clipped,
    })
}

/// Truth tables of the three-ion reversal over all eight inputs.
#[derive(Debug, Clone, Serialize)]
pub struct ReorderExperiment {
    pub shots: usize,
    pub raw: TruthTable,
    /// Readout-corrected by unclipped linear inversion.
    pub corrected: TruthTable,
    pub fidelity_raw: f64,
    pub fidelity_corrected: f64,
    pub report: SequenceReport,
}

/// Runs the built-in reversal for every input, `shots` readouts each, from
/// child streams `("reorder", input)` of `seed`.
pub fn run_reorder_experiment(world: &World, shots: usize, seed: u64, mode: RunMode) -> Result<ReorderExperiment> {
    if shots == 0 {
        return Err(Error::Config("shots must be positive".into()));
    }
    let readout = world.noise.readout;
    let results: Vec<(Vec<f64>, usize, SequenceReport)> = (0..8u32)
        .into_par_iter()
        .map(|input| {
            let bits = [input & 4 != 0, input & 2 != 0, input & 1 != 0];
            let seq = build_three_ion_reorder(&world.geometry, bits, &world.config)?;
            let (report, outcome) = run(&seq, world, mode)?.into_result()?;
            let expected = outcome.slot_order.iter().fold(0usize, |acc, label| {
                let k = ["A", "B", "C"].iter().position(|l| l == label).expect("reorder ions");
                (acc << 1) | usize::from(bits[k])
            });
            let mut rng = child_rng(seed, "reorder", input as u64);
            let counts = outcome.counts(shots, &readout, &mut rng).into_iter().map(|c| c as f64).collect();
            Ok((counts, expected, report))
        })
        .collect::<Result<_>>()?;
    let counts: Vec<Vec<f64>> = results.iter().map(|r| r.0.clone()).collect();
    let expected: Vec<usize> = results.iter().map(|r| r.1).collect();
    let raw = truth_table_from_counts(&counts, &expected, 3)?;
    let models = [readout; 3];
    let corrected_counts: Vec<Vec<f64>> = counts.iter().map(|c| readout_invert(c, &models)).collect::<Result<_>>()?;
    let corrected = truth_table_from_counts(&corrected_counts, &expected, 3)?;
    Ok(ReorderExperiment {
        shots,
        fidelity_raw: raw.mean_fidelity(),
        fidelity_corrected: corrected.mean_fidelity(),
        raw,
        corrected,
        report: results.into_iter().next().expect("eight inputs").2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qubit::QubitRegister;

    fn exact_settings(rho: &DMatrix<C64>, n: usize) -> Vec<SettingCounts> {
        let ops = SingleQubitOp::ANALYSES;
        let mut out = Vec::new();
        for m in 0..3usize.pow(n as u32) {
            let analysis: Vec<SingleQubitOp> = (0..n).map(|k| ops[(m / 3usize.pow((n - 1 - k) as u32)) % 3]).collect();
            let labels: Vec<String> = (0..n).map(|k| k.to_string()).collect();
            let mut reg = QubitRegister::from_density(&labels, rho.clone()).unwrap();
            for (k, op) in analysis.iter().enumerate() {
                let (axis, angle) = op.rotation();
                reg.rotate(&labels[k], axis, angle, 0.0).unwrap();
            }
            out.push(SettingCounts {
                analysis,
                counts: reg.probabilities(),
            });
        }
        out
    }

    #[test]
    fn analysis_observables() {
        assert_eq!(measured_pauli(SingleQubitOp::Identity), (Pauli::Z, 1.0));
        assert_eq!(measured_pauli(SingleQubitOp::RxHalf), (Pauli::Y, 1.0));
        assert_eq!(measured_pauli(SingleQubitOp::RyHalf), (Pauli::X, -1.0));
    }

    #[test]
    fn exact_counts_recover_bell_state() {
        let s = 0.5f64.sqrt();
        let psi = [ZERO, C64::new(s, 0.0), C64::new(s, 0.0), ZERO];
        let truth = DensityMatrix::pure(&psi).unwrap();
        let est = state_from_counts(&exact_settings(truth.matrix(), 2)).unwrap();
        assert!((est.matrix() - truth.matrix()).camax() < 1e-12);
    }

    #[test]
    fn swap_chi_has_sixteen_quarter_elements() {
        let chi = ChiMatrix::swap();
        let big = chi.largest(17);
        for e in &big[..16] {
            assert!((e.2 - 0.25).abs() < 1e-12 && e.3.abs() < 1e-12);
        }
        assert!(big[16].2 < 1e-12);
        assert!((process_fidelity(&chi, &ChiMatrix::identity(2)) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn confusion_inversion_is_exact() {
        let models = [ReadoutModel::new(0.02, 0.03).unwrap(), ReadoutModel::symmetric(0.01).unwrap()];
        let truth = [0.1, 0.2, 0.3, 0.4];
        // forward: measured = (C0 ⊗ C1) truth
        let (c0, c1) = (models[0].confusion(), models[1].confusion());
        let mut meas = [0.0; 4];
        for (o, m) in meas.iter_mut().enumerate() {
            for (t, p) in truth.iter().enumerate() {
                *m += c0[o >> 1][t >> 1] * c1[o & 1][t & 1] * p;
            }
        }
        let back = readout_correct(&meas, &models).unwrap();
        for (a, b) in back.probabilities.iter().zip(truth) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(back.clipped, 0.0);
    }
}
