//! Shuttling and laser primitives composed into executable sequences.
//!
//! A sequence is run against a [`World`] (trap, field map, noise, timings).
//! The position ledger tracks which ions share which well; laser primitives
//! only act on ions held at the LIZ. In logical mode ions move piecewise
//! linearly between segment centers; in dynamical mode the whole filtered
//! voltage sequence is integrated and the ledger is checked against the
//! simulated motion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    find_equilibrium, integrate, mode_excitation, CrystalState, IntegrateOptions, ScheduledField,
};
use crate::error::{Error, Result};
use crate::filter::FilterModel;
use crate::qubit::{accumulate_phase, sample_shots, FieldMap, PositionHistory, QubitRegister, ReadoutModel, RotationAxis};
use crate::trap::{Channel, TrapGeometry, VoltageAssignment, SEGMENT_SPACING_UM};
use crate::waveform::{
    merge_schedule, separation_schedule, swap_schedule, transport_schedule, unequal_separation_schedule, SeparationParams,
    SwapRampParams, TransportParams, VoltageSchedule,
};

/// Wells closer than this (in segments) to a merge, swap or separation site
/// perturb the operation.
pub const STORAGE_DISTANCE: usize = 6;
/// Minimum distance (in segments) between two separate wells.
pub const MIN_WELL_DISTANCE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Transport,
    Separate,
    Merge,
    Swap,
    InitPump,
    Rotate,
    Shelve,
    Readout,
    Hold,
}

impl PrimitiveKind {
    pub fn is_shuttling(self) -> bool {
        matches!(
            self,
            PrimitiveKind::Transport | PrimitiveKind::Separate | PrimitiveKind::Merge | PrimitiveKind::Swap
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Moves the well at `from` with all its ions to `to`.
    Transport { from: usize, to: usize },
    /// Splits the well at `site`; the `left` leftmost ions end at `site − 1`,
    /// the rest at `site + 1`.
    Separate {
        site: usize,
        left: usize,
        #[serde(default)]
        bias: f64,
    },
    /// Joins the wells at `site ± 1` at `site`.
    Merge { site: usize },
    /// Exchanges the two ions held at `site`.
    Swap { site: usize },
    InitPump { ions: Vec<String> },
    Rotate {
        ion: String,
        axis: RotationAxis,
        angle: f64,
        /// Shift the pulse phase by the phase accumulated since the ion's last pulse.
        #[serde(default)]
        correct_phase: bool,
    },
    Shelve { ions: Vec<String> },
    Readout { ions: Vec<String> },
    Hold { duration: f64 },
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Transport { .. } => PrimitiveKind::Transport,
            Primitive::Separate { .. } => PrimitiveKind::Separate,
            Primitive::Merge { .. } => PrimitiveKind::Merge,
            Primitive::Swap { .. } => PrimitiveKind::Swap,
            Primitive::InitPump { .. } => PrimitiveKind::InitPump,
            Primitive::Rotate { .. } => PrimitiveKind::Rotate,
            Primitive::Shelve { .. } => PrimitiveKind::Shelve,
            Primitive::Readout { .. } => PrimitiveKind::Readout,
            Primitive::Hold { .. } => PrimitiveKind::Hold,
        }
    }

    /// Ions a laser primitive addresses.
    fn laser_targets(&self) -> Vec<&str> {
        match self {
            Primitive::InitPump { ions } | Primitive::Shelve { ions } | Primitive::Readout { ions } => {
                ions.iter().map(String::as_str).collect()
            }
            Primitive::Rotate { ion, .. } => vec![ion.as_str()],
            _ => Vec::new(),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Primitive::Transport { from, to } => format!("transport {from} -> {to}"),
            Primitive::Separate { site, left, bias } => {
                if *bias == 0.0 {
                    format!("separate at {site} ({left} left)")
                } else {
                    format!("separate at {site} ({left} left, bias {bias} V)")
                }
            }
            Primitive::Merge { site } => format!("merge at {site}"),
            Primitive::Swap { site } => format!("swap at {site}"),
            Primitive::InitPump { ions } => format!("init/pump {}", ions.join(",")),
            Primitive::Rotate {
                ion,
                axis,
                angle,
                correct_phase,
            } => format!(
                "rotate {ion} {axis:?}({:.4}){}",
                angle,
                if *correct_phase { " phase-corrected" } else { "" }
            ),
            Primitive::Shelve { ions } => format!("shelve {}", ions.join(",")),
            Primitive::Readout { ions } => format!("readout {}", ions.join(",")),
            Primitive::Hold { duration } => format!("hold {duration} us"),
        }
    }
}

/// Initial well of a sequence with its ions from left to right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Well {
    pub segment: usize,
    pub ions: Vec<String>,
}

/// An executable sequence.
///
/// `setup` primitives run first but are excluded from the operation counts
/// and time budget of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub name: String,
    pub wells: Vec<Well>,
    #[serde(default)]
    pub setup: Vec<Primitive>,
    pub body: Vec<Primitive>,
}

impl Sequence {
    pub fn ions(&self) -> Vec<String> {
        let mut ions: Vec<String> = self.wells.iter().flat_map(|w| w.ions.clone()).collect();
        ions.sort();
        ions
    }

    pub fn steps(&self) -> impl Iterator<Item = (Stage, &Primitive)> {
        self.setup
            .iter()
            .map(|p| (Stage::Setup, p))
            .chain(self.body.iter().map(|p| (Stage::Body, p)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Setup,
    Body,
}

/// Durations and waveform parameters of the primitives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub transport: TransportParams,
    pub separation: SeparationParams,
    pub swap: SwapRampParams,
    /// Hold after the programmed swap ramp (µs).
    pub swap_settle: f64,
    pub init_pump: f64,
    pub rotation: f64,
    pub shelve: f64,
    pub readout: f64,
    /// Manual axial bias trim added to the balanced three-ion split (V).
    pub three_ion_bias: f64,
    /// Pre-distort separation and merge waveforms against the filter model.
    pub precompensate: bool,
    /// In dynamical runs, `InitPump` also cools the motion of the ions in the
    /// laser zone to rest.
    pub init_cools: bool,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            transport: TransportParams::default(),
            separation: SeparationParams::default(),
            swap: SwapRampParams::default(),
            swap_settle: 20.0,
            init_pump: 20.0,
            rotation: 2.0,
            shelve: 20.0,
            readout: 80.0,
            three_ion_bias: 0.0,
            precompensate: true,
            init_cools: true,
        }
    }
}

impl SequenceConfig {
    pub fn duration(&self, p: &Primitive) -> f64 {
        match p {
            Primitive::Transport { from, to } => from.abs_diff(*to) as f64 * self.transport.per_pair_duration,
            Primitive::Separate { .. } | Primitive::Merge { .. } => self.separation.duration,
            Primitive::Swap { .. } => self.swap.duration + self.swap_settle,
            Primitive::InitPump { .. } => self.init_pump,
            Primitive::Rotate { .. } => self.rotation,
            Primitive::Shelve { .. } => self.shelve,
            Primitive::Readout { .. } => self.readout,
            Primitive::Hold { duration } => *duration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let durations = [
            self.transport.per_pair_duration,
            self.separation.duration,
            self.swap.duration,
            self.swap_settle,
            self.init_pump,
            self.rotation,
            self.shelve,
            self.readout,
        ];
        if durations.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::Config("primitive durations must be non-negative".into()));
        }
        self.swap.validate()
    }
}

/// Noise knobs of the qubit layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    pub readout: ReadoutModel,
    /// Probability that optical pumping leaves an ion in `|↓⟩`.
    pub init_error: f64,
    /// Z phase picked up by each ion during a swap (rad).
    pub swap_phase: f64,
    /// Systematic offset of the analysis pulse phase correction (rad).
    pub correction_phase_error: f64,
    /// Depolarization probability of an unshelved ion outside the LIZ per readout.
    pub remote_depolarization: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            readout: ReadoutModel::ideal(),
            init_error: 0.0,
            swap_phase: 0.0,
            correction_phase_error: 0.0,
            remote_depolarization: 0.0,
        }
    }
}

impl NoiseModel {
    pub fn ideal() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.readout.validate()?;
        for (name, p) in [("init_error", self.init_error), ("remote_depolarization", self.remote_depolarization)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Logical,
    Dynamical,
}

/// Everything a sequence runs against.
#[derive(Debug, Clone)]
pub struct World {
    pub geometry: TrapGeometry,
    pub field: FieldMap,
    pub noise: NoiseModel,
    pub config: SequenceConfig,
    pub filter: FilterModel,
    pub integrate: IntegrateOptions,
    /// Sampling interval of dynamical position histories (µs).
    pub record_interval: f64,
}

impl World {
    pub fn new(geometry: TrapGeometry) -> Self {
        let field = FieldMap {
            x_liz: geometry.liz_center(),
            ..FieldMap::default()
        };
        Self {
            geometry,
            field,
            noise: NoiseModel::ideal(),
            config: SequenceConfig::default(),
            filter: FilterModel::default(),
            integrate: IntegrateOptions::default(),
            record_interval: 0.1,
        }
    }
}

/// Which ions share which well.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ledger {
    wells: BTreeMap<usize, Vec<String>>,
}

impl Ledger {
    pub fn new(wells: &[Well]) -> std::result::Result<Self, String> {
        let mut l = Ledger::default();
        let mut seen = BTreeSet::new();
        for w in wells {
            if w.ions.is_empty() {
                return Err(format!("well at {} holds no ions", w.segment));
            }
            for ion in &w.ions {
                if !seen.insert(ion.clone()) {
                    return Err(format!("ion {ion} listed twice"));
                }
            }
            if l.wells.insert(w.segment, w.ions.clone()).is_some() {
                return Err(format!("two wells at segment {}", w.segment));
            }
        }
        Ok(l)
    }

    pub fn segment_of(&self, ion: &str) -> Option<usize> {
        self.wells
            .iter()
            .find(|(_, ions)| ions.iter().any(|i| i == ion))
            .map(|(s, _)| *s)
    }

    pub fn wells(&self) -> &BTreeMap<usize, Vec<String>> {
        &self.wells
    }

    /// Ions ordered along the trap axis.
    pub fn order(&self) -> Vec<String> {
        self.wells.values().flatten().cloned().collect()
    }

    fn others_within(&self, site: usize, exclude: &[usize], distance: usize) -> Vec<usize> {
        self.wells
            .keys()
            .copied()
            .filter(|s| !exclude.contains(s) && s.abs_diff(site) < distance)
            .collect()
    }

    /// Checks `p` against the current ledger and applies it.
    pub fn apply(&mut self, p: &Primitive, geometry: &TrapGeometry) -> std::result::Result<(), String> {
        let liz = geometry.liz_index;
        let exists = |s: usize| geometry.has_segment(s);
        match p {
            Primitive::Transport { from, to } => {
                if !exists(*to) {
                    return Err(format!("segment {to} does not exist"));
                }
                if !self.wells.contains_key(from) {
                    return Err(format!("no well at segment {from}"));
                }
                let (lo, hi) = (*from.min(to), *from.max(to));
                for s in self.wells.keys().filter(|s| *s != from) {
                    let d = if (lo..=hi).contains(s) {
                        0
                    } else {
                        s.abs_diff(lo).min(s.abs_diff(hi))
                    };
                    if d < MIN_WELL_DISTANCE {
                        return Err(format!("transport {from} -> {to} collides with the well at {s}"));
                    }
                }
                let ions = self.wells.remove(from).expect("checked");
                self.wells.insert(*to, ions);
            }
            Primitive::Separate { site, left, .. } => {
                let ions = self.wells.get(site).ok_or_else(|| format!("no well at segment {site}"))?;
                if ions.len() < 2 {
                    return Err(format!("separation at {site} needs co-trapped ions, found {}", ions.len()));
                }
                if *left == 0 || *left >= ions.len() {
                    return Err(format!("cannot leave {left} of {} ions on the left", ions.len()));
                }
                let (l, r) = (site.checked_sub(1).ok_or("no left neighbor")?, site + 1);
                if !exists(l) || !exists(r) {
                    return Err(format!("separation at {site} needs both neighbor segments"));
                }
                let near = self.others_within(*site, &[*site], STORAGE_DISTANCE);
                if !near.is_empty() {
                    return Err(format!("separation at {site} with wells at {near:?} closer than {STORAGE_DISTANCE} segments"));
                }
                let ions = self.wells.remove(site).expect("checked");
                self.wells.insert(l, ions[..*left].to_vec());
                self.wells.insert(r, ions[*left..].to_vec());
            }
            Primitive::Merge { site } => {
                let l = site.checked_sub(1).ok_or("no left neighbor")?;
                let r = site + 1;
                if !self.wells.contains_key(&l) || !self.wells.contains_key(&r) {
                    return Err(format!("merge at {site} needs wells at {l} and {r}"));
                }
                let near = self.others_within(*site, &[l, r], STORAGE_DISTANCE);
                if !near.is_empty() {
                    return Err(format!("merge at {site} with wells at {near:?} closer than {STORAGE_DISTANCE} segments"));
                }
                let mut ions = self.wells.remove(&l).expect("checked");
                ions.extend(self.wells.remove(&r).expect("checked"));
                self.wells.insert(*site, ions);
            }
            Primitive::Swap { site } => {
                let n = self.wells.get(site).map_or(0, Vec::len);
                if n != 2 {
                    return Err(format!("swap at {site} needs exactly two ions, found {n}"));
                }
                let near = self.others_within(*site, &[*site], STORAGE_DISTANCE);
                if !near.is_empty() {
                    return Err(format!("swap at {site} with wells at {near:?} closer than {STORAGE_DISTANCE} segments"));
                }
                self.wells.get_mut(site).expect("checked").reverse();
            }
            Primitive::Hold { duration } => {
                if !(*duration >= 0.0) {
                    return Err(format!("negative hold {duration}"));
                }
            }
            _ => {
                for ion in p.laser_targets() {
                    match self.segment_of(ion) {
                        None => return Err(format!("unknown ion {ion}")),
                        Some(s) if s != liz => {
                            return Err(format!("{} on ion {ion} at segment {s}, not at the LIZ ({liz})", p.describe()))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub stage: Stage,
    pub index: usize,
    pub message: String,
}

/// Static checks of a sequence; never fails, returns the list of violations.
pub fn validate(sequence: &Sequence, geometry: &TrapGeometry) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut ledger = match Ledger::new(&sequence.wells) {
        Ok(l) => l,
        Err(message) => {
            out.push(Violation {
                stage: Stage::Setup,
                index: 0,
                message,
            });
            return out;
        }
    };
    for w in &sequence.wells {
        if !geometry.has_segment(w.segment) {
            out.push(Violation {
                stage: Stage::Setup,
                index: 0,
                message: format!("initial well at missing segment {}", w.segment),
            });
        }
    }
    let mut read: BTreeSet<String> = BTreeSet::new();
    let mut counters = [0usize; 2];
    for (stage, p) in sequence.steps() {
        let idx = &mut counters[stage as usize];
        let index = *idx;
        *idx += 1;
        let mut push = |message: String| {
            out.push(Violation { stage, index, message });
        };
        if let Err(m) = ledger.apply(p, geometry) {
            push(m);
        }
        match p {
            Primitive::Rotate { ion, angle, .. } => {
                if read.contains(ion) {
                    push(format!("rotation on ion {ion} after its readout"));
                }
                if !angle.is_finite() {
                    push("non-finite rotation angle".into());
                }
            }
            Primitive::Readout { ions } => {
                for ion in ions {
                    if !read.insert(ion.clone()) {
                        push(format!("ion {ion} read out twice"));
                    }
                }
            }
            Primitive::InitPump { ions } => {
                for ion in ions {
                    read.remove(ion);
                }
            }
            _ => {}
        }
    }
    out
}

/// One executed primitive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub stage: Stage,
    pub kind: PrimitiveKind,
    pub description: String,
    pub start_us: f64,
    pub duration_us: f64,
    /// Spatial order of the ions after the primitive.
    pub order_after: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseCorrection {
    pub ion: String,
    pub phase: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicalSummary {
    pub max_abs_y: f64,
    pub final_positions: Vec<[f64; 3]>,
    /// Largest final mean phonon number over all modes, if the final
    /// configuration could be analyzed.
    pub final_max_n_bar: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub mode: RunMode,
    /// Operation counts of the body.
    pub counts: BTreeMap<PrimitiveKind, usize>,
    /// Body duration (µs).
    pub total_duration_us: f64,
    pub shuttling_duration_us: f64,
    pub shuttling_fraction: f64,
    pub setup_duration_us: f64,
    pub timeline: Vec<TimelineEntry>,
    pub final_order: Vec<String>,
    pub histories: BTreeMap<String, PositionHistory>,
    pub corrections: Vec<PhaseCorrection>,
    pub dynamical: Option<DynamicalSummary>,
    pub aborted: Option<String>,
}

impl SequenceReport {
    pub fn count(&self, kind: PrimitiveKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn total_duration_ms(&self) -> f64 {
        self.total_duration_us / 1000.0
    }

    /// Human-readable timeline.
    pub fn render_timeline(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>10} {:>9}  {:<6} {:<44} order", "start/us", "dur/us", "stage", "primitive");
        for e in &self.timeline {
            let stage = match e.stage {
                Stage::Setup => "setup",
                Stage::Body => "body",
            };
            let _ = writeln!(
                s,
                "{:>10.1} {:>9.1}  {:<6} {:<44} {}",
                e.start_us,
                e.duration_us,
                stage,
                e.description,
                e.order_after.join(" ")
            );
        }
        let _ = writeln!(
            s,
            "body: {:.3} ms, shuttling {:.1}%",
            self.total_duration_ms(),
            100.0 * self.shuttling_fraction
        );
        s
    }
}

/// Z-basis readout record of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Outcome {
    /// Read-out ions in spatial order at the end of the sequence; the first
    /// is the most significant bit of an outcome.
    pub slot_order: Vec<String>,
    /// Ideal joint probabilities before readout errors.
    pub probabilities: Vec<f64>,
}

impl Outcome {
    pub fn sample<R: rand::Rng + ?Sized>(&self, shots: usize, readout: &ReadoutModel, rng: &mut R) -> Vec<u32> {
        sample_shots(&self.probabilities, self.slot_order.len(), readout, shots, rng)
    }

    /// Histogram of sampled outcomes.
    pub fn counts<R: rand::Rng + ?Sized>(&self, shots: usize, readout: &ReadoutModel, rng: &mut R) -> Vec<u64> {
        let mut c = vec![0u64; self.probabilities.len()];
        for s in self.sample(shots, readout, rng) {
            c[s as usize] += 1;
        }
        c
    }
}

pub struct RunOutput {
    pub report: SequenceReport,
    pub outcome: Option<Outcome>,
    pub register: Option<QubitRegister>,
    pub failure: Option<Error>,
}

impl RunOutput {
    /// The outcome, or the error that aborted the run.
    pub fn into_result(self) -> Result<(SequenceReport, Outcome)> {
        match (self.failure, self.outcome) {
            (Some(e), _) => Err(e),
            (None, Some(o)) => Ok((self.report, o)),
            (None, None) => Err(Error::Sequence("sequence produced no readout".into())),
        }
    }
}

struct PlannedStep<'a> {
    stage: Stage,
    primitive: &'a Primitive,
    start: f64,
    duration: f64,
    before: Ledger,
    after: Ledger,
}

fn plan<'a>(sequence: &'a Sequence, world: &World) -> Result<Vec<PlannedStep<'a>>> {
    let violations = validate(sequence, &world.geometry);
    if let Some(v) = violations.first() {
        return Err(Error::Sequence(format!(
            "{} violation(s); first at {:?} step {}: {}",
            violations.len(),
            v.stage,
            v.index,
            v.message
        )));
    }
    let mut ledger = Ledger::new(&sequence.wells).map_err(Error::Sequence)?;
    let mut t = 0.0;
    let mut steps = Vec::new();
    for (stage, p) in sequence.steps() {
        let before = ledger.clone();
        ledger.apply(p, &world.geometry).map_err(Error::Sequence)?;
        let duration = world.config.duration(p);
        steps.push(PlannedStep {
            stage,
            primitive: p,
            start: t,
            duration,
            before,
            after: ledger.clone(),
        });
        t += duration;
    }
    Ok(steps)
}

fn center(geometry: &TrapGeometry, segment: usize) -> f64 {
    geometry.center(segment).unwrap_or(f64::NAN)
}

/// Piecewise-linear ion positions of the logical model.
fn logical_histories(sequence: &Sequence, steps: &[PlannedStep], world: &World) -> Result<BTreeMap<String, PositionHistory>> {
    let g = &world.geometry;
    let mut h: BTreeMap<String, PositionHistory> = BTreeMap::new();
    for w in &sequence.wells {
        for ion in &w.ions {
            h.insert(ion.clone(), PositionHistory::starting_at(0.0, center(g, w.segment)));
        }
    }
    let hop = world.config.transport.per_pair_duration;
    for st in steps {
        let end = st.start + st.duration;
        if let Primitive::Transport { from, to } = st.primitive {
            let ions = &st.before.wells()[from];
            let dir: i64 = if to > from { 1 } else { -1 };
            for k in 1..=from.abs_diff(*to) {
                let seg = (*from as i64 + dir * k as i64) as usize;
                for ion in ions {
                    h.get_mut(ion).expect("known").push(st.start + k as f64 * hop, center(g, seg))?;
                }
            }
        }
        for (ion, hist) in h.iter_mut() {
            let seg = st.after.segment_of(ion).expect("ion in ledger");
            hist.push(end, center(g, seg))?;
        }
    }
    Ok(h)
}

/// Simulates the motion of all ions through the filtered voltage sequence.
struct DynamicalRun {
    histories: BTreeMap<String, PositionHistory>,
    summary: DynamicalSummary,
    /// Set when the physics failed or diverged from the ledger; steps
    /// starting at or after `t` are not executed.
    failure: Option<(f64, Error)>,
}

fn on_grid(d: f64, rate: f64) -> bool {
    let n = d * rate;
    (n - n.round()).abs() < 1e-9 * n.abs().max(1.0)
}

fn dynamical_run(sequence: &Sequence, steps: &[PlannedStep], world: &World) -> Result<DynamicalRun> {
    let g = &world.geometry;
    let cfg = &world.config;
    let rate = cfg.swap.sample_rate;
    if cfg.transport.sample_rate != rate || cfg.separation.sample_rate != rate {
        return Err(Error::Config("all waveforms must share one sample rate".into()));
    }
    if cfg.transport.trap_voltage != cfg.separation.trap_voltage || cfg.transport.trap_voltage != cfg.swap.u_c_start {
        return Err(Error::Config("transport, separation and swap must share the trapping voltage".into()));
    }
    let u_trap = cfg.transport.trap_voltage;

    let compensate = |s: VoltageSchedule| {
        if cfg.precompensate {
            world.filter.precompensate(&s)
        } else {
            Ok(s)
        }
    };
    let mut parts = Vec::new();
    for st in steps {
        if !on_grid(st.duration, rate) {
            return Err(Error::Sequence(format!(
                "{} lasts {} us, not a multiple of the sample period",
                st.primitive.describe(),
                st.duration
            )));
        }
        let part = match st.primitive {
            Primitive::Transport { from, to } => transport_schedule(g, *from, *to, &cfg.transport)?,
            Primitive::Separate { site, left, bias } => {
                let ions = st.before.wells()[site].len();
                let schedule = if 2 * left == ions {
                    separation_schedule(g, *site, *bias, &cfg.separation)?
                } else {
                    unequal_separation_schedule(g, *site, ions, *left, *bias, &cfg.separation)?
                };
                compensate(schedule)?
            }
            Primitive::Merge { site } => compensate(merge_schedule(g, *site, 0.0, &cfg.separation)?)?,
            Primitive::Swap { site } => {
                let ramp = swap_schedule(&cfg.swap, *site)?;
                let settle = VoltageSchedule::hold(&ramp.end_config(), cfg.swap_settle, rate)?;
                VoltageSchedule::concat(&[ramp, settle], &VoltageAssignment::new())?
            }
            _ => VoltageSchedule::hold(&VoltageAssignment::new(), st.duration, rate)?,
        };
        parts.push(part);
    }
    let mut background = VoltageAssignment::new();
    for part in &parts {
        for c in part.channels() {
            background.set(c, 0.0);
        }
    }
    for w in &sequence.wells {
        background.set(Channel::Segment(w.segment), u_trap);
    }
    let schedule = VoltageSchedule::concat(&parts, &background)?;
    let filtered = world.filter.apply(&schedule);
    let t_end = schedule.duration();

    let labels: Vec<String> = sequence.wells.iter().flat_map(|w| w.ions.clone()).collect();
    let mut guess = Vec::new();
    for w in &sequence.wells {
        let x0 = center(g, w.segment);
        let k = w.ions.len() as f64;
        for j in 0..w.ions.len() {
            guess.push([x0 + (j as f64 - 0.5 * (k - 1.0)) * 4.5, 0.0, 0.0]);
        }
    }
    let start_field = g.field(&filtered.assignment_at(0.0))?;
    let eq = find_equilibrium(&start_field, &guess)?;
    let state0 = CrystalState::at_rest(eq)?;
    let mut driven = ScheduledField::new(g, filtered)?;
    let stride = ((world.record_interval / world.integrate.dt).round() as usize).max(1);
    let options = IntegrateOptions {
        stride,
        record_energy: false,
        ..world.integrate
    };

    // Integrate primitive by primitive so a failure can be located.
    let mut histories: BTreeMap<String, PositionHistory> = labels
        .iter()
        .zip(&state0.positions)
        .map(|(l, r)| (l.clone(), PositionHistory::starting_at(0.0, r[0])))
        .collect();
    let mut state = state0;
    let mut max_abs_y: f64 = 0.0;
    let mut failure = None;
    for st in steps {
        let (t0, t1) = (st.start, st.start + st.duration);
        if t1 <= t0 {
            continue;
        }
        let traj = match integrate(&mut driven, g, &state, t0, t1, &options) {
            Ok(tr) => tr,
            Err(e) => {
                failure = Some((t0, e));
                break;
            }
        };
        max_abs_y = max_abs_y.max(traj.max_abs_y);
        for (t, pos) in traj.times.iter().zip(&traj.positions).skip(1) {
            for (l, r) in labels.iter().zip(pos) {
                histories.get_mut(l).expect("known").push(*t, r[0])?;
            }
        }
        state = traj.final_state;
        if let Err(e) = check_against_ledger(g, &labels, &state, &st.after) {
            failure = Some((
                t1,
                Error::Sequence(format!("after '{}' at t = {t1:.1} us: {e}", st.primitive.describe())),
            ));
            break;
        }
        if cfg.init_cools && matches!(st.primitive, Primitive::InitPump { .. }) {
            // Ideal cooling of every ion in the laser zone.
            let field = g.field(&driven.filtered().assignment_at(t1))?;
            let eq = find_equilibrium(&field, &state.positions)?;
            if let Some(cooled) = st.after.wells().get(&g.liz_index) {
                for (i, l) in labels.iter().enumerate() {
                    if cooled.contains(l) {
                        state.positions[i] = eq[i];
                        state.velocities[i] = [0.0; 3];
                    }
                }
            }
        }
    }
    let final_max_n_bar = if failure.is_none() {
        let end_field = g.field(&driven.filtered().assignment_at(t_end))?;
        mode_excitation(&state, &end_field, g.ion_mass()).ok().map(|r| r.max_n_bar())
    } else {
        None
    };
    Ok(DynamicalRun {
        histories,
        summary: DynamicalSummary {
            max_abs_y,
            final_positions: state.positions.clone(),
            final_max_n_bar,
        },
        failure,
    })
}

/// Compares simulated well occupancy and ordering with the ledger.
fn check_against_ledger(
    g: &TrapGeometry,
    labels: &[String],
    state: &CrystalState,
    ledger: &Ledger,
) -> std::result::Result<(), String> {
    for (segment, ions) in ledger.wells() {
        let xc = center(g, *segment);
        let mut xs = Vec::new();
        for ion in ions {
            let i = labels.iter().position(|l| l == ion).expect("known ion");
            let x = state.positions[i][0];
            if (x - xc).abs() > 0.5 * SEGMENT_SPACING_UM {
                return Err(format!("ion {ion} at x = {x:.1} um, expected near segment {segment}"));
            }
            xs.push(x);
        }
        if xs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("ions {ions:?} at segment {segment} are out of order: {xs:?}"));
        }
    }
    Ok(())
}

/// Executes `sequence` in `world`.
pub fn run(sequence: &Sequence, world: &World, mode: RunMode) -> Result<RunOutput> {
    world.config.validate()?;
    world.noise.validate()?;
    let steps = plan(sequence, world)?;
    let (histories, dynamical, failure) = match mode {
        RunMode::Logical => (logical_histories(sequence, &steps, world)?, None, None),
        RunMode::Dynamical => {
            let d = dynamical_run(sequence, &steps, world)?;
            (d.histories, Some(d.summary), d.failure)
        }
    };
    let stop_at = failure.as_ref().map(|f| f.0);

    let labels = sequence.ions();
    let n = labels.len();
    let mut reg = QubitRegister::from_density(
        &labels,
        nalgebra::DMatrix::identity(1 << n, 1 << n).map(|v: f64| crate::qubit::C64::new(v / (1 << n) as f64, 0.0)),
    )?;
    let noise = &world.noise;
    let mut since_pulse: BTreeMap<String, f64> = labels.iter().map(|l| (l.clone(), 0.0)).collect();
    let mut shelved: BTreeSet<String> = BTreeSet::new();
    let mut read: Vec<String> = Vec::new();
    let mut corrections = Vec::new();
    let mut timeline = Vec::new();
    let mut counts: BTreeMap<PrimitiveKind, usize> = BTreeMap::new();
    let (mut body_time, mut shuttle_time, mut setup_time) = (0.0, 0.0, 0.0);
    let liz = world.geometry.liz_index;

    for st in &steps {
        let end = st.start + st.duration;
        if stop_at.is_some_and(|t| end > t + 1e-9) {
            break;
        }
        for ion in &labels {
            if read.contains(ion) {
                continue;
            }
            let phi = accumulate_phase(&histories[ion], &world.field, st.start, end)?;
            if phi != 0.0 {
                reg.phase(ion, phi)?;
                *since_pulse.get_mut(ion).expect("known") += phi;
            }
        }
        match st.primitive {
            Primitive::InitPump { ions } => {
                for ion in ions {
                    reg.reset(ion, noise.init_error)?;
                    since_pulse.insert(ion.clone(), 0.0);
                    shelved.remove(ion);
                    read.retain(|r| r != ion);
                }
            }
            Primitive::Rotate {
                ion,
                axis,
                angle,
                correct_phase,
            } => {
                let offset = if *correct_phase {
                    let phi = since_pulse[ion] + noise.correction_phase_error;
                    corrections.push(PhaseCorrection {
                        ion: ion.clone(),
                        phase: phi,
                    });
                    phi
                } else {
                    0.0
                };
                reg.rotate(ion, *axis, *angle, offset)?;
                since_pulse.insert(ion.clone(), 0.0);
            }
            Primitive::Shelve { ions } => {
                for ion in ions {
                    reg.dephase(ion)?;
                    shelved.insert(ion.clone());
                }
            }
            Primitive::Readout { ions } => {
                for ion in ions {
                    reg.dephase(ion)?;
                    read.push(ion.clone());
                }
                if noise.remote_depolarization > 0.0 {
                    for ion in &labels {
                        let remote = st.after.segment_of(ion) != Some(liz);
                        if remote && !shelved.contains(ion) && !read.contains(ion) {
                            reg.depolarize(ion, noise.remote_depolarization)?;
                        }
                    }
                }
            }
            Primitive::Swap { site }
                if noise.swap_phase != 0.0 => {
                    for ion in &st.after.wells()[site] {
                        reg.phase(ion, noise.swap_phase)?;
                    }
                }
            _ => {}
        }
        let kind = st.primitive.kind();
        match st.stage {
            Stage::Setup => setup_time += st.duration,
            Stage::Body => {
                *counts.entry(kind).or_insert(0) += 1;
                body_time += st.duration;
                if kind.is_shuttling() {
                    shuttle_time += st.duration;
                }
            }
        }
        timeline.push(TimelineEntry {
            stage: st.stage,
            kind,
            description: st.primitive.describe(),
            start_us: st.start,
            duration_us: st.duration,
            order_after: st.after.order(),
        });
    }

    let final_ledger = steps
        .iter()
        .take(timeline.len())
        .next_back()
        .map(|s| s.after.clone())
        .unwrap_or_else(|| Ledger::new(&sequence.wells).unwrap_or_default());
    let final_order = final_ledger.order();
    let report = SequenceReport {
        name: sequence.name.clone(),
        mode,
        counts,
        total_duration_us: body_time,
        shuttling_duration_us: shuttle_time,
        shuttling_fraction: if body_time > 0.0 { shuttle_time / body_time } else { 0.0 },
        setup_duration_us: setup_time,
        timeline,
        final_order: final_order.clone(),
        histories,
        corrections,
        dynamical,
        aborted: failure.as_ref().map(|f| f.1.to_string()),
    };
    if let Some((_, e)) = failure {
        return Ok(RunOutput {
            report,
            outcome: None,
            register: None,
            failure: Some(e),
        });
    }
    let slot_order: Vec<String> = final_order.into_iter().filter(|l| read.contains(l)).collect();
    let outcome = if slot_order.is_empty() {
        None
    } else {
        Some(Outcome {
            probabilities: reg.marginal(&slot_order)?,
            slot_order,
        })
    };
    Ok(RunOutput {
        report,
        outcome,
        register: Some(reg),
        failure: None,
    })
}

/// Single-qubit operations of the tomography grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleQubitOp {
    Identity,
    RxHalf,
    RyHalf,
    RxPi,
}

impl SingleQubitOp {
    pub const PREPARATIONS: [SingleQubitOp; 4] = [
        SingleQubitOp::Identity,
        SingleQubitOp::RxHalf,
        SingleQubitOp::RyHalf,
        SingleQubitOp::RxPi,
    ];
    pub const ANALYSES: [SingleQubitOp; 3] = [SingleQubitOp::Identity, SingleQubitOp::RxHalf, SingleQubitOp::RyHalf];

    pub fn rotation(self) -> (RotationAxis, f64) {
        use std::f64::consts::{FRAC_PI_2, PI};
        match self {
            SingleQubitOp::Identity => (RotationAxis::X, 0.0),
            SingleQubitOp::RxHalf => (RotationAxis::X, FRAC_PI_2),
            SingleQubitOp::RyHalf => (RotationAxis::Y, FRAC_PI_2),
            SingleQubitOp::RxPi => (RotationAxis::X, PI),
        }
    }

    fn primitive(self, ion: &str, correct_phase: bool) -> Primitive {
        let (axis, angle) = self.rotation();
        Primitive::Rotate {
            ion: ion.to_string(),
            axis,
            angle,
            correct_phase,
        }
    }
}

/// Process applied between preparation and analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoIonProcess {
    Swap,
    Identity,
}

fn tr(from: usize, to: usize) -> Primitive {
    Primitive::Transport { from, to }
}

fn ions(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Two-ion process tomography sequence for one preparation/analysis setting.
///
/// Ions A (left) and B start together at the LIZ. After pumping they are
/// separated and prepared one at a time with the other ion stored six
/// segments away, merged, optionally swapped, separated, analyzed
/// individually with phase-corrected pulses, merged, shelved, separated
/// and read out one by one. The outcome bits follow the final spatial order,
/// so bit 0 is always the left slot.
pub fn build_swap_tomography(
    geometry: &TrapGeometry,
    prep: [SingleQubitOp; 2],
    analysis: [SingleQubitOp; 2],
    process: TwoIonProcess,
) -> Result<Sequence> {
    let z = geometry.liz_index;
    let far = STORAGE_DISTANCE;
    if z < far + 1 || !geometry.has_segment(z + far) || !geometry.has_segment(z - far) {
        return Err(Error::Sequence(format!("the trap needs {far} segments on both sides of the LIZ")));
    }
    let (l, r) = match process {
        TwoIonProcess::Swap => ("B", "A"),
        TwoIonProcess::Identity => ("A", "B"),
    };
    let mut body = vec![
        Primitive::InitPump { ions: ions(&["A", "B"]) },
        Primitive::Separate { site: z, left: 1, bias: 0.0 },
        tr(z + 1, z + far),
        tr(z - 1, z),
        prep[0].primitive("A", false),
        tr(z, z - far),
        tr(z + far, z),
        prep[1].primitive("B", false),
        tr(z, z + 1),
        tr(z - far, z - 1),
        Primitive::Merge { site: z },
    ];
    if process == TwoIonProcess::Swap {
        body.push(Primitive::Swap { site: z });
    }
    body.extend([
        Primitive::Separate { site: z, left: 1, bias: 0.0 },
        tr(z + 1, z + far),
        tr(z - 1, z),
        analysis[0].primitive(l, true),
        tr(z, z - far),
        tr(z + far, z),
        analysis[1].primitive(r, true),
        tr(z, z + 1),
        tr(z - far, z - 1),
        Primitive::Merge { site: z },
        Primitive::Shelve { ions: ions(&[l, r]) },
        Primitive::Separate { site: z, left: 1, bias: 0.0 },
        tr(z + 1, z + far),
        tr(z - 1, z),
        Primitive::Readout { ions: ions(&[l]) },
        tr(z, z - far),
        tr(z + far, z),
        Primitive::Readout { ions: ions(&[r]) },
    ]);
    Ok(Sequence {
        name: format!("{process:?} tomography {:?}/{:?} -> {:?}/{:?}", prep[0], prep[1], analysis[0], analysis[1]),
        wells: vec![Well {
            segment: z,
            ions: ions(&["A", "B"]),
        }],
        setup: Vec::new(),
        body,
    })
}

/// Three-ion register reversal ABC → CBA by three swaps.
///
/// `bits[k]` is the input of ion A, B, C (true = `|↑⟩`). The setup splits
/// the initial crystal into single ions at LIZ − 1, LIZ + 1 and LIZ + 6;
/// the body pumps and prepares each ion, reverses the order with the
/// swaps AB, AC and BC, shelves all ions and reads them out one by one.
pub fn build_three_ion_reorder(geometry: &TrapGeometry, bits: [bool; 3], config: &SequenceConfig) -> Result<Sequence> {
    let z = geometry.liz_index;
    if z < 6 || !geometry.has_segment(z - 6) || !geometry.has_segment(z + 10) {
        return Err(Error::Sequence("the trap needs segments LIZ-6 ..= LIZ+10".into()));
    }
    let s = |offset: i64| (z as i64 + offset) as usize;
    let prepare = |ion: &str, bit: bool| {
        let angle = if bit { 0.0 } else { std::f64::consts::PI };
        [
            Primitive::InitPump { ions: ions(&[ion]) },
            Primitive::Rotate {
                ion: ion.to_string(),
                axis: RotationAxis::X,
                angle,
                correct_phase: false,
            },
        ]
    };
    let merge_swap_separate = [
        Primitive::Merge { site: z },
        Primitive::Swap { site: z },
        Primitive::Separate { site: z, left: 1, bias: 0.0 },
    ];
    let setup = vec![
        Primitive::Separate {
            site: z,
            left: 2,
            bias: config.three_ion_bias,
        },
        tr(s(1), s(6)),
        tr(s(-1), s(0)),
        Primitive::Separate { site: z, left: 1, bias: 0.0 },
    ];
    let mut body = Vec::new();
    // Pumping round: A19 B21 C26 -> A14 B16 C26 (offsets for LIZ 20).
    body.push(tr(s(6), s(10)));
    body.push(tr(s(1), s(6)));
    body.push(tr(s(-1), s(0)));
    body.extend(prepare("A", bits[0]));
    body.push(tr(s(0), s(-6)));
    body.push(tr(s(6), s(0)));
    body.extend(prepare("B", bits[1]));
    body.push(tr(s(0), s(-4)));
    body.push(tr(s(10), s(0)));
    body.extend(prepare("C", bits[2]));
    body.push(tr(s(0), s(6)));
    // AB -> BA
    body.push(tr(s(-4), s(1)));
    body.push(tr(s(-6), s(-1)));
    body.extend(merge_swap_separate.clone());
    // B19 A21 C26: AC -> CA
    body.push(tr(s(-1), s(-6)));
    body.push(tr(s(1), s(-1)));
    body.push(tr(s(6), s(1)));
    body.extend(merge_swap_separate.clone());
    // B14 C19 A21: BC -> CB
    body.push(tr(s(1), s(6)));
    body.push(tr(s(-1), s(1)));
    body.push(tr(s(-6), s(-1)));
    body.extend(merge_swap_separate);
    // C19 B21 A26: shelving round.
    body.push(tr(s(6), s(10)));
    body.push(tr(s(1), s(6)));
    body.push(tr(s(-1), s(0)));
    body.push(Primitive::Shelve { ions: ions(&["C"]) });
    body.push(tr(s(0), s(-6)));
    body.push(tr(s(6), s(0)));
    body.push(Primitive::Shelve { ions: ions(&["B"]) });
    body.push(tr(s(0), s(-4)));
    body.push(tr(s(10), s(0)));
    body.push(Primitive::Shelve { ions: ions(&["A"]) });
    body.push(tr(s(0), s(6)));
    // C14 B16 A26: readout round.
    body.push(tr(s(-4), s(0)));
    body.push(Primitive::Readout { ions: ions(&["B"]) });
    body.push(tr(s(0), s(3)));
    body.push(tr(s(-6), s(0)));
    body.push(Primitive::Readout { ions: ions(&["C"]) });
    body.push(tr(s(0), s(-6)));
    body.push(tr(s(3), s(-3)));
    body.push(tr(s(6), s(0)));
    body.push(Primitive::Readout { ions: ions(&["A"]) });
    let name = format!(
        "three-ion reorder {}",
        bits.iter().map(|b| if *b { '1' } else { '0' }).collect::<String>()
    );
    Ok(Sequence {
        name,
        wells: vec![Well {
            segment: z,
            ions: ions(&["A", "B", "C"]),
        }],
        setup,
        body,
    })
}
