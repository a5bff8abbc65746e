//! UAV trajectories, the per-slot optimal-layout dataset, its file format,
//! and sliding-window splits for training predictors.
//!
//! File layout (`MAPD v1`):
//!
//! ```text
//! MAPD v1
//! {"seed":..., "antennas":9, ...}          <- JSON metadata, one line
//! t,bob_x,bob_y,bob_z,eve_x,...,secrecy,iters   <- column header
//! 0,71.2,...                                <- one line per slot
//! ```
//!
//! Every stored float is quantised to 9 significant digits when the dataset
//! is built and written in shortest round-trip form, so `load(save(ds))`
//! reproduces every field bit for bit.

use std::fs;
use std::io;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ArrayLayout, BoxBounds, ChannelError, NodeState, SecrecyEvaluator, Vec3};
use crate::pso::{optimize_slot, PsoError, SwarmConfig};
use crate::rng::{derive_seed, substream};
use crate::scenario::{ScenarioConfig, ScenarioError, SwarmSettings};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "MAPD v";

const TAG_BOB: u64 = 0xB0B;
const TAG_EVE: u64 = 0xE5E;
const TAG_CHANNEL: u64 = 0xC4A;
const TAG_SWARM: u64 = 0x5A4;

/// Random-walk steps are clipped to this many standard deviations per axis.
pub const WALK_CLIP_SIGMAS: f64 = 4.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid trajectory: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("slot {slot}: {source}")]
    Pso { slot: usize, source: PsoError },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("format version {found} is not supported (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("bad metadata: {0}")]
    Metadata(String),
    #[error("truncated dataset: expected {expected} records, found {found} complete")]
    Truncated { expected: usize, found: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("window of {needed} slots does not fit a dataset of {available}")]
    WindowTooLong { needed: usize, available: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

/// Shape of one UAV path. All coordinates in metres, times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Straight line from `start` (slot 0) to `end` (last slot).
    WaypointLinear { start: [f64; 3], end: [f64; 3] },
    /// `center + velocity·t + amplitude ⊙ sin(angular_frequency·t + phase)`.
    ParametricSinusoid {
        center: [f64; 3],
        #[serde(default)]
        velocity: [f64; 3],
        amplitude: [f64; 3],
        angular_frequency: [f64; 3],
        #[serde(default)]
        phase: [f64; 3],
    },
    /// Gaussian steps, reflected at `min_altitude`.
    RandomWalk { start: [f64; 3], step_std: f64, min_altitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub slots: usize,
    /// Slot duration, s.
    pub dt: f64,
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

pub fn generate_trajectory(spec: &TrajectorySpec, rng: &mut crate::rng::Rng) -> Result<Vec<Vec3>, DatasetError> {
    let bad = |m: String| Err(DatasetError::InvalidSpec(m));
    if spec.slots == 0 {
        return bad("slot count must be at least 1".into());
    }
    if !(spec.dt > 0.0 && spec.dt.is_finite()) {
        return bad(format!("slot duration must be positive, got {}", spec.dt));
    }
    let path: Vec<Vec3> = match &spec.kind {
        TrajectoryKind::WaypointLinear { start, end } => {
            let (a, b) = (v3(*start), v3(*end));
            let n = spec.slots;
            (0..n)
                .map(|t| if n == 1 { a } else { a + (b - a) * (t as f64 / (n - 1) as f64) })
                .collect()
        }
        TrajectoryKind::ParametricSinusoid { center, velocity, amplitude, angular_frequency, phase } => (0..spec.slots)
            .map(|t| {
                let s = t as f64 * spec.dt;
                let p: Vec<f64> = (0..3)
                    .map(|a| center[a] + velocity[a] * s + amplitude[a] * (angular_frequency[a] * s + phase[a]).sin())
                    .collect();
                Vec3::from_slice(&p)
            })
            .collect(),
        TrajectoryKind::RandomWalk { start, step_std, min_altitude } => {
            if !(*step_std >= 0.0 && *min_altitude > 0.0) {
                return bad("random walk needs step_std >= 0 and min_altitude > 0".into());
            }
            if start[2] < *min_altitude {
                return bad(format!("start altitude {} is below min_altitude {}", start[2], min_altitude));
            }
            let clip = WALK_CLIP_SIGMAS * step_std;
            let mut p = v3(*start);
            let mut out = vec![p];
            for _ in 1..spec.slots {
                let mut step = [0.0; 3];
                for s in &mut step {
                    let z: f64 = rng.sample(StandardNormal);
                    *s = (z * step_std).clamp(-clip, clip);
                }
                p = p + v3(step);
                if p.z < *min_altitude {
                    p.z = 2.0 * min_altitude - p.z;
                }
                out.push(p);
            }
            out
        }
    };
    if let Some((t, p)) = path.iter().enumerate().find(|(_, p)| !p.is_finite() || p.z <= 0.0) {
        return bad(format!("slot {t} at {p} is not above ground"));
    }
    Ok(path)
}

/// Rounds to 9 significant digits.
pub fn quantize(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn quantize_vec(p: Vec3) -> Vec3 {
    Vec3::new(quantize(p.x), quantize(p.y), quantize(p.z))
}

fn quantize_layout(l: &ArrayLayout) -> ArrayLayout {
    ArrayLayout::new(l.positions.iter().map(|&p| quantize_vec(p)).collect(), l.slot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisRange {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl AxisRange {
    /// Per-axis extrema over every antenna coordinate of `layouts`.
    pub fn of<'a>(layouts: impl IntoIterator<Item = &'a ArrayLayout>) -> Self {
        let mut r = AxisRange { min: [f64::INFINITY; 3], max: [f64::NEG_INFINITY; 3] };
        for l in layouts {
            for p in &l.positions {
                for (a, v) in p.to_array().into_iter().enumerate() {
                    r.min[a] = r.min[a].min(v);
                    r.max[a] = r.max[a].max(v);
                }
            }
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub seed: u64,
    pub antennas: usize,
    pub slots: usize,
    /// Slot duration, s. Metadata only.
    pub dt: f64,
    pub wavelength: f64,
    pub bounds: BoxBounds,
    pub max_step: f64,
    pub min_spacing: f64,
    pub units: String,
    pub normalization: AxisRange,
    /// Snapshot of the generating configuration.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotRecord {
    pub t: usize,
    pub bob: Vec3,
    pub eve: Vec3,
    pub layout: ArrayLayout,
    /// Achieved secrecy rate, bit/s/Hz.
    pub secrecy: f64,
    /// Last PSO iteration that improved the global best.
    pub pso_iters_to_converge: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<SlotRecord>,
}

const UNITS: &str = "positions m; secrecy bit/s/Hz; dt s";

#[derive(Serialize)]
struct Snapshot<'a> {
    scenario: &'a ScenarioConfig,
    swarm: &'a SwarmSettings,
    bob: &'a TrajectorySpec,
    eve: &'a TrajectorySpec,
}

/// Quantised Bob and Eve positions for every slot.
pub fn node_positions(bob_spec: &TrajectorySpec, eve_spec: &TrajectorySpec, seed: u64) -> Result<Vec<(Vec3, Vec3)>, DatasetError> {
    if bob_spec.slots != eve_spec.slots {
        return Err(DatasetError::InvalidSpec(format!(
            "Bob has {} slots but Eve has {}",
            bob_spec.slots, eve_spec.slots
        )));
    }
    let bob = generate_trajectory(bob_spec, &mut substream(seed, &[TAG_BOB]))?;
    let eve = generate_trajectory(eve_spec, &mut substream(seed, &[TAG_EVE]))?;
    Ok(bob.into_iter().zip(eve).map(|(b, e)| (quantize_vec(b), quantize_vec(e))).collect())
}

/// Fitness evaluator and swarm settings of slot `t`, exactly as used by
/// [`build_dataset`].
pub fn slot_problem(
    scenario: &ScenarioConfig,
    swarm: &SwarmSettings,
    seed: u64,
    t: usize,
    bob: Vec3,
    eve: Vec3,
) -> Result<(SecrecyEvaluator, SwarmConfig), DatasetError> {
    let model = scenario.link_model()?;
    let tags: &[u64] = if scenario.static_scattering { &[TAG_CHANNEL] } else { &[TAG_CHANNEL, t as u64] };
    let evaluator = SecrecyEvaluator::new(&model, &NodeState::bob(bob), &NodeState::eve(eve), &mut substream(seed, tags))?;
    let cfg = swarm.swarm_config(scenario, derive_seed(seed, &[TAG_SWARM, t as u64]))?;
    Ok((evaluator, cfg))
}

/// Optimises the antenna layout slot by slot along the Bob/Eve trajectories.
///
/// Each slot's swarm is constrained by, and warm-started from, the previous
/// slot's stored layout. Slot 0 is warm-started from the fixed grid.
pub fn build_dataset(
    scenario: &ScenarioConfig,
    bob_spec: &TrajectorySpec,
    eve_spec: &TrajectorySpec,
    swarm: &SwarmSettings,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    build_dataset_with(scenario, bob_spec, eve_spec, swarm, seed, |_| {})
}

/// [`build_dataset`] with a callback invoked after every slot.
pub fn build_dataset_with(
    scenario: &ScenarioConfig,
    bob_spec: &TrajectorySpec,
    eve_spec: &TrajectorySpec,
    swarm: &SwarmSettings,
    seed: u64,
    mut on_slot: impl FnMut(&SlotRecord),
) -> Result<Dataset, DatasetError> {
    let fixed = scenario.fixed_layout()?;
    let nodes = node_positions(bob_spec, eve_spec, seed)?;

    let mut records: Vec<SlotRecord> = Vec::with_capacity(bob_spec.slots);
    for (t, &(bob, eve)) in nodes.iter().enumerate() {
        let (evaluator, cfg) = slot_problem(scenario, swarm, seed, t, bob, eve)?;
        let prev = records.last().map(|r| &r.layout);
        let warm = prev.unwrap_or(&fixed);
        let fitness = |l: &ArrayLayout| evaluator.evaluate(l);
        let sol = optimize_slot(&fitness, &cfg, prev, Some(warm)).map_err(|source| DatasetError::Pso { slot: t, source })?;
        let mut layout = quantize_layout(&sol.layout);
        layout.slot = t;
        let record = SlotRecord {
            t,
            bob,
            eve,
            secrecy: quantize(evaluator.evaluate(&layout)),
            layout,
            pso_iters_to_converge: sol.converged_at,
        };
        on_slot(&record);
        records.push(record);
    }

    let snapshot = Snapshot { scenario, swarm, bob: bob_spec, eve: eve_spec };
    let meta = DatasetMeta {
        version: FORMAT_VERSION,
        seed,
        antennas: scenario.antennas,
        slots: records.len(),
        dt: bob_spec.dt,
        wavelength: scenario.wavelength()?,
        bounds: scenario.bounds()?,
        max_step: scenario.max_step()?,
        min_spacing: scenario.min_spacing()?,
        units: UNITS.to_string(),
        normalization: AxisRange::of(records.iter().map(|r| &r.layout)),
        config: serde_json::to_value(&snapshot).map_err(|e| DatasetError::Metadata(e.to_string()))?,
    };
    Ok(Dataset { meta, records })
}

/// Antenna motion `base + amplitude·sin(2πt/period + φ)` with a random phase
/// per antenna and axis; no channel involved. Used to probe predictors on a
/// motion pattern with known structure.
pub fn sinusoidal_motion(
    base: &ArrayLayout,
    bounds: BoxBounds,
    slots: usize,
    amplitude: f64,
    period: f64,
    seed: u64,
) -> Dataset {
    let mut rng = substream(seed, &[0x51E]);
    let phases: Vec<f64> = (0..3 * base.len()).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let records: Vec<SlotRecord> = (0..slots)
        .map(|t| {
            let w = std::f64::consts::TAU * t as f64 / period;
            let q: Vec<f64> = base
                .to_flat()
                .iter()
                .zip(&phases)
                .map(|(b, ph)| quantize(b + amplitude * (w + ph).sin()))
                .collect();
            SlotRecord {
                t,
                bob: Vec3::ZERO,
                eve: Vec3::ZERO,
                layout: ArrayLayout::from_flat(&q, t),
                secrecy: 0.0,
                pso_iters_to_converge: 0,
            }
        })
        .collect();
    let meta = DatasetMeta {
        version: FORMAT_VERSION,
        seed,
        antennas: base.len(),
        slots,
        dt: 1.0,
        wavelength: 0.0,
        bounds,
        max_step: std::f64::consts::TAU * amplitude * 3f64.sqrt() / period,
        min_spacing: 0.0,
        units: UNITS.to_string(),
        normalization: AxisRange::of(records.iter().map(|r| &r.layout)),
        config: serde_json::json!({ "sinusoid": { "amplitude": amplitude, "period": period } }),
    };
    Dataset { meta, records }
}

impl Dataset {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}{}\n", self.meta.version);
        s.push_str(&serde_json::to_string(&self.meta).expect("metadata serialises"));
        s.push('\n');
        s.push_str("t,bob_x,bob_y,bob_z,eve_x,eve_y,eve_z");
        for m in 0..self.meta.antennas {
            s.push_str(&format!(",a{m}_x,a{m}_y,a{m}_z"));
        }
        s.push_str(",secrecy,iters\n");
        for r in &self.records {
            s.push_str(&r.t.to_string());
            for v in r.bob.to_array().iter().chain(&r.eve.to_array()).chain(&r.layout.to_flat()) {
                s.push_str(&format!(",{v}"));
            }
            s.push_str(&format!(",{},{}\n", r.secrecy, r.pso_iters_to_converge));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().unwrap_or("").trim_end();
        let version = header
            .strip_prefix(MAGIC)
            .ok_or_else(|| DatasetError::MalformedHeader(format!("expected `{MAGIC}{FORMAT_VERSION}`, found `{header}`")))?;
        let version: u32 = version
            .parse()
            .map_err(|_| DatasetError::MalformedHeader(format!("bad version field `{version}`")))?;
        if version != FORMAT_VERSION {
            return Err(DatasetError::VersionMismatch { found: version, supported: FORMAT_VERSION });
        }
        let meta_line = lines.next().ok_or(DatasetError::Truncated { expected: 0, found: 0 })?;
        let meta: DatasetMeta = serde_json::from_str(meta_line.trim_end()).map_err(|e| DatasetError::Metadata(e.to_string()))?;
        let expected = meta.slots;
        let truncated = |found| DatasetError::Truncated { expected, found };
        match lines.next() {
            Some(l) if l.ends_with('\n') => {}
            _ => return Err(truncated(0)),
        }
        let fields = 1 + 6 + 3 * meta.antennas + 2;
        let mut records = Vec::with_capacity(expected);
        for (i, raw) in lines.enumerate() {
            let line = i + 4;
            if !raw.ends_with('\n') {
                return Err(truncated(records.len()));
            }
            let raw = raw.trim_end();
            if raw.is_empty() {
                continue;
            }
            let parts: Vec<&str> = raw.split(',').collect();
            if parts.len() != fields {
                return Err(DatasetError::Parse { line, message: format!("expected {fields} fields, found {}", parts.len()) });
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| DatasetError::Parse { line, message: format!("`{s}`: {e}") });
            let nums = parts[1..fields - 1]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| DatasetError::Parse { line, message: format!("`{s}`: {e}") }))
                .collect::<Result<Vec<f64>, _>>()?;
            let t = int(parts[0])?;
            if t != records.len() {
                return Err(DatasetError::Parse { line, message: format!("slot {t} out of order, expected {}", records.len()) });
            }
            records.push(SlotRecord {
                t,
                bob: Vec3::from_slice(&nums[0..3]),
                eve: Vec3::from_slice(&nums[3..6]),
                layout: ArrayLayout::from_flat(&nums[6..6 + 3 * meta.antennas], t),
                secrecy: nums[6 + 3 * meta.antennas],
                pso_iters_to_converge: int(parts[fields - 1])?,
            });
        }
        if records.len() != expected {
            return Err(truncated(records.len()));
        }
        Ok(Dataset { meta, records })
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, ds.to_text()).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    Dataset::from_text(&text)
}

/// Per-axis min-max scaling of flattened `x, y, z` coordinates into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub range: AxisRange,
}

impl Normalizer {
    pub fn new(range: AxisRange) -> Self {
        Self { range }
    }

    fn span(&self, axis: usize) -> f64 {
        let s = self.range.max[axis] - self.range.min[axis];
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn normalize(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter().enumerate().map(|(i, v)| (v - self.range.min[i % 3]) / self.span(i % 3)).collect()
    }

    pub fn denormalize(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter().enumerate().map(|(i, v)| v * self.span(i % 3) + self.range.min[i % 3]).collect()
    }
}

/// One supervised sample. `input` is `hist × 3M`, `target` is `pre × 3M`,
/// both row-major and normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Slot index of the first input row.
    pub start: usize,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

impl Window {
    /// Slot index of the first target row.
    pub fn target_start(&self, hist: usize) -> usize {
        self.start + hist
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.15 }
    }
}

impl SplitFractions {
    /// Slot boundaries `(train_end, val_end)` for a dataset of `n` slots.
    pub fn boundaries(&self, n: usize) -> (usize, usize) {
        let train_end = (self.train * n as f64).round() as usize;
        let val_end = ((self.train + self.val) * n as f64).round() as usize;
        (train_end.min(n), val_end.min(n))
    }
}

/// Sliding windows and their chronological partition.
///
/// A window belongs to a partition when all of its target slots fall inside
/// that partition's slot range; windows whose targets straddle a boundary
/// are kept in `windows` but assigned to none.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub hist: usize,
    pub pre: usize,
    pub antennas: usize,
    pub normalizer: Normalizer,
    /// Slot boundaries `(train_end, val_end)`.
    pub boundaries: (usize, usize),
    pub windows: Vec<Window>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl WindowSet {
    pub fn width(&self) -> usize {
        3 * self.antennas
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&Window> {
        idx.iter().map(|&i| &self.windows[i]).collect()
    }
}

pub fn split_windows(
    ds: &Dataset,
    hist: usize,
    pre: usize,
    stride: usize,
    fractions: SplitFractions,
) -> Result<WindowSet, DatasetError> {
    let n = ds.records.len();
    if hist == 0 || pre == 0 || stride == 0 {
        return Err(DatasetError::InvalidSplit("window lengths and stride must be at least 1".into()));
    }
    if hist + pre > n {
        return Err(DatasetError::WindowTooLong { needed: hist + pre, available: n });
    }
    if !(fractions.train > 0.0 && fractions.val >= 0.0 && fractions.train + fractions.val <= 1.0) {
        return Err(DatasetError::InvalidSplit(format!("fractions {fractions:?}")));
    }
    let (train_end, val_end) = fractions.boundaries(n);
    let normalizer = Normalizer::new(AxisRange::of(ds.records[..train_end.max(1)].iter().map(|r| &r.layout)));
    let rows: Vec<Vec<f64>> = ds.records.iter().map(|r| normalizer.normalize(&r.layout.to_flat())).collect();

    let mut set = WindowSet {
        hist,
        pre,
        antennas: ds.meta.antennas,
        normalizer,
        boundaries: (train_end, val_end),
        windows: Vec::new(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for start in (0..=n - hist - pre).step_by(stride) {
        let (t0, t1) = (start + hist, start + hist + pre);
        let i = set.windows.len();
        set.windows.push(Window {
            start,
            input: rows[start..t0].concat(),
            target: rows[t0..t1].concat(),
        });
        if t1 <= train_end {
            set.train.push(i);
        } else if t0 >= train_end && t1 <= val_end {
            set.val.push(i);
        } else if t0 >= val_end {
            set.test.push(i);
        }
    }
    Ok(set)
}
