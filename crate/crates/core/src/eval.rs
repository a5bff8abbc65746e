//! Forecast metrics, secrecy replay of predicted layouts, inference timing
//! and report files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ArrayLayout, ChannelError, NodeState, SecrecyEvaluator};
use crate::dataset::{Dataset, WindowSet};
use crate::models::{persistence, Model, ModelError};
use crate::rng::substream;
use crate::scenario::{ScenarioConfig, ScenarioError};

const TAG_REPLAY: u64 = 0x5E9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("truth has zero norm")]
    ZeroNorm,
    #[error("prediction has {pred} values, truth has {truth}")]
    Length { pred: usize, truth: usize },
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("threshold must be positive, got {0}")]
    Threshold(f64),
    #[error("horizon {horizon} from slot {origin} runs past the {slots}-slot dataset")]
    Horizon { horizon: usize, origin: usize, slots: usize },
    #[error("at least 10 timed runs are required, got {0}")]
    Repetitions(usize),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

fn same_len(pred: &[f64], truth: &[f64]) -> Result<(), EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Length { pred: pred.len(), truth: truth.len() });
    }
    Ok(())
}

/// `Σ‖p − t‖² / Σ‖t‖²` over all slots.
pub fn nmse(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    same_len(pred, truth)?;
    let den: f64 = truth.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(EvalError::ZeroNorm);
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / den)
}

/// Mean squared coordinate error.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    same_len(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / truth.len().max(1) as f64)
}

/// Fraction of (slot, antenna) positions within Euclidean distance `eps`
/// (metres) of the truth. Inputs are flattened `x, y, z` triples.
pub fn accuracy_at_threshold(pred: &[f64], truth: &[f64], eps: f64) -> Result<f64, EvalError> {
    same_len(pred, truth)?;
    if !(eps > 0.0) {
        return Err(EvalError::Threshold(eps));
    }
    let n = truth.len() / 3;
    if n == 0 {
        return Ok(1.0);
    }
    let hits = pred
        .chunks_exact(3)
        .zip(truth.chunks_exact(3))
        .filter(|(p, t)| p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= eps)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Box-plot summary with linearly interpolated quartiles and whiskers at
/// the most extreme samples within 1.5·IQR of the box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: usize,
}

/// Quantile of sorted data, interpolating between order statistics at
/// position `q·(n − 1)`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn mse_stats(samples: &[f64]) -> Result<BoxStats, EvalError> {
    if samples.len() < 4 {
        return Err(EvalError::TooFewSamples { needed: 4, found: samples.len() });
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = s.iter().copied().filter(|v| (lo..=hi).contains(v)).collect();
    Ok(BoxStats {
        count: s.len(),
        mean: s.iter().sum::<f64>() / s.len() as f64,
        min: s[0],
        q1,
        median,
        q3,
        max: s[s.len() - 1],
        whisker_lo: inside[0],
        whisker_hi: inside[inside.len() - 1],
        outliers: s.len() - inside.len(),
    })
}

/// Anything that turns a metre-valued history into a forecast.
pub trait Forecaster {
    fn name(&self) -> String;
    /// Flattened `horizon × 3M` positions in metres.
    fn forecast(&self, history: &[f64], horizon: usize) -> Result<Vec<f64>, EvalError>;
}

impl Forecaster for Model {
    fn name(&self) -> String {
        self.kind().to_string()
    }

    fn forecast(&self, history: &[f64], horizon: usize) -> Result<Vec<f64>, EvalError> {
        Ok(self.rollout(history, horizon)?.positions)
    }
}

/// Repeats the last observed layout.
#[derive(Debug, Clone, Copy)]
pub struct Persistence {
    pub width: usize,
}

impl Forecaster for Persistence {
    fn name(&self) -> String {
        "persistence".into()
    }

    fn forecast(&self, history: &[f64], horizon: usize) -> Result<Vec<f64>, EvalError> {
        Ok(persistence(history, self.width, horizon))
    }
}

/// Flattened `slots × 3M` stored layouts.
pub fn layout_matrix(ds: &Dataset) -> Vec<f64> {
    ds.records.iter().flat_map(|r| r.layout.to_flat()).collect()
}

/// NMSE of one forecast started at `origin` and truncated to each horizon.
/// The history is the `hist` slots before `origin`.
pub fn horizon_nmse(
    f: &dyn Forecaster,
    ds: &Dataset,
    hist: usize,
    origin: usize,
    horizons: &[usize],
) -> Result<Vec<(usize, f64)>, EvalError> {
    let n = ds.records.len();
    let longest = horizons.iter().copied().max().unwrap_or(0);
    if origin + longest > n || origin < hist {
        return Err(EvalError::Horizon { horizon: longest, origin, slots: n });
    }
    let w = 3 * ds.meta.antennas;
    let flat = layout_matrix(ds);
    let pred = f.forecast(&flat[(origin - hist) * w..origin * w], longest)?;
    horizons
        .iter()
        .map(|&h| Ok((h, nmse(&pred[..h * w], &flat[origin * w..(origin + h) * w])?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Path-loss exponent.
    Alpha,
    /// Receiver noise power, W.
    NoisePower,
    /// Transmit power, W.
    TxPower,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::NoisePower => "noise_power_w",
            SweepParam::TxPower => "tx_power_w",
        }
    }

    fn apply(self, scenario: &mut ScenarioConfig, value: f64) {
        match self {
            SweepParam::Alpha => scenario.alpha = value,
            SweepParam::NoisePower => scenario.noise_w = value,
            SweepParam::TxPower => scenario.tx_power_w = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub slot: usize,
    pub param: SweepParam,
    pub value: f64,
    pub fixed: f64,
    pub optimal: f64,
    pub predicted: f64,
}

/// Expected secrecy of the fixed grid, the stored optimal layout and the
/// predicted layout for every slot and sweep value. `predicted[i]` belongs
/// to `slots[i]`. With `pure_los`, NLoS paths are dropped.
pub fn secrecy_replay(
    ds: &Dataset,
    slots: &[usize],
    predicted: &[ArrayLayout],
    scenario: &ScenarioConfig,
    sweeps: &[Sweep],
    pure_los: bool,
    seed: u64,
) -> Result<Vec<ReplayRow>, EvalError> {
    assert_eq!(slots.len(), predicted.len(), "one predicted layout per slot");
    let fixed = scenario.fixed_layout()?;
    let jobs: Vec<(usize, &Sweep, f64)> = (0..slots.len())
        .flat_map(|i| sweeps.iter().flat_map(move |s| s.values.iter().map(move |&v| (i, s, v))))
        .collect();
    jobs.into_par_iter()
        .map(|(i, sweep, value)| {
            let slot = slots[i];
            let rec = &ds.records[slot];
            let mut sc = scenario.clone();
            sweep.param.apply(&mut sc, value);
            if pure_los {
                sc.nlos_paths = 0;
            }
            let link = sc.link_model()?;
            let rng = &mut substream(seed, &[TAG_REPLAY, slot as u64]);
            let ev = SecrecyEvaluator::new(&link, &NodeState::bob(rec.bob), &NodeState::eve(rec.eve), rng)?;
            Ok(ReplayRow {
                slot,
                param: sweep.param,
                value,
                fixed: ev.evaluate(&fixed),
                optimal: ev.evaluate(&rec.layout),
                predicted: ev.evaluate(&predicted[i]),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub runs_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
}

pub const TIMING_WARMUP: usize = 3;

/// Wall-clock statistics of `Model::predict` over `repetitions` runs after
/// discarding warm-up runs.
pub fn time_inference(model: &Model, history: &[f64], repetitions: usize) -> Result<Timing, EvalError> {
    if repetitions < 10 {
        return Err(EvalError::Repetitions(repetitions));
    }
    for _ in 0..TIMING_WARMUP {
        std::hint::black_box(model.predict(history)?);
    }
    let mut runs_ms = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        std::hint::black_box(model.predict(std::hint::black_box(history))?);
        runs_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = runs_ms.iter().sum::<f64>() / repetitions as f64;
    let var = runs_ms.iter().map(|r| (r - mean_ms).powi(2)).sum::<f64>() / (repetitions - 1) as f64;
    Ok(Timing { runs_ms, mean_ms, std_ms: var.sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Accuracy threshold, metres.
    pub accuracy_eps_m: f64,
    /// Forecast horizons in slots, counted from the end of the train split.
    pub horizons: Vec<usize>,
    pub alpha_grid: Vec<f64>,
    /// Noise power grid, W.
    pub noise_grid_w: Vec<f64>,
    /// Transmit power grid, W.
    pub power_grid_w: Vec<f64>,
    /// Replay with LoS paths only.
    pub pure_los: bool,
    /// Timed `predict` calls per model.
    pub repetitions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            accuracy_eps_m: 5e-4,
            horizons: vec![10, 20, 30, 40, 50, 60],
            alpha_grid: vec![2.0, 2.5, 3.0, 3.5, 4.0],
            noise_grid_w: vec![1e-7, 1e-6, 1e-5, 1e-4, 1e-3],
            power_grid_w: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            pure_los: true,
            repetitions: 50,
        }
    }
}

impl EvalConfig {
    pub fn sweeps(&self) -> Vec<Sweep> {
        vec![
            Sweep { param: SweepParam::Alpha, values: self.alpha_grid.clone() },
            Sweep { param: SweepParam::NoisePower, values: self.noise_grid_w.clone() },
            Sweep { param: SweepParam::TxPower, values: self.power_grid_w.clone() },
        ]
    }
}

/// All metrics for one forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    /// Block NMSE over every test window, normalised units.
    pub nmse: f64,
    pub horizon_nmse: Vec<(usize, f64)>,
    pub accuracy: f64,
    /// Per-window MSE over the test windows, m².
    pub mse: BoxStats,
    pub inference: Option<Timing>,
    pub replay: Vec<ReplayRow>,
}

/// Slots covered by consecutive non-overlapping `pre`-slot blocks from the
/// start of the test split.
pub fn test_blocks(set: &WindowSet, slots: usize) -> Vec<usize> {
    (set.boundaries.1..).step_by(set.pre).take_while(|s| s + set.pre <= slots).collect()
}

/// Evaluates one forecaster on the test split of `set` built from `ds`.
pub fn evaluate(
    f: &dyn Forecaster,
    ds: &Dataset,
    set: &WindowSet,
    scenario: &ScenarioConfig,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricReport, EvalError> {
    let w = set.width();
    let flat = layout_matrix(ds);
    let norm = set.normalizer;

    let (mut num, mut den) = (0.0, 0.0);
    let mut window_mse = Vec::with_capacity(set.test.len());
    for win in set.subset(&set.test) {
        let pred_m = f.forecast(&norm.denormalize(&win.input), set.pre)?;
        window_mse.push(mse(&pred_m, &norm.denormalize(&win.target))?);
        let pred = norm.normalize(&pred_m);
        num += pred.iter().zip(&win.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        den += win.target.iter().map(|v| v * v).sum::<f64>();
    }
    let window_nmse = if den > 0.0 { num / den } else { f64::NAN };

    let horizons: Vec<usize> = cfg.horizons.iter().copied().filter(|&h| set.boundaries.0 + h <= ds.records.len()).collect();
    let horizon_nmse = horizon_nmse(f, ds, set.hist, set.boundaries.0, &horizons)?;

    let (mut preds, mut truths, mut slots, mut layouts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for start in test_blocks(set, ds.records.len()) {
        let pred = f.forecast(&flat[(start - set.hist) * w..start * w], set.pre)?;
        let truth = &flat[start * w..(start + set.pre) * w];
        for (k, row) in pred.chunks_exact(w).enumerate() {
            slots.push(start + k);
            layouts.push(ArrayLayout::from_flat(row, start + k));
        }
        preds.extend_from_slice(&pred);
        truths.extend_from_slice(truth);
    }
    let accuracy = accuracy_at_threshold(&preds, &truths, cfg.accuracy_eps_m)?;
    let mse = mse_stats(&window_mse)?;
    let replay = secrecy_replay(ds, &slots, &layouts, scenario, &cfg.sweeps(), cfg.pure_los, seed)?;
    Ok(MetricReport { model: f.name(), nmse: window_nmse, horizon_nmse, accuracy, mse, inference: None, replay })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub description: String,
    /// Whether the file depends only on (config, seed). Timing files do not.
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportManifest {
    pub models: Vec<String>,
    pub files: Vec<ManifestEntry>,
}

/// Writes CSV tables, standalone SVG charts and `manifest.json`.
pub fn emit_report(reports: &[MetricReport], out_dir: &Path) -> Result<ReportManifest, EvalError> {
    let io_err = |p: &Path| {
        let path = p.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut files = Vec::new();
    let mut put = |name: &str, description: &str, deterministic: bool, body: String| -> Result<(), EvalError> {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
        files.push(ManifestEntry { file: name.into(), description: description.into(), deterministic });
        Ok(())
    };

    let mut s = String::from("model,nmse,accuracy\n");
    for r in reports {
        writeln!(s, "{},{},{}", r.model, r.nmse, r.accuracy).unwrap();
    }
    put("summary.csv", "test-window NMSE (normalised) and accuracy at the threshold", true, s)?;

    let mut s = String::from("model,horizon,nmse\n");
    for r in reports {
        for (h, v) in &r.horizon_nmse {
            writeln!(s, "{},{h},{v}", r.model).unwrap();
        }
    }
    put("nmse_by_horizon.csv", "NMSE of one forecast truncated to each horizon (slots)", true, s)?;

    let mut s = String::from("model,count,mean,min,q1,median,q3,max,whisker_lo,whisker_hi,outliers\n");
    for r in reports {
        let b = r.mse;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.model, b.count, b.mean, b.min, b.q1, b.median, b.q3, b.max, b.whisker_lo, b.whisker_hi, b.outliers
        )
        .unwrap();
    }
    put("mse_box.csv", "per-window MSE box statistics, m^2", true, s)?;

    let mut s = String::from("model,slot,param,value,fixed,optimal,predicted\n");
    for r in reports {
        for row in &r.replay {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.model,
                row.slot,
                row.param.name(),
                row.value,
                row.fixed,
                row.optimal,
                row.predicted
            )
            .unwrap();
        }
    }
    put("secrecy_replay.csv", "expected secrecy (bit/s/Hz) per slot and swept parameter", true, s)?;

    let timed: Vec<&MetricReport> = reports.iter().filter(|r| r.inference.is_some()).collect();
    if !timed.is_empty() {
        let mut s = String::from("model,runs,mean_ms,std_ms\n");
        for r in timed {
            let t = r.inference.as_ref().unwrap();
            writeln!(s, "{},{},{:.6},{:.6}", r.model, t.runs_ms.len(), t.mean_ms, t.std_ms).unwrap();
        }
        put("inference.csv", "wall-clock predict() latency, ms", false, s)?;
    }

    let series: Vec<Series> = reports
        .iter()
        .map(|r| Series { name: r.model.clone(), points: r.horizon_nmse.iter().map(|&(h, v)| (h as f64, v)).collect() })
        .collect();
    put("nmse_by_horizon.svg", "NMSE against horizon", true, line_chart("NMSE vs horizon", "horizon (slots)", "NMSE", &series, false))?;
    let boxes: Vec<(String, BoxStats)> = reports.iter().map(|r| (r.model.clone(), r.mse)).collect();
    put("mse_box.svg", "per-window MSE box plot", true, box_chart("Prediction MSE", "MSE (m^2)", &boxes))?;

    for param in [SweepParam::Alpha, SweepParam::NoisePower, SweepParam::TxPower] {
        let mut series = Vec::new();
        for (i, r) in reports.iter().enumerate() {
            let rows: Vec<&ReplayRow> = r.replay.iter().filter(|row| row.param == param).collect();
            if rows.is_empty() {
                continue;
            }
            if i == 0 {
                series.push(Series { name: "fixed".into(), points: sweep_means(&rows, |row| row.fixed) });
                series.push(Series { name: "optimal".into(), points: sweep_means(&rows, |row| row.optimal) });
            }
            series.push(Series { name: r.model.clone(), points: sweep_means(&rows, |row| row.predicted) });
        }
        let log_x = param == SweepParam::NoisePower;
        let name = format!("secrecy_vs_{}.svg", param.name());
        let chart = line_chart(&format!("Secrecy rate vs {}", param.name()), param.name(), "secrecy (bit/s/Hz)", &series, log_x);
        put(&name, "mean replayed secrecy across test slots", true, chart)?;
    }

    let manifest = ReportManifest { models: reports.iter().map(|r| r.model.clone()).collect(), files };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

fn sweep_means(rows: &[&ReplayRow], pick: impl Fn(&ReplayRow) -> f64) -> Vec<(f64, f64)> {
    let mut values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    values
        .into_iter()
        .map(|v| {
            let sel: Vec<f64> = rows.iter().filter(|r| r.value == v).map(|r| pick(r)).collect();
            (v, sel.iter().sum::<f64>() / sel.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: (f64, f64, f64, f64) = (70.0, 150.0, 40.0, 50.0);

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    log_x: bool,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, log_x: bool) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-300 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let tx = |v: f64| if log_x { v.log10() } else { v };
        let x = span(&mut xs.map(tx));
        let (lo, hi) = span(&mut ys.clone());
        let m = 0.05 * (hi - lo);
        Self { x, y: (lo - m, hi + m), log_x }
    }

    fn px(&self, v: f64) -> f64 {
        let v = if self.log_x { v.log10() } else { v };
        PAD.0 + (v - self.x.0) / (self.x.1 - self.x.0) * (W - PAD.0 - PAD.1)
    }

    fn py(&self, v: f64) -> f64 {
        H - PAD.3 - (v - self.y.0) / (self.y.1 - self.y.0) * (H - PAD.2 - PAD.3)
    }
}

fn svg_open(title: &str, y_label: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    writeln!(s, "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>", (W - PAD.1 + PAD.0) / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        "<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">{1}</text>",
        H / 2.0,
        escape(y_label)
    )
    .unwrap();
    writeln!(
        s,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        PAD.0,
        PAD.2,
        W - PAD.0 - PAD.1,
        H - PAD.2 - PAD.3
    )
    .unwrap();
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick(v: f64) -> String {
    if v == 0.0 || (1e-2..1e4).contains(&v.abs()) {
        format!("{}", (v * 1e4).round() / 1e4)
    } else {
        format!("{v:.1e}")
    }
}

fn y_ticks(s: &mut String, f: &Frame) {
    for i in 0..=4 {
        let v = f.y.0 + (f.y.1 - f.y.0) * i as f64 / 4.0;
        let y = f.py(v);
        writeln!(s, "<line x1=\"{}\" x2=\"{}\" y1=\"{y:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>", PAD.0, W - PAD.1).unwrap();
        writeln!(s, "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", PAD.0 - 4.0, y + 4.0, tick(v)).unwrap();
    }
}

fn legend(s: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = PAD.2 + 10.0 + 18.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        writeln!(s, "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{c}\"/>", W - PAD.1 + 12.0, y - 10.0).unwrap();
        writeln!(s, "<text x=\"{}\" y=\"{y}\">{}</text>", W - PAD.1 + 30.0, escape(n)).unwrap();
    }
}

/// Standalone SVG line chart, one polyline per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> String {
    let pts = || series.iter().flat_map(|s| s.points.iter().copied());
    let f = Frame::new(pts().map(|p| p.0), pts().map(|p| p.1), log_x);
    let mut s = svg_open(title, y_label);
    y_ticks(&mut s, &f);
    let mut xs: Vec<f64> = pts().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in xs {
        writeln!(s, "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>", f.px(x), H - PAD.3 + 16.0, tick(x)).unwrap();
    }
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", (W - PAD.1 + PAD.0) / 2.0, H - 8.0, escape(x_label)).unwrap();
    for (i, se) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = se.points.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>", path.join(" ")).unwrap();
        for p in &path {
            let (x, y) = p.split_once(',').unwrap();
            writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{c}\"/>").unwrap();
        }
    }
    legend(&mut s, &series.iter().map(|se| se.name.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Standalone SVG box plot with whiskers.
pub fn box_chart(title: &str, y_label: &str, boxes: &[(String, BoxStats)]) -> String {
    let vals = || boxes.iter().flat_map(|(_, b)| [b.whisker_lo, b.whisker_hi, b.min, b.max]);
    let f = Frame::new([0.0, boxes.len().max(1) as f64].into_iter(), vals(), false);
    let mut s = svg_open(title, y_label);
    y_ticks(&mut s, &f);
    let slot = (W - PAD.0 - PAD.1) / boxes.len().max(1) as f64;
    for (i, (name, b)) in boxes.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let cx = PAD.0 + slot * (i as f64 + 0.5);
        let hw = slot * 0.25;
        let (q1, q3, med) = (f.py(b.q1), f.py(b.q3), f.py(b.median));
        writeln!(s, "<line x1=\"{cx:.2}\" x2=\"{cx:.2}\" y1=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>", f.py(b.whisker_lo), f.py(b.whisker_hi)).unwrap();
        for w in [b.whisker_lo, b.whisker_hi] {
            writeln!(s, "<line x1=\"{:.2}\" x2=\"{:.2}\" y1=\"{1:.2}\" y2=\"{1:.2}\" stroke=\"black\"/>", cx - hw / 2.0, f.py(w)).unwrap();
        }
        writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{q3:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{c}\" fill-opacity=\"0.4\" stroke=\"{c}\"/>",
            cx - hw,
            2.0 * hw,
            (q1 - q3).max(0.5)
        )
        .unwrap();
        writeln!(s, "<line x1=\"{:.2}\" x2=\"{:.2}\" y1=\"{med:.2}\" y2=\"{med:.2}\" stroke=\"black\" stroke-width=\"2\"/>", cx - hw, cx + hw).unwrap();
        writeln!(s, "<text x=\"{cx:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>", H - PAD.3 + 16.0, escape(name)).unwrap();
    }
    legend(&mut s, &boxes.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Array gain over azimuth, dB, at one elevation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    pub azimuth_deg: f64,
    pub fixed_db: f64,
    pub optimized_db: f64,
    pub mrt_db: f64,
}

fn db(g: f64) -> f64 {
    10.0 * g.max(1e-30).log10()
}

/// Sweeps azimuth in `step_deg` increments at the elevation of `target`
/// (a direction from the array centre). `fixed` and `optimized` use
/// equal-power weights; the MRT column steers `optimized` at `target`.
pub fn gain_pattern(
    fixed: &ArrayLayout,
    optimized: &ArrayLayout,
    target: crate::channel::Vec3,
    tx_power: f64,
    wavelength: f64,
    step_deg: f64,
) -> Result<Vec<PatternRow>, EvalError> {
    use crate::channel::{array_pattern_gain, equal_power_weights, mrt_weights, PathAngle, Vec3};
    use num_complex::Complex64;
    if !(step_deg > 0.0) {
        return Err(EvalError::Threshold(step_deg));
    }
    let aim = PathAngle::between(Vec3::ZERO, target);
    let k = aim.direction() * (2.0 * std::f64::consts::PI / wavelength);
    // Channel toward the target in the hᴴw convention of the SNR.
    let h: Vec<Complex64> = optimized.positions.iter().map(|p| Complex64::cis(-k.dot(*p))).collect();
    let w_mrt = mrt_weights(&h, tx_power)?;
    let w_fixed = equal_power_weights(fixed.len(), tx_power);
    let w_opt = equal_power_weights(optimized.len(), tx_power);
    let steps = (360.0 / step_deg).round() as usize;
    Ok((0..steps)
        .map(|i| {
            let az = -180.0 + i as f64 * step_deg;
            let phi = az.to_radians();
            PatternRow {
                azimuth_deg: az,
                fixed_db: db(array_pattern_gain(fixed, &w_fixed, aim.theta, phi, wavelength)),
                optimized_db: db(array_pattern_gain(optimized, &w_opt, aim.theta, phi, wavelength)),
                mrt_db: db(array_pattern_gain(optimized, &w_mrt, aim.theta, phi, wavelength)),
            }
        })
        .collect())
}
