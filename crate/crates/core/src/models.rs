//! Antenna-position predictors: the LSTM/attention/BiLSTM hybrid and the
//! LSTM-only, Transformer-only and NARX baselines, with training,
//! prediction and model files.
//!
//! Models consume a `hist × 3M` window of normalised layouts and emit a
//! `pre × 3M` block. With `residual` set, the head predicts displacements
//! from the last observed layout.

use std::fs;
use std::io::{self, Write as _};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{BoxBounds, Vec3};
use crate::dataset::{Normalizer, Window, WindowSet};
use crate::nn::*;
use crate::rng::{seeded, Rng};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MODEL_MAGIC: &str = "MAPD-MODEL v";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Proposed,
    LstmOnly,
    TransformerOnly,
    Narx,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Proposed, ModelKind::LstmOnly, ModelKind::TransformerOnly, ModelKind::Narx];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Proposed => "proposed",
            ModelKind::LstmOnly => "lstm_only",
            ModelKind::TransformerOnly => "transformer_only",
            ModelKind::Narx => "narx",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Token axis of the hybrid model's attention stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionAxis {
    /// Tokens are time steps carrying fused antenna features.
    Time,
    /// At every time step, tokens are the M per-antenna encodings.
    Antenna,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Antenna count M.
    pub antennas: usize,
    /// History window length, slots.
    pub hist: usize,
    /// Predicted block length, slots.
    pub pre: usize,
    pub lstm_hidden: usize,
    pub d_model: usize,
    pub heads: usize,
    pub dropout: f64,
    pub bilstm_hidden: usize,
    pub attention_axis: AttentionAxis,
    /// Hidden width of every LSTM-only layer.
    pub baseline_hidden: usize,
    pub baseline_layers: usize,
    pub transformer_blocks: usize,
    pub ffn_hidden: usize,
    pub narx_delays: usize,
    pub narx_hidden: usize,
    pub residual: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement
    /// (0 trains for every epoch).
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Proposed,
            antennas: 9,
            hist: 20,
            pre: 10,
            lstm_hidden: 16,
            d_model: 32,
            heads: 4,
            dropout: 0.1,
            bilstm_hidden: 16,
            attention_axis: AttentionAxis::Time,
            baseline_hidden: 32,
            baseline_layers: 2,
            transformer_blocks: 2,
            ffn_hidden: 64,
            narx_delays: 5,
            narx_hidden: 64,
            residual: true,
            learning_rate: 0.001,
            epochs: 150,
            patience: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        3 * self.antennas
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let sizes = [
            ("antennas", self.antennas),
            ("hist", self.hist),
            ("pre", self.pre),
            ("lstm_hidden", self.lstm_hidden),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("bilstm_hidden", self.bilstm_hidden),
            ("baseline_hidden", self.baseline_hidden),
            ("baseline_layers", self.baseline_layers),
            ("ffn_hidden", self.ffn_hidden),
            ("narx_delays", self.narx_delays),
            ("narx_hidden", self.narx_hidden),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be at least 1"));
        }
        match (self.kind, self.attention_axis) {
            (ModelKind::Proposed, AttentionAxis::Time) | (ModelKind::TransformerOnly, _) if self.d_model % self.heads != 0 => {
                return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
            }
            (ModelKind::Proposed, AttentionAxis::Antenna) if self.lstm_hidden % self.heads != 0 => {
                return bad(format!("lstm_hidden {} is not divisible by {} heads", self.lstm_hidden, self.heads));
            }
            (ModelKind::Narx, _) if self.narx_delays > self.hist => {
                return bad(format!("narx_delays {} exceeds hist {}", self.narx_delays, self.hist));
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input has {found} values, expected {expected}")]
    Input { expected: usize, found: usize },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("no training windows")]
    EmptyTrainSet,
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("model format version {found} is not supported (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("model file holds a {found} model, expected {expected}")]
    KindMismatch { expected: ModelKind, found: ModelKind },
    #[error("weight blob has {actual} bytes, manifest requires {expected}")]
    Truncated { expected: usize, actual: usize },
    #[error("parameter {name} has shape {found:?}, config implies {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
struct ProposedNet {
    encoders: Vec<Lstm>,
    fuse: Dense,
    attention: MultiHeadAttention,
    bilstm: BiLstm,
    head: Dense,
}

#[derive(Debug, Clone, PartialEq)]
struct LstmNet {
    layers: Vec<Lstm>,
    head: Dense,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    attention: MultiHeadAttention,
    ffn_in: Dense,
    ffn_out: Dense,
}

#[derive(Debug, Clone, PartialEq)]
struct TransformerNet {
    embed: Dense,
    blocks: Vec<Block>,
    head: Dense,
}

#[derive(Debug, Clone, PartialEq)]
struct NarxNet {
    hidden: Dense,
    out: Dense,
}

#[derive(Debug, Clone, PartialEq)]
enum Net {
    Proposed(ProposedNet),
    LstmOnly(LstmNet),
    TransformerOnly(TransformerNet),
    Narx(NarxNet),
}

/// A predictor with its weights, the normaliser it was trained with, and
/// the antenna box used to clamp its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub normalizer: Normalizer,
    pub bounds: BoxBounds,
    net: Net,
}

/// Number of scalar parameters implied by `config`.
pub fn expected_param_count(c: &ModelConfig) -> usize {
    let w = c.width();
    match c.kind {
        ModelKind::Proposed => {
            let mh = c.antennas * c.lstm_hidden;
            let attention = match c.attention_axis {
                AttentionAxis::Time => MultiHeadAttention::param_count(c.d_model),
                AttentionAxis::Antenna => MultiHeadAttention::param_count(c.lstm_hidden),
            };
            c.antennas * Lstm::param_count(3, c.lstm_hidden)
                + Dense::param_count(mh, c.d_model)
                + attention
                + BiLstm::param_count(mh + c.d_model, c.bilstm_hidden)
                + Dense::param_count(2 * c.bilstm_hidden, c.pre * w)
        }
        ModelKind::LstmOnly => {
            Lstm::param_count(w, c.baseline_hidden)
                + (c.baseline_layers - 1) * Lstm::param_count(c.baseline_hidden, c.baseline_hidden)
                + Dense::param_count(c.baseline_hidden, c.pre * w)
        }
        ModelKind::TransformerOnly => {
            Dense::param_count(w, c.d_model)
                + c.transformer_blocks
                    * (MultiHeadAttention::param_count(c.d_model)
                        + Dense::param_count(c.d_model, c.ffn_hidden)
                        + Dense::param_count(c.ffn_hidden, c.d_model))
                + Dense::param_count(c.d_model, c.pre * w)
        }
        ModelKind::Narx => Dense::param_count(c.narx_delays * w, c.narx_hidden) + Dense::param_count(c.narx_hidden, w),
    }
}

fn identity_normalizer() -> Normalizer {
    Normalizer::new(crate::dataset::AxisRange { min: [0.0; 3], max: [1.0; 3] })
}

fn build_net(c: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Net, ModelError> {
    let w = c.width();
    let heads_err = |e: NnError| ModelError::Config(e.to_string());
    Ok(match c.kind {
        ModelKind::Proposed => {
            let mh = c.antennas * c.lstm_hidden;
            let encoders = (0..c.antennas)
                .map(|m| Lstm::new(store, rng, &format!("encoder{m}"), 3, c.lstm_hidden))
                .collect();
            let (fuse, attention) = match c.attention_axis {
                AttentionAxis::Time => {
                    let fuse = Dense::new(store, rng, "fuse", mh, c.d_model);
                    (fuse, MultiHeadAttention::new(store, rng, "attention", c.d_model, c.heads).map_err(heads_err)?)
                }
                AttentionAxis::Antenna => {
                    let att = MultiHeadAttention::new(store, rng, "attention", c.lstm_hidden, c.heads).map_err(heads_err)?;
                    (Dense::new(store, rng, "fuse", mh, c.d_model), att)
                }
            };
            let bilstm = BiLstm::new(store, rng, "bilstm", mh + c.d_model, c.bilstm_hidden);
            let head = Dense::new(store, rng, "head", 2 * c.bilstm_hidden, c.pre * w);
            Net::Proposed(ProposedNet { encoders, fuse, attention, bilstm, head })
        }
        ModelKind::LstmOnly => {
            let layers = (0..c.baseline_layers)
                .map(|l| {
                    let input = if l == 0 { w } else { c.baseline_hidden };
                    Lstm::new(store, rng, &format!("lstm{l}"), input, c.baseline_hidden)
                })
                .collect();
            let head = Dense::new(store, rng, "head", c.baseline_hidden, c.pre * w);
            Net::LstmOnly(LstmNet { layers, head })
        }
        ModelKind::TransformerOnly => {
            let embed = Dense::new(store, rng, "embed", w, c.d_model);
            let blocks = (0..c.transformer_blocks)
                .map(|b| {
                    Ok(Block {
                        attention: MultiHeadAttention::new(store, rng, &format!("block{b}.attention"), c.d_model, c.heads)
                            .map_err(heads_err)?,
                        ffn_in: Dense::new(store, rng, &format!("block{b}.ffn_in"), c.d_model, c.ffn_hidden),
                        ffn_out: Dense::new(store, rng, &format!("block{b}.ffn_out"), c.ffn_hidden, c.d_model),
                    })
                })
                .collect::<Result<_, ModelError>>()?;
            let head = Dense::new(store, rng, "head", c.d_model, c.pre * w);
            Net::TransformerOnly(TransformerNet { embed, blocks, head })
        }
        ModelKind::Narx => Net::Narx(NarxNet {
            hidden: Dense::new(store, rng, "hidden", c.narx_delays * w, c.narx_hidden),
            out: Dense::new(store, rng, "out", c.narx_hidden, w),
        }),
    })
}

/// `T × d` sinusoidal position table.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            pe[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    pe
}

fn columns(x: &[f64], width: usize, from: usize, count: usize) -> Vec<f64> {
    x.chunks_exact(width).flat_map(|r| r[from..from + count].iter().copied()).collect()
}

fn add_columns(dst: &mut [f64], width: usize, from: usize, src: &[f64], count: usize) {
    for (r, s) in dst.chunks_exact_mut(width).zip(src.chunks_exact(count)) {
        r[from..from + count].iter_mut().zip(s).for_each(|(d, v)| *d += v);
    }
}

fn hcat(a: &[f64], wa: usize, b: &[f64], wb: usize) -> Vec<f64> {
    a.chunks_exact(wa).zip(b.chunks_exact(wb)).flat_map(|(x, y)| x.iter().chain(y).copied()).collect()
}

#[derive(Debug, Clone)]
enum ProposedStage {
    Time { fused: Vec<f64>, attention: AttentionCache },
    Antenna { attention: Vec<AttentionCache>, attended: Vec<f64>, fused: Vec<f64> },
}

#[derive(Debug, Clone)]
enum NetCache {
    Proposed {
        encoders: Vec<SeqCache>,
        features: Vec<f64>,
        stage: ProposedStage,
        mask: Vec<f64>,
        bilstm: BiCache,
        summary: Vec<f64>,
    },
    LstmOnly {
        layers: Vec<(Vec<f64>, SeqCache)>,
        last: Vec<f64>,
    },
    TransformerOnly {
        input: Vec<f64>,
        blocks: Vec<(AttentionCache, Vec<f64>, Vec<f64>, Vec<f64>)>,
        last: Vec<f64>,
    },
    Narx {
        /// Per rollout step: delay-line input and hidden activation.
        steps: Vec<(Vec<f64>, Vec<f64>)>,
    },
}

/// Activations kept by [`Model::forward`] for [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net: NetCache,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded(config.seed);
        let net = build_net(&config, &mut store, &mut rng)?;
        if config.residual {
            // An untrained residual model is the persistence predictor.
            let head = if config.kind == ModelKind::Narx { "out." } else { "head." };
            for p in store.params_mut().iter_mut().filter(|p| p.name.starts_with(head)) {
                p.value.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(Self {
            config,
            store,
            normalizer: identity_normalizer(),
            bounds: BoxBounds::new(Vec3::new(f64::MIN, f64::MIN, f64::MIN), Vec3::new(f64::MAX, f64::MAX, f64::MAX)),
            net,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        let expected = self.config.hist * self.config.width();
        if x.len() != expected {
            return Err(ModelError::Input { expected, found: x.len() });
        }
        Ok(())
    }

    /// Runs the network on one normalised window. `rng` enables dropout.
    pub fn forward(&self, x: &[f64], rng: Option<&mut Rng>) -> Result<(Vec<f64>, ForwardCache), ModelError> {
        self.check_input(x)?;
        let c = &self.config;
        let (w, t) = (c.width(), c.hist);
        let s = &self.store;
        let (mut y, net) = match &self.net {
            Net::Proposed(p) => {
                let h = c.lstm_hidden;
                let mh = c.antennas * h;
                let mut features = vec![0.0; t * mh];
                let mut encoders = Vec::with_capacity(c.antennas);
                for (m, enc) in p.encoders.iter().enumerate() {
                    let (hs, cache) = enc.forward(s, &columns(x, w, 3 * m, 3), Direction::Forward);
                    add_columns(&mut features, mh, m * h, &hs, h);
                    encoders.push(cache);
                }
                let (z, stage) = match c.attention_axis {
                    AttentionAxis::Time => {
                        let fused = tanh_forward(&p.fuse.forward(s, &features));
                        let (a, attention) = p.attention.forward(s, &fused);
                        (a, ProposedStage::Time { fused, attention })
                    }
                    AttentionAxis::Antenna => {
                        let mut attended = Vec::with_capacity(t * mh);
                        let mut caches = Vec::with_capacity(t);
                        for row in features.chunks_exact(mh) {
                            let (a, cache) = p.attention.forward(s, row);
                            attended.extend(a);
                            caches.push(cache);
                        }
                        let fused = tanh_forward(&p.fuse.forward(s, &attended));
                        (fused.clone(), ProposedStage::Antenna { attention: caches, attended, fused })
                    }
                };
                let (dropped, mask) = dropout(&z, c.dropout, rng);
                let joined = hcat(&features, mh, &dropped, c.d_model);
                let (b, bilstm) = p.bilstm.forward(s, &joined);
                let bh = c.bilstm_hidden;
                let mut summary = b[(t - 1) * 2 * bh..(t - 1) * 2 * bh + bh].to_vec();
                summary.extend_from_slice(&b[bh..2 * bh]);
                let y = p.head.forward(s, &summary);
                (y, NetCache::Proposed { encoders, features, stage, mask, bilstm, summary })
            }
            Net::LstmOnly(n) => {
                let mut input = x.to_vec();
                let mut layers = Vec::with_capacity(n.layers.len());
                for l in &n.layers {
                    let (hs, cache) = l.forward(s, &input, Direction::Forward);
                    layers.push((std::mem::replace(&mut input, hs), cache));
                }
                let hb = c.baseline_hidden;
                let last = input[(t - 1) * hb..].to_vec();
                (n.head.forward(s, &last), NetCache::LstmOnly { layers, last })
            }
            Net::TransformerOnly(n) => {
                let d = c.d_model;
                let mut z = n.embed.forward(s, x);
                z.iter_mut().zip(positional_encoding(t, d)).for_each(|(a, p)| *a += p);
                let mut blocks = Vec::with_capacity(n.blocks.len());
                for b in &n.blocks {
                    let (att, cache) = b.attention.forward(s, &z);
                    let a: Vec<f64> = z.iter().zip(&att).map(|(u, v)| u + v).collect();
                    let hidden = tanh_forward(&b.ffn_in.forward(s, &a));
                    let f = b.ffn_out.forward(s, &hidden);
                    z = a.iter().zip(&f).map(|(u, v)| u + v).collect();
                    blocks.push((cache, a, hidden, z.clone()));
                }
                let last = z[(t - 1) * d..].to_vec();
                (n.head.forward(s, &last), NetCache::TransformerOnly { input: x.to_vec(), blocks, last })
            }
            Net::Narx(n) => {
                let mut rows: Vec<f64> = x[(t - c.narx_delays) * w..].to_vec();
                let mut out = Vec::with_capacity(c.pre * w);
                let mut steps = Vec::with_capacity(c.pre);
                for _ in 0..c.pre {
                    let line = rows[rows.len() - c.narx_delays * w..].to_vec();
                    let hidden = tanh_forward(&n.hidden.forward(s, &line));
                    let mut next = n.out.forward(s, &hidden);
                    if c.residual {
                        next.iter_mut().zip(&line[line.len() - w..]).for_each(|(a, b)| *a += b);
                    }
                    rows.extend_from_slice(&next);
                    out.extend_from_slice(&next);
                    steps.push((line, hidden));
                }
                (out, NetCache::Narx { steps })
            }
        };
        if c.residual && c.kind != ModelKind::Narx {
            let last = &x[(t - 1) * w..];
            for r in y.chunks_exact_mut(w) {
                r.iter_mut().zip(last).for_each(|(a, b)| *a += b);
            }
        }
        Ok((y, ForwardCache { net }))
    }

    /// Accumulates parameter gradients for output gradient `dy` and returns
    /// the input gradient.
    pub fn backward(&mut self, cache: &ForwardCache, dy: &[f64]) -> Vec<f64> {
        let c = self.config.clone();
        let (w, t) = (c.width(), c.hist);
        let mut dx = vec![0.0; t * w];
        let s = &mut self.store;
        match (&self.net, &cache.net) {
            (Net::Proposed(p), NetCache::Proposed { encoders, features, stage, mask, bilstm, summary }) => {
                let (h, bh) = (c.lstm_hidden, c.bilstm_hidden);
                let mh = c.antennas * h;
                let dsummary = p.head.backward(s, summary, dy);
                let mut db = vec![0.0; t * 2 * bh];
                db[(t - 1) * 2 * bh..(t - 1) * 2 * bh + bh].copy_from_slice(&dsummary[..bh]);
                db[bh..2 * bh].copy_from_slice(&dsummary[bh..]);
                let djoined = p.bilstm.backward(s, bilstm, &db);
                let mut dfeatures = columns(&djoined, mh + c.d_model, 0, mh);
                let dz = dropout_backward(&columns(&djoined, mh + c.d_model, mh, c.d_model), mask);
                match stage {
                    ProposedStage::Time { fused, attention } => {
                        let dfused = p.attention.backward(s, attention, &dz);
                        let dpre = tanh_backward(fused, &dfused);
                        let df = p.fuse.backward(s, features, &dpre);
                        dfeatures.iter_mut().zip(df).for_each(|(a, b)| *a += b);
                    }
                    ProposedStage::Antenna { attention, attended, fused } => {
                        let dpre = tanh_backward(fused, &dz);
                        let dattended = p.fuse.backward(s, attended, &dpre);
                        for (r, cache) in attention.iter().enumerate() {
                            let drow = p.attention.backward(s, cache, &dattended[r * mh..(r + 1) * mh]);
                            dfeatures[r * mh..(r + 1) * mh].iter_mut().zip(drow).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                for (m, enc) in p.encoders.iter().enumerate() {
                    let dxs = enc.backward(s, &encoders[m], &columns(&dfeatures, mh, m * h, h));
                    add_columns(&mut dx, w, 3 * m, &dxs, 3);
                }
            }
            (Net::LstmOnly(n), NetCache::LstmOnly { layers, last }) => {
                let hb = c.baseline_hidden;
                let dlast = n.head.backward(s, last, dy);
                let mut dh = vec![0.0; t * hb];
                dh[(t - 1) * hb..].copy_from_slice(&dlast);
                for (l, (_, cache)) in n.layers.iter().zip(layers).rev() {
                    dh = l.backward(s, cache, &dh);
                }
                dx.iter_mut().zip(dh).for_each(|(a, b)| *a += b);
            }
            (Net::TransformerOnly(n), NetCache::TransformerOnly { input, blocks, last }) => {
                let d = c.d_model;
                let dlast = n.head.backward(s, last, dy);
                let mut dz = vec![0.0; t * d];
                dz[(t - 1) * d..].copy_from_slice(&dlast);
                for (b, (att, a, hidden, _)) in n.blocks.iter().zip(blocks).rev() {
                    let dhidden = b.ffn_out.backward(s, hidden, &dz);
                    let dpre = tanh_backward(hidden, &dhidden);
                    let mut da = b.ffn_in.backward(s, a, &dpre);
                    da.iter_mut().zip(&dz).for_each(|(u, v)| *u += v);
                    let dinput = b.attention.backward(s, att, &da);
                    dz = da.iter().zip(dinput).map(|(u, v)| u + v).collect();
                }
                let demb = n.embed.backward(s, input, &dz);
                dx.iter_mut().zip(demb).for_each(|(a, b)| *a += b);
            }
            (Net::Narx(n), NetCache::Narx { steps }) => {
                let nd = c.narx_delays;
                // Gradients w.r.t. the growing row buffer: the last `nd`
                // input rows followed by every predicted row.
                let mut drows = vec![0.0; (nd + c.pre) * w];
                drows[nd * w..].iter_mut().zip(dy).for_each(|(a, b)| *a += b);
                for k in (0..c.pre).rev() {
                    let (line, hidden) = &steps[k];
                    let dnext = drows[(nd + k) * w..(nd + k + 1) * w].to_vec();
                    let dhidden = n.out.backward(s, hidden, &dnext);
                    let dpre = tanh_backward(hidden, &dhidden);
                    let dline = n.hidden.backward(s, line, &dpre);
                    let base = k * w;
                    drows[base..base + nd * w].iter_mut().zip(&dline).for_each(|(a, b)| *a += b);
                    if c.residual {
                        drows[base + (nd - 1) * w..base + nd * w].iter_mut().zip(&dnext).for_each(|(a, b)| *a += b);
                    }
                }
                dx[(t - nd) * w..].iter_mut().zip(&drows[..nd * w]).for_each(|(a, b)| *a += b);
            }
            _ => unreachable!("cache built by a different network"),
        }
        if c.residual && c.kind != ModelKind::Narx {
            for r in dy.chunks_exact(w) {
                dx[(t - 1) * w..].iter_mut().zip(r).for_each(|(a, b)| *a += b);
            }
        }
        dx
    }

    /// Eval-mode output on a normalised window.
    pub fn predict_normalized(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(x, None)?.0)
    }

    /// Predicts the next `pre` layouts from `hist` layouts given in metres
    /// (flattened `hist × 3M`). Outputs are clamped into the antenna box.
    pub fn predict(&self, history: &[f64]) -> Result<Prediction, ModelError> {
        let y = self.predict_normalized(&self.normalizer.normalize(history))?;
        let mut positions = self.normalizer.denormalize(&y);
        let clamped = clamp_flat(&self.bounds, &mut positions);
        Ok(Prediction { positions, clamped })
    }

    /// Predicts `horizon` slots by feeding each block's clamped output back
    /// as history.
    pub fn rollout(&self, history: &[f64], horizon: usize) -> Result<Prediction, ModelError> {
        let w = self.config.width();
        let mut rows = history.to_vec();
        let mut out = Vec::with_capacity(horizon * w);
        let mut clamped = 0;
        while out.len() < horizon * w {
            let window = &rows[rows.len() - self.config.hist * w..];
            let p = self.predict(window)?;
            clamped += p.clamped;
            let take = (horizon * w - out.len()).min(p.positions.len());
            out.extend_from_slice(&p.positions[..take]);
            rows.extend_from_slice(&p.positions);
        }
        Ok(Prediction { positions: out, clamped })
    }
}

/// Predicted layouts in metres, flattened `slots × 3M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub positions: Vec<f64>,
    /// Number of coordinates moved by the box clamp.
    pub clamped: usize,
}

fn clamp_flat(bounds: &BoxBounds, q: &mut [f64]) -> usize {
    let (lo, hi) = (bounds.min.to_array(), bounds.max.to_array());
    let mut n = 0;
    for (i, v) in q.iter_mut().enumerate() {
        let c = v.clamp(lo[i % 3], hi[i % 3]);
        if c != *v {
            n += 1;
            *v = c;
        }
    }
    n
}

/// Repeats the last observed layout for every future slot.
pub fn persistence(history: &[f64], width: usize, pre: usize) -> Vec<f64> {
    let last = &history[history.len() - width..];
    (0..pre).flat_map(|_| last.iter().copied()).collect()
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nmse: f64,
    pub val_nmse: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were kept (lowest validation NMSE).
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_nmse).collect()
    }

    pub fn val_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_nmse).collect()
    }

    /// Loss curves; identical across runs with the same config and seed.
    pub fn write_csv<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "epoch,train_nmse,val_nmse")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.train_nmse, e.val_nmse)?;
        }
        Ok(())
    }

    /// Cumulative wall-clock time per epoch, milliseconds.
    pub fn write_timing_csv<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "epoch,wall_ms")?;
        for e in &self.epochs {
            writeln!(w, "{},{:.3}", e.epoch, e.wall_ms)?;
        }
        Ok(())
    }
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// NMSE of `model` over `windows` in normalised units.
pub fn window_nmse(model: &Model, windows: &[&Window]) -> Result<f64, ModelError> {
    let (mut num, mut den) = (0.0, 0.0);
    for win in windows {
        let y = model.predict_normalized(&win.input)?;
        num += sq_dist(&y, &win.target);
        den += sq_norm(&win.target);
    }
    Ok(num / den)
}

/// Trains a model of `config.kind` on the training windows with mini-batch
/// NMSE and Adam, keeping the weights with the lowest validation NMSE.
pub fn train(config: &ModelConfig, set: &WindowSet, bounds: BoxBounds) -> Result<(Model, TrainReport), ModelError> {
    let config = ModelConfig { antennas: set.antennas, hist: set.hist, pre: set.pre, ..config.clone() };
    let mut model = Model::new(config.clone())?;
    model.normalizer = set.normalizer;
    model.bounds = bounds;
    if set.train.is_empty() {
        return Err(ModelError::EmptyTrainSet);
    }
    let train_windows = set.subset(&set.train);
    let val_windows = set.subset(&set.val);
    let mut rng = crate::rng::substream(config.seed, &[0x7A1]);
    let adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut best = (f64::INFINITY, model.store.clone(), 0);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut num, mut den) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let norm: f64 = batch.iter().map(|&i| sq_norm(&train_windows[i].target)).sum();
            model.store.zero_grad();
            for &i in batch {
                let win = train_windows[i];
                let (y, cache) = model.forward(&win.input, Some(&mut rng))?;
                let dy: Vec<f64> = y.iter().zip(&win.target).map(|(a, b)| 2.0 * (a - b) / norm).collect();
                num += sq_dist(&y, &win.target);
                model.backward(&cache, &dy);
            }
            den += norm;
            if !model.store.grads_finite() {
                return Err(ModelError::Diverged { epoch, loss: f64::NAN });
            }
            model.store.adam_step(&adam);
        }
        let train_nmse = num / den;
        if !train_nmse.is_finite() {
            return Err(ModelError::Diverged { epoch, loss: train_nmse });
        }
        let val_nmse = if val_windows.is_empty() { train_nmse } else { window_nmse(&model, &val_windows)? };
        if !val_nmse.is_finite() {
            return Err(ModelError::Diverged { epoch, loss: val_nmse });
        }
        if val_nmse < best.0 {
            best = (val_nmse, model.store.clone(), epoch);
        }
        epochs.push(EpochLog { epoch, train_nmse, val_nmse, wall_ms: started.elapsed().as_secs_f64() * 1e3 });
        if config.patience > 0 && epoch - best.2 >= config.patience {
            break;
        }
    }
    if best.2 > 0 {
        model.store = best.1;
    }
    Ok((model, TrainReport { epochs, best_epoch: best.2 }))
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: ModelKind,
    config: ModelConfig,
    normalizer: Normalizer,
    bounds: BoxBounds,
    params: Vec<ParamEntry>,
    /// Length of the little-endian `f64` blob that follows the manifest.
    bytes: usize,
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io { path: path.display().to_string(), source };
    let manifest = Manifest {
        kind: model.kind(),
        config: model.config.clone(),
        normalizer: model.normalizer,
        bounds: model.bounds,
        params: model.store.params().iter().map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape.clone() }).collect(),
        bytes: 8 * model.store.count(),
    };
    let mut buf = format!("{MODEL_MAGIC}{MODEL_FORMAT_VERSION}\n").into_bytes();
    buf.extend(serde_json::to_string(&manifest).map_err(|e| ModelError::Format(e.to_string()))?.bytes());
    buf.push(b'\n');
    for p in model.store.params() {
        for v in &p.value.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)
}

/// Loads a model file. With `expected` set, a file of another kind is
/// rejected.
pub fn load_model(path: &Path, expected: Option<ModelKind>) -> Result<Model, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    let line_end = |from: usize| bytes[from..].iter().position(|&b| b == b'\n').map(|p| from + p);
    let first = line_end(0).ok_or_else(|| ModelError::Format("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..first]).map_err(|_| ModelError::Format("header is not text".into()))?;
    let version = header
        .strip_prefix(MODEL_MAGIC)
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| ModelError::Format(format!("bad header `{header}`")))?;
    if version != MODEL_FORMAT_VERSION {
        return Err(ModelError::Version { found: version, supported: MODEL_FORMAT_VERSION });
    }
    let second = line_end(first + 1).ok_or_else(|| ModelError::Format("missing manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[first + 1..second]).map_err(|e| ModelError::Format(format!("manifest: {e}")))?;
    if let Some(k) = expected {
        if k != manifest.kind {
            return Err(ModelError::KindMismatch { expected: k, found: manifest.kind });
        }
    }
    let mut model = Model::new(ModelConfig { kind: manifest.kind, ..manifest.config })?;
    model.normalizer = manifest.normalizer;
    model.bounds = manifest.bounds;
    let blob = &bytes[second + 1..];
    let expected_bytes = 8 * model.store.count();
    if manifest.bytes != expected_bytes || blob.len() != expected_bytes {
        return Err(ModelError::Truncated { expected: expected_bytes, actual: blob.len() });
    }
    if manifest.params.len() != model.store.params().len() {
        return Err(ModelError::Format(format!(
            "manifest lists {} parameters, config implies {}",
            manifest.params.len(),
            model.store.params().len()
        )));
    }
    let mut offset = 0;
    for (entry, p) in manifest.params.iter().zip(model.store.params_mut()) {
        if entry.name != p.name || entry.shape != p.value.shape {
            return Err(ModelError::ParamShape { name: entry.name.clone(), expected: p.value.shape.clone(), found: entry.shape.clone() });
        }
        for v in p.value.data.iter_mut() {
            *v = f64::from_le_bytes(blob[offset..offset + 8].try_into().expect("8-byte chunk"));
            offset += 8;
        }
    }
    Ok(model)
}
