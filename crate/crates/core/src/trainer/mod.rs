//! Joint optimisation of the CPC and alignment objectives.

mod checkpoint;
mod radam;

use std::path::{Path, PathBuf};

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use radam::{radam_step, rho, OptimizerState, RadamBranch, RadamConfig};

use crate::alignloss::{alignment_loss_graph, AlignLossConfig};
use crate::diffcore::{
    finite_difference_report, Coverage, FdReport, DiffError, Graph, NodeId, ParamSet, Real, Tensor,
};
use crate::dsp::{augment_utterance, AudioBuffer, AugmentConfig, DspError};
use crate::encoder::{
    audio_tensor, context_graph, cpc_loss_graph, encode_graph, ContextNet, CpcConfig,
    EncoderModel, ModelConfig, ModelError, NegativeDraw, HOP_SAMPLES,
};
use crate::softpool::{boundary_graph, pool_graph, AttentionConfig, UnderflowPolicy};
use crate::synth::{load_manifest, SynthError};
use crate::{fsutil, rng};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no usable training data: {0}")]
    NoData(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub lambda_contr: f64,
    pub crop_seconds: f64,
    pub seed: u64,
    pub cpc_on: bool,
    pub contr_on: bool,
    /// Also apply the CPC loss to the augmented stream.
    pub cpc_on_augmented: bool,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Collapse monitor: warn when mean(b) stays above `collapse_threshold`
    /// for `collapse_patience` consecutive steps.
    pub collapse_threshold: f64,
    pub collapse_patience: u64,
    pub model: ModelConfig,
    pub attention: AttentionConfig,
    pub align: AlignLossConfig,
    pub augment: AugmentConfig,
    pub optimizer: RadamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            steps: 1000,
            lambda_contr: 1.0,
            crop_seconds: 1.28,
            seed: 0,
            cpc_on: true,
            contr_on: true,
            cpc_on_augmented: false,
            log_every: 50,
            checkpoint_every: 1000,
            collapse_threshold: 0.9,
            collapse_patience: 1000,
            model: ModelConfig::default(),
            attention: AttentionConfig::default(),
            align: AlignLossConfig::default(),
            augment: AugmentConfig::default(),
            optimizer: RadamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Samples per crop at 16 kHz.
    pub fn crop_samples(&self) -> usize {
        (self.crop_seconds * 16_000.0).round() as usize
    }

    pub fn crop_frames(&self) -> usize {
        self.crop_samples() / HOP_SAMPLES
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !self.cpc_on && !self.contr_on {
            return bad("at least one of cpc_on and contr_on must be set".into());
        }
        if !(self.lambda_contr >= 0.0 && self.lambda_contr.is_finite()) {
            return bad(format!("lambda_contr must be non-negative, got {}", self.lambda_contr));
        }
        let n = self.crop_frames();
        if n < 8 {
            return bad(format!("crop of {} s gives {n} frames; need at least 8", self.crop_seconds));
        }
        if self.cpc_on && n <= self.model.cpc.k_steps + 1 {
            return bad(format!("crop gives {n} frames; CPC with K={} needs more", self.model.cpc.k_steps));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("log_every and checkpoint_every must be positive".into());
        }
        self.model.validate()?;
        self.attention.validate()?;
        self.align.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

/// One prepared batch item: an original crop, its augmented copy and the
/// negative draws used by CPC.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub audio: AudioBuffer,
    pub augmented: Option<AudioBuffer>,
    pub negatives: Option<NegativeDraw>,
    pub negatives_augmented: Option<NegativeDraw>,
}

/// Augments each crop and draws negatives, all from `seed`.
pub fn prepare_items(crops: &[AudioBuffer], config: &TrainConfig, seed: u64) -> Result<Vec<BatchItem>, TrainError> {
    if let Some(first) = crops.first() {
        if crops.iter().any(|c| c.len() != first.len()) {
            return Err(TrainError::Config("batch crops differ in length".into()));
        }
    }
    crops
        .par_iter()
        .enumerate()
        .map(|(i, crop)| {
            let s = rng::derive(seed, &[i as u64]);
            let n = crop.len() / HOP_SAMPLES;
            let augmented = if config.contr_on || config.cpc_on_augmented {
                Some(augment_utterance(crop, &config.augment, rng::derive(s, &[1]))?.0)
            } else {
                None
            };
            let negatives = if config.cpc_on {
                Some(NegativeDraw::sample(n, &config.model.cpc, rng::derive(s, &[2]))?)
            } else {
                None
            };
            let negatives_augmented = match (&augmented, config.cpc_on && config.cpc_on_augmented) {
                (Some(a), true) => {
                    Some(NegativeDraw::sample(a.len() / HOP_SAMPLES, &config.model.cpc, rng::derive(s, &[3]))?)
                }
                _ => None,
            };
            Ok(BatchItem { audio: crop.clone(), augmented, negatives, negatives_augmented })
        })
        .collect()
}

/// Output nodes of one item's graph.
#[derive(Debug, Clone, Copy)]
pub struct ItemNodes {
    /// `[cpc_on]·L_cpc + [contr_on]·λ·L_contr`.
    pub objective: NodeId,
    pub cpc: Option<NodeId>,
    pub contr: Option<NodeId>,
    /// Boundary probabilities of the original stream, `[N, 1]`.
    pub boundaries: NodeId,
}

/// Builds the per-item objective on a graph with the model parameters
/// bound. `audio` and `augmented` are `[L, 1]` waveform nodes.
pub fn item_objective_graph<T: Real>(
    g: &mut Graph<T>,
    config: &TrainConfig,
    audio: NodeId,
    augmented: Option<NodeId>,
    negatives: Option<&NegativeDraw>,
    negatives_augmented: Option<&NegativeDraw>,
) -> Result<ItemNodes, TrainError> {
    let z = encode_graph(g, audio)?;
    let n = g.shape(z)[0];
    let b = boundary_graph(g, z)?;
    let mut objective = None;
    let mut add = |g: &mut Graph<T>, term: NodeId| -> Result<(), TrainError> {
        objective = Some(match objective {
            None => term,
            Some(o) => g.add(o, term)?,
        });
        Ok(())
    };

    let cpc = if config.cpc_on {
        let draw = negatives.ok_or_else(|| TrainError::Config("CPC enabled without negatives".into()))?;
        let c = context_graph(g, &config.model, z)?;
        let mut l = cpc_loss_graph(g, z, c, draw)?;
        if let (Some(a), Some(draw_a)) = (augmented, negatives_augmented) {
            if config.cpc_on_augmented {
                let za = encode_graph(g, a)?;
                let ca = context_graph(g, &config.model, za)?;
                let la = cpc_loss_graph(g, za, ca, draw_a)?;
                let both = g.add(l, la)?;
                l = g.scale(both, T::c(0.5))?;
            }
        }
        add(g, l)?;
        Some(l)
    } else {
        None
    };

    let contr = if config.contr_on {
        let a = augmented.ok_or_else(|| TrainError::Config("alignment loss enabled without augmented audio".into()))?;
        let heads = config.attention.heads(n);
        let sigma = config.attention.sigma;
        let za = encode_graph(g, a)?;
        let ba = boundary_graph(g, za)?;
        let s = pool_graph(g, z, b, heads, sigma, UnderflowPolicy::Stable)?;
        let sa = pool_graph(g, za, ba, heads, sigma, UnderflowPolicy::Stable)?;
        let l = alignment_loss_graph(g, s, sa, &config.align)?;
        let weighted = g.scale(l, T::c(config.lambda_contr))?;
        add(g, weighted)?;
        Some(l)
    } else {
        None
    };

    let objective = objective.ok_or_else(|| TrainError::Config("no loss enabled".into()))?;
    Ok(ItemNodes { objective, cpc, contr, boundaries: b })
}

/// Batch-mean losses and, optionally, the gradient of the batch-mean
/// objective.
#[derive(Debug, Clone)]
pub struct BatchOutcome<T> {
    pub cpc: f64,
    pub contr: f64,
    pub objective: f64,
    pub mean_boundary: f64,
    pub grads: Option<ParamSet<T>>,
}

struct ItemOutcome<T> {
    cpc: f64,
    contr: f64,
    objective: f64,
    mean_boundary: f64,
    grads: Option<ParamSet<T>>,
}

fn scalar<T: Real>(g: &Graph<T>, n: NodeId) -> f64 {
    g.value(n).data()[0].to_f64().unwrap_or(f64::NAN)
}

fn run_item<T: Real>(
    model: &EncoderModel<T>,
    config: &TrainConfig,
    item: &BatchItem,
    with_grads: bool,
) -> Result<ItemOutcome<T>, TrainError> {
    let mut g = model.graph()?;
    let x = g.constant(audio_tensor(&item.audio)?)?;
    let xa = match &item.augmented {
        Some(a) => Some(g.constant(audio_tensor(a)?)?),
        None => None,
    };
    let nodes = item_objective_graph(
        &mut g,
        config,
        x,
        xa,
        item.negatives.as_ref(),
        item.negatives_augmented.as_ref(),
    )?;
    let b = g.value(nodes.boundaries);
    let mean_boundary = b.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / b.len() as f64;
    let grads = if with_grads { Some(g.backward(nodes.objective)?.into()) } else { None };
    Ok(ItemOutcome {
        cpc: nodes.cpc.map_or(0.0, |n| scalar(&g, n)),
        contr: nodes.contr.map_or(0.0, |n| scalar(&g, n)),
        objective: scalar(&g, nodes.objective),
        mean_boundary,
        grads,
    })
}

/// Evaluates every item in parallel and reduces in item order, so the
/// result does not depend on the thread count.
pub fn batch_outcome<T: Real>(
    model: &EncoderModel<T>,
    config: &TrainConfig,
    items: &[BatchItem],
    with_grads: bool,
) -> Result<BatchOutcome<T>, TrainError> {
    if items.is_empty() {
        return Err(TrainError::NoData("empty batch".into()));
    }
    let outs = items
        .par_iter()
        .map(|it| run_item(model, config, it, with_grads))
        .collect::<Result<Vec<_>, _>>()?;
    let k = items.len() as f64;
    let mean = |f: fn(&ItemOutcome<T>) -> f64| outs.iter().map(f).sum::<f64>() / k;
    let grads = if with_grads {
        let mut acc: ParamSet<T> = ParamSet::new();
        for o in &outs {
            for (name, t) in o.grads.as_ref().expect("requested").iter() {
                match acc.get_mut(name) {
                    Some(a) => {
                        for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                            *x = *x + *y;
                        }
                    }
                    None => acc.insert(name.clone(), t.clone()),
                }
            }
        }
        let inv = T::c(1.0 / k);
        for (_, t) in acc.iter_mut() {
            for x in t.data_mut() {
                *x = *x * inv;
            }
        }
        Some(acc)
    } else {
        None
    };
    Ok(BatchOutcome {
        cpc: mean(|o| o.cpc),
        contr: mean(|o| o.contr),
        objective: mean(|o| o.objective),
        mean_boundary: mean(|o| o.mean_boundary),
        grads,
    })
}

/// Batch means `(L_cpc, L_contr)`; a disabled loss is reported as 0.
pub fn forward_losses<T: Real>(
    crops: &[AudioBuffer],
    model: &EncoderModel<T>,
    config: &TrainConfig,
    seed: u64,
) -> Result<(f64, f64), TrainError> {
    let items = prepare_items(crops, config, seed)?;
    let out = batch_outcome(model, config, &items, false)?;
    Ok((out.cpc, out.contr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    #[serde(rename = "L_cpc")]
    pub l_cpc: f64,
    #[serde(rename = "L_contr")]
    pub l_contr: f64,
    pub mean_boundary: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    /// Steps at which the collapse monitor fired.
    pub collapse_warnings: Vec<u64>,
}

/// Loads every manifest utterance into memory.
pub fn load_training_audio(manifest: &Path) -> Result<Vec<AudioBuffer>, TrainError> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = load_manifest(manifest)?;
    if entries.is_empty() {
        return Err(TrainError::NoData(format!("{} lists no utterances", manifest.display())));
    }
    entries
        .par_iter()
        .map(|e| Ok(e.load_audio(base)?))
        .collect()
}

pub fn train(config: &TrainConfig, manifest: &Path, out_dir: &Path) -> Result<TrainSummary, TrainError> {
    let data = load_training_audio(manifest)?;
    train_on(config, &data, out_dir)
}

fn sample_crops(data: &[&AudioBuffer], crop: usize, batch: usize, seed: u64) -> Vec<AudioBuffer> {
    let mut r = rng::stream(seed, 0x5a);
    (0..batch)
        .map(|_| {
            let u = data[r.random_range(0..data.len())];
            let start = r.random_range(0..=u.len() - crop);
            u.slice(start, start + crop)
        })
        .collect()
}

/// Runs `config.steps` updates on in-memory audio. Writes the metrics log,
/// periodic checkpoints and `final.ckpt` under `out_dir`.
pub fn train_on(config: &TrainConfig, data: &[AudioBuffer], out_dir: &Path) -> Result<TrainSummary, TrainError> {
    config.validate()?;
    let crop = config.crop_samples();
    let usable: Vec<&AudioBuffer> = data.iter().filter(|a| a.len() >= crop).collect();
    if usable.is_empty() {
        return Err(TrainError::NoData(format!("no utterance is at least {} s long", config.crop_seconds)));
    }
    if let Some(a) = usable.iter().find(|a| a.sample_rate() != 16_000) {
        return Err(ModelError::SampleRate { expected: 16_000, got: a.sample_rate() }.into());
    }
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;

    let mut model: EncoderModel<f32> = EncoderModel::init(config.model.clone(), rng::derive(config.seed, &[0]))?;
    let mut state = OptimizerState::new(&model.params);
    let mut metrics = Vec::new();
    let mut log_text = String::new();
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut window = (0.0, 0.0, 0.0, 0u64);
    let mut high_streak = 0u64;
    let mut collapse_warnings = Vec::new();

    for step in 1..=config.steps {
        let crops = sample_crops(&usable, crop, config.batch_size, rng::derive(config.seed, &[10, step]));
        let items = prepare_items(&crops, config, rng::derive(config.seed, &[11, step]))?;
        let out = batch_outcome(&model, config, &items, true)?;
        if !out.objective.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        radam_step(&mut model.params, out.grads.as_ref().expect("requested"), &mut state, config.lr, &config.optimizer)?;

        window.0 += out.cpc;
        window.1 += out.contr;
        window.2 += out.mean_boundary;
        window.3 += 1;
        if out.mean_boundary > config.collapse_threshold {
            high_streak += 1;
            if high_streak % config.collapse_patience == 0 {
                log::warn!(
                    "step {step}: mean boundary probability above {} for {high_streak} steps; the predictor may be collapsing",
                    config.collapse_threshold
                );
                collapse_warnings.push(step);
            }
        } else {
            high_streak = 0;
        }

        if step % config.log_every == 0 || step == config.steps {
            let k = window.3 as f64;
            let rec = MetricRecord { step, l_cpc: window.0 / k, l_contr: window.1 / k, mean_boundary: window.2 / k };
            log::info!("step {step}: L_cpc {:.4} L_contr {:.4} mean(b) {:.3}", rec.l_cpc, rec.l_contr, rec.mean_boundary);
            log_text.push_str(&serde_json::to_string(&rec)?);
            log_text.push('\n');
            fsutil::write_atomic_str(&metrics_path, &log_text).map_err(|e| TrainError::io(&metrics_path, e))?;
            metrics.push(rec);
            window = (0.0, 0.0, 0.0, 0);
        }
        if step % config.checkpoint_every == 0 {
            let ck = snapshot(config, step, &model, &state);
            ck.save(&out_dir.join(format!("step-{step:07}.ckpt")))?;
        }
    }
    if config.steps == 0 {
        fsutil::write_atomic_str(&metrics_path, "").map_err(|e| TrainError::io(&metrics_path, e))?;
    }
    let checkpoint = snapshot(config, config.steps, &model, &state);
    checkpoint.save(&out_dir.join(FINAL_CHECKPOINT))?;
    Ok(TrainSummary { checkpoint, metrics, collapse_warnings })
}

fn snapshot(config: &TrainConfig, step: u64, model: &EncoderModel<f32>, state: &OptimizerState<f32>) -> Checkpoint {
    Checkpoint {
        config: config.clone(),
        step,
        params: model.params.clone(),
        optimizer: Some(state.clone()),
    }
}

/// A small model configuration used by gradient verification.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 1,
        crop_seconds: 0.2,
        model: ModelConfig {
            d: 5,
            context: ContextNet::Gru,
            boundary_hidden: 4,
            cpc: CpcConfig { k_steps: 3, n_negatives: 4 },
        },
        augment: AugmentConfig { n_segments: 2, ..AugmentConfig::default() },
        ..TrainConfig::default()
    }
}

/// Outcome of [`joint_gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct JointCheckReport {
    pub max_relative_error: f64,
    /// Per-point reports, in draw order.
    pub reports: Vec<FdReport>,
    /// Draws rejected because a ReLU input sat within
    /// [`MIN_RELU_MARGIN`] of its kink.
    pub redrawn: usize,
}

/// Points closer than this to a ReLU kink are not differentiable at the
/// resolution of the smallest finite-difference step, so they are redrawn.
pub const MIN_RELU_MARGIN: f64 = 1e-6;

/// Finite-difference check of the full joint objective (encoder, context
/// network, heads, boundary scorer, pooling, alignment and CPC losses) in
/// 64-bit mode at `points` random inputs and model initializations.
pub fn joint_gradient_check(
    config: &TrainConfig,
    points: usize,
    per_tensor: usize,
    seed: u64,
    epsilon: f64,
) -> Result<JointCheckReport, TrainError> {
    config.validate()?;
    let mut report = JointCheckReport { max_relative_error: 0.0, reports: Vec::with_capacity(points), redrawn: 0 };
    for p in 0..points {
        for attempt in 0.. {
            let s = if attempt == 0 { rng::derive(seed, &[p as u64]) } else { rng::derive(seed, &[p as u64, attempt]) };
            let mut r = rng::stream(s, 0xfd);
            let samples: Vec<f32> = (0..config.crop_samples()).map(|_| 0.5 * (2.0 * r.random::<f32>() - 1.0)).collect();
            let audio = AudioBuffer::new(samples, 16_000)?;
            let item = prepare_items(std::slice::from_ref(&audio), config, rng::derive(s, &[1]))?.remove(0);
            let model: EncoderModel<f64> = EncoderModel::verification_point(config.model.clone(), rng::derive(s, &[2]))?;
            let x: Tensor<f64> = audio_tensor(&item.audio)?;
            let xa: Option<Tensor<f64>> = item.augmented.as_ref().map(audio_tensor).transpose()?;
            let build = |g: &mut Graph<f64>| -> Result<NodeId, DiffError> {
                let xn = g.constant(x.clone())?;
                let xan = match &xa {
                    Some(t) => Some(g.constant(t.clone())?),
                    None => None,
                };
                item_objective_graph(g, config, xn, xan, item.negatives.as_ref(), item.negatives_augmented.as_ref())
                    .map(|n| n.objective)
                    .map_err(|e| DiffError::Contract(e.to_string()))
            };
            let mut g = model.graph()?;
            build(&mut g)?;
            if g.relu_margin() < MIN_RELU_MARGIN {
                report.redrawn += 1;
                continue;
            }
            let coverage = Coverage::Sample { per_tensor, seed: s };
            let r = finite_difference_report(&model.params, epsilon, coverage, build)?;
            report.max_relative_error = report.max_relative_error.max(r.max_relative_error);
            report.reports.push(r);
            break;
        }
    }
    Ok(report)
}
