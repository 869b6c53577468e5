//! CPC stack: strided conv feature extractor, recurrent context network,
//! per-step affine prediction heads and the InfoNCE objective.

use rand::RngExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Conv1dSpec, DiffError, Graph, NodeId, ParamSet, Real, Tensor};
use crate::dsp::{AudioBuffer, DEFAULT_SAMPLE_RATE};
use crate::rng;

/// Frames per second of `z` and `c` at 16 kHz.
pub const FRAME_RATE: f64 = 100.0;
/// Input samples per frame.
pub const HOP_SAMPLES: usize = 160;

pub const CONV_KERNELS: [usize; 5] = [10, 8, 4, 4, 4];
pub const CONV_STRIDES: [usize; 5] = [5, 4, 2, 2, 2];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("expected {expected} Hz audio, got {got} Hz")]
    SampleRate { expected: u32, got: u32 },
    #[error("sequence too short: {0}")]
    TooShort(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate pooling: attention head {head} has no support (max log-kernel {max_log_kernel:.1})")]
    DegeneratePooling { head: usize, max_log_kernel: f64 },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextNet {
    Gru,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpcConfig {
    pub k_steps: usize,
    pub n_negatives: usize,
}

impl Default for CpcConfig {
    fn default() -> Self {
        Self { k_steps: 12, n_negatives: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of `z`, `c` and the conv stack.
    pub d: usize,
    pub context: ContextNet,
    /// Hidden width of the boundary scorer.
    pub boundary_hidden: usize,
    pub cpc: CpcConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 128, context: ContextNet::Gru, boundary_hidden: 64, cpc: CpcConfig::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.boundary_hidden == 0 {
            return Err(ModelError::Config("d and boundary_hidden must be positive".into()));
        }
        if self.cpc.k_steps == 0 || self.cpc.n_negatives == 0 {
            return Err(ModelError::Config("k_steps and n_negatives must be at least 1".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d;
        let mut v = Vec::new();
        let mut cin = 1;
        for (i, &k) in CONV_KERNELS.iter().enumerate() {
            v.push((format!("enc.conv{i}.w"), vec![k * cin, d]));
            v.push((format!("enc.conv{i}.b"), vec![d]));
            cin = d;
        }
        let g = match self.context {
            ContextNet::Gru => 3,
            ContextNet::Lstm => 4,
        };
        v.push(("ar.wx".into(), vec![d, g * d]));
        v.push(("ar.bx".into(), vec![g * d]));
        v.push(("ar.w".into(), vec![d, g * d]));
        v.push(("ar.b".into(), vec![g * d]));
        for k in 1..=self.cpc.k_steps {
            v.push((head_w(k), vec![d, d]));
            v.push((head_b(k), vec![d]));
        }
        let h = self.boundary_hidden;
        v.push(("bnd.w1".into(), vec![3 * d, h]));
        v.push(("bnd.b1".into(), vec![h]));
        v.push(("bnd.w2".into(), vec![h, 1]));
        v.push(("bnd.b2".into(), vec![1]));
        v
    }
}

fn head_w(k: usize) -> String {
    format!("head.{k:02}.w")
}

fn head_b(k: usize) -> String {
    format!("head.{k:02}.b")
}

/// Encoder, context network, prediction heads and boundary scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> EncoderModel<T> {
    /// Random initialization: He-uniform for ReLU layers, `±1/√fan_in`
    /// elsewhere, small prediction heads (loss starts near chance), zero
    /// biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut r = rng::stream(seed, 0x1a17);
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let fan_in = shape[0] as f64;
            let bound = if name.ends_with(".b") || name.ends_with(".bx") || name.starts_with("bnd.b") {
                0.0
            } else if name.starts_with("enc.conv4") {
                (3.0 / fan_in).sqrt()
            } else if name.starts_with("enc.") || name == "bnd.w1" {
                (6.0 / fan_in).sqrt()
            } else if name.starts_with("head.") {
                0.1 / fan_in.sqrt()
            } else {
                1.0 / fan_in.sqrt()
            };
            let data = (0..n).map(|_| T::c(bound * (2.0 * r.random::<f64>() - 1.0))).collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    /// A generic point for gradient verification: every tensor, biases
    /// included, uniform in `±sqrt(3/fan_in)`, so activations and
    /// gradients stay away from zero.
    pub fn verification_point(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut r = rng::stream(seed, 0xfd);
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let bound = if shape.len() == 1 { 0.3 } else { (3.0 / shape[0] as f64).sqrt() };
            let data = (0..n).map(|_| T::c(bound * (2.0 * r.random::<f64>() - 1.0))).collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self, ModelError> {
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            match params.get(&name) {
                None => return Err(ModelError::MissingParam(name)),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())))
                }
                _ => {}
            }
        }
        Ok(Self { config, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.n_values()
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel { config: self.config.clone(), params: self.params.cast() }
    }

    /// Fresh graph with every parameter bound.
    pub fn graph(&self) -> Result<Graph<T>, ModelError> {
        let mut g = Graph::new();
        self.params.bind(&mut g)?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Z,
    C,
}

/// `N × d` frame-rate representation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence<T: Real = f32> {
    pub values: Tensor<T>,
    pub frame_rate: f64,
    pub kind: FrameKind,
}

impl<T: Real> FrameSequence<T> {
    pub fn new(values: Tensor<T>, kind: FrameKind) -> Result<Self, ModelError> {
        if values.shape().len() != 2 {
            return Err(ModelError::Shape(format!("frames must be 2-D, got {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(ModelError::Shape("non-finite frame values".into()));
        }
        Ok(Self { values, frame_rate: FRAME_RATE, kind })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, n: usize) -> &[T] {
        self.values.row(n)
    }
}

/// Waveform as a `[L, 1]` tensor.
pub fn audio_tensor<T: Real>(audio: &AudioBuffer) -> Result<Tensor<T>, ModelError> {
    if audio.sample_rate() != DEFAULT_SAMPLE_RATE {
        return Err(ModelError::SampleRate { expected: DEFAULT_SAMPLE_RATE, got: audio.sample_rate() });
    }
    if audio.len() < HOP_SAMPLES {
        return Err(ModelError::TooShort(format!("{} samples; need at least {HOP_SAMPLES}", audio.len())));
    }
    let data = audio.samples().iter().map(|&s| T::c(s as f64)).collect();
    Ok(Tensor::new(vec![audio.len(), 1], data)?)
}

/// g_enc on a `[L, 1]` waveform node: `[floor(L/160), d]`.
pub fn encode_graph<T: Real>(g: &mut Graph<T>, audio: NodeId) -> Result<NodeId, ModelError> {
    let mut x = audio;
    for (i, (&k, &s)) in CONV_KERNELS.iter().zip(&CONV_STRIDES).enumerate() {
        let w = g.var(&format!("enc.conv{i}.w"))?;
        let b = g.var(&format!("enc.conv{i}.b"))?;
        x = g.conv1d(x, w, Some(b), Conv1dSpec::downsampling(k, s))?;
        if i + 1 < CONV_KERNELS.len() {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

/// Causal g_ar over `z` (`[N, d]`), zero initial state.
pub fn context_graph<T: Real>(g: &mut Graph<T>, config: &ModelConfig, z: NodeId) -> Result<NodeId, ModelError> {
    let n = g.shape(z)[0];
    let d = config.d;
    let wx = g.var("ar.wx")?;
    let bx = g.var("ar.bx")?;
    let w = g.var("ar.w")?;
    let b = g.var("ar.b")?;
    let proj = g.matmul(z, wx)?;
    let gx = g.add_row(proj, bx)?;
    let mut outs = Vec::with_capacity(n);
    match config.context {
        ContextNet::Gru => {
            let mut h = g.constant(Tensor::zeros(vec![1, d]))?;
            for t in 0..n {
                let row = g.slice_rows(gx, t, t + 1)?;
                h = g.gru_step(row, h, w, b)?;
                outs.push(h);
            }
        }
        ContextNet::Lstm => {
            let mut state = g.constant(Tensor::zeros(vec![1, 2 * d]))?;
            for t in 0..n {
                let row = g.slice_rows(gx, t, t + 1)?;
                state = g.lstm_step(row, state, w, b)?;
                outs.push(g.slice_cols(state, 0, d)?);
            }
        }
    }
    Ok(g.concat_rows(&outs)?)
}

/// Candidate indices for every (k, n) term: position 0 is the positive
/// `n + k`, the rest are negatives drawn uniformly from the other frames.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeDraw {
    pub n_frames: usize,
    pub k_steps: usize,
    pub n_negatives: usize,
    /// `[k][n][1 + n_negatives]`, flattened.
    pub candidates: Vec<usize>,
}

impl NegativeDraw {
    pub fn sample(n_frames: usize, config: &CpcConfig, seed: u64) -> Result<Self, ModelError> {
        let k_steps = config.k_steps;
        if n_frames <= k_steps {
            return Err(ModelError::TooShort(format!("{n_frames} frames for {k_steps} prediction steps")));
        }
        let valid = n_frames - k_steps;
        let width = 1 + config.n_negatives;
        let mut r = rng::stream(seed, 0xc9c);
        let mut candidates = Vec::with_capacity(k_steps * valid * width);
        for k in 1..=k_steps {
            for n in 0..valid {
                let pos = n + k;
                candidates.push(pos);
                for _ in 0..config.n_negatives {
                    let t = r.random_range(0..n_frames - 1);
                    candidates.push(if t >= pos { t + 1 } else { t });
                }
            }
        }
        Ok(Self { n_frames, k_steps, n_negatives: config.n_negatives, candidates })
    }

    /// Valid context positions per step.
    pub fn valid(&self) -> usize {
        self.n_frames - self.k_steps
    }

    pub fn n_terms(&self) -> usize {
        self.k_steps * self.valid()
    }

    pub fn candidates(&self, k: usize, n: usize) -> &[usize] {
        let w = 1 + self.n_negatives;
        let start = ((k - 1) * self.valid() + n) * w;
        &self.candidates[start..start + w]
    }
}

/// InfoNCE averaged over all (n, k) terms. Scores are
/// `(W_k c_n + b_k) · z_i`; the candidate set includes the positive.
pub fn cpc_loss_graph<T: Real>(
    g: &mut Graph<T>,
    z: NodeId,
    c: NodeId,
    draw: &NegativeDraw,
) -> Result<NodeId, ModelError> {
    let (n, _) = (g.shape(z)[0], g.shape(z)[1]);
    if g.shape(c)[0] != n || draw.n_frames != n {
        return Err(ModelError::Shape(format!(
            "z has {n} frames, c has {}, draw expects {}",
            g.shape(c)[0],
            draw.n_frames
        )));
    }
    let valid = draw.valid();
    let width = 1 + draw.n_negatives;
    let ctx = g.slice_rows(c, 0, valid)?;
    let mut total = None;
    for k in 1..=draw.k_steps {
        let w = g.var(&head_w(k))?;
        let b = g.var(&head_b(k))?;
        let p = g.matmul(ctx, w)?;
        let pred = g.add_row(p, b)?;
        let scores = g.matmul_t(pred, z, false, true)?;
        let idx = (0..valid).flat_map(|i| draw.candidates(k, i).iter().map(move |&j| i * n + j)).collect();
        let picked = g.gather(scores, idx, vec![valid, width])?;
        let lse = g.logsumexp_rows(picked)?;
        let pos = g.slice_cols(picked, 0, 1)?;
        let pos = g.reshape(pos, vec![valid])?;
        let terms = g.sub(lse, pos)?;
        let s = g.sum(terms)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.expect("k_steps >= 1");
    Ok(g.scale(total, T::c(1.0 / draw.n_terms() as f64))?)
}

/// `z` for a waveform.
pub fn encode_frames<T: Real>(audio: &AudioBuffer, model: &EncoderModel<T>) -> Result<FrameSequence<T>, ModelError> {
    let mut g = model.graph()?;
    let x = g.constant(audio_tensor(audio)?)?;
    let z = encode_graph(&mut g, x)?;
    FrameSequence::new(g.value(z).clone(), FrameKind::Z)
}

/// `c` for a `z` sequence.
pub fn contextualize<T: Real>(z: &FrameSequence<T>, model: &EncoderModel<T>) -> Result<FrameSequence<T>, ModelError> {
    check_dim(z, model)?;
    let mut g = model.graph()?;
    let zn = g.constant(z.values.clone())?;
    let c = context_graph(&mut g, &model.config, zn)?;
    FrameSequence::new(g.value(c).clone(), FrameKind::C)
}

/// InfoNCE value for given `z`, `c` and negative-sampling seed.
pub fn cpc_loss<T: Real>(
    z: &FrameSequence<T>,
    c: &FrameSequence<T>,
    model: &EncoderModel<T>,
    seed: u64,
) -> Result<f64, ModelError> {
    check_dim(z, model)?;
    check_dim(c, model)?;
    let draw = NegativeDraw::sample(z.len(), &model.config.cpc, seed)?;
    let mut g = model.graph()?;
    let zn = g.constant(z.values.clone())?;
    let cn = g.constant(c.values.clone())?;
    let l = cpc_loss_graph(&mut g, zn, cn, &draw)?;
    Ok(g.value(l).data()[0].to_f64().unwrap_or(f64::NAN))
}

fn check_dim<T: Real>(x: &FrameSequence<T>, model: &EncoderModel<T>) -> Result<(), ModelError> {
    if x.dim() != model.config.d {
        return Err(ModelError::Shape(format!("frames have dim {}, model expects {}", x.dim(), model.config.d)));
    }
    Ok(())
}
