//! Boundary prediction and Gaussian-kernel monotonic attention pooling.
//!
//! Head `m` (1-based) attends to frames whose cumulative boundary count
//! `a_n` lies near `m`; weights are the row-normalised kernel
//! `exp(-(a_n - m)^2 / 2σ^2)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Conv1dSpec, Graph, NodeId, PadMode, Real, Tensor};
use crate::encoder::{EncoderModel, FrameSequence, ModelError, FRAME_RATE};

/// Rows whose largest log-kernel falls below this are degenerate.
pub const LOG_KERNEL_FLOOR: f64 = -60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub sigma: f64,
    /// `M = ceil(N / head_ratio)`.
    pub head_ratio: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { sigma: 0.5, head_ratio: 4 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) || self.head_ratio == 0 {
            return Err(ModelError::Config(format!(
                "sigma {} and head_ratio {} must be positive",
                self.sigma, self.head_ratio
            )));
        }
        Ok(())
    }

    pub fn heads(&self, n_frames: usize) -> usize {
        n_frames.div_ceil(self.head_ratio).max(1)
    }
}

/// What to do when a head has no frames within numerical reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnderflowPolicy {
    Error,
    /// Normalise in log space anyway; an empty head spreads its weight
    /// over the nearest frames.
    Stable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySequence<T: Real = f32> {
    pub probs: Vec<T>,
    pub cum: Vec<T>,
}

impl<T: Real> BoundarySequence<T> {
    /// Accepts probabilities in `[0, 1]` (ideal 0/1 boundaries included).
    pub fn from_probs(probs: Vec<T>) -> Result<Self, ModelError> {
        if let Some(p) = probs.iter().find(|p| !(**p >= T::zero() && **p <= T::one())) {
            return Err(ModelError::Shape(format!("boundary probability {p} outside [0, 1]")));
        }
        let mut acc = T::zero();
        let cum = probs
            .iter()
            .map(|&p| {
                acc = acc + p;
                acc
            })
            .collect();
        Ok(Self { probs, cum })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `M × N` attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix<T: Real = f32> {
    pub alpha: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledSequence<T: Real = f32> {
    pub values: Tensor<T>,
}

impl<T: Real> PooledSequence<T> {
    pub fn heads(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Boundary probabilities `[N, 1]` from `z`: width-3 conv (replicate
/// padding) → ReLU → affine → sigmoid.
pub fn boundary_graph<T: Real>(g: &mut Graph<T>, z: NodeId) -> Result<NodeId, ModelError> {
    let w1 = g.var("bnd.w1")?;
    let b1 = g.var("bnd.b1")?;
    let w2 = g.var("bnd.w2")?;
    let b2 = g.var("bnd.b2")?;
    let h = g.conv1d(z, w1, Some(b1), Conv1dSpec::same(3, PadMode::Replicate))?;
    let h = g.relu(h)?;
    let o = g.matmul(h, w2)?;
    let o = g.add_row(o, b2)?;
    Ok(g.sigmoid(o)?)
}

/// Log-kernel `[M, N]`: `-(a_n - m)^2 / 2σ^2` for `m = 1..M`, from
/// boundary probabilities `b` (`[N, 1]`).
pub fn log_kernel_graph<T: Real>(g: &mut Graph<T>, b: NodeId, heads: usize, sigma: f64) -> Result<NodeId, ModelError> {
    let a = g.cumsum(b)?;
    let n = g.shape(a)[0];
    let a = g.reshape(a, vec![1, n])?;
    let ones = g.constant(Tensor::filled(vec![heads, 1], T::one()))?;
    let grid = g.matmul(ones, a)?;
    let centres = g.constant(Tensor::vector((1..=heads).map(|m| -T::c(m as f64)).collect()))?;
    let diff = g.add_col(grid, centres)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.scale(sq, T::c(-0.5 / (sigma * sigma)))?)
}

fn check_underflow<T: Real>(log_k: &Tensor<T>) -> Result<(), ModelError> {
    let (m, n) = log_k.dims2();
    for i in 0..m {
        let mx = log_k.data()[i * n..(i + 1) * n].iter().copied().fold(T::neg_infinity(), T::max);
        let mx = mx.to_f64().unwrap_or(f64::NEG_INFINITY);
        if mx < LOG_KERNEL_FLOOR {
            return Err(ModelError::DegeneratePooling { head: i + 1, max_log_kernel: mx });
        }
    }
    Ok(())
}

/// Row-softmax of the log-kernel: attention weights `[M, N]`.
pub fn attention_graph<T: Real>(
    g: &mut Graph<T>,
    b: NodeId,
    heads: usize,
    sigma: f64,
    policy: UnderflowPolicy,
) -> Result<NodeId, ModelError> {
    let lk = log_kernel_graph(g, b, heads, sigma)?;
    if policy == UnderflowPolicy::Error {
        check_underflow(g.value(lk))?;
    }
    let lse = g.logsumexp_rows(lk)?;
    let neg = g.scale(lse, -T::one())?;
    let la = g.add_col(lk, neg)?;
    Ok(g.exp(la)?)
}

/// `s = α · z`.
pub fn pool_graph<T: Real>(
    g: &mut Graph<T>,
    z: NodeId,
    b: NodeId,
    heads: usize,
    sigma: f64,
    policy: UnderflowPolicy,
) -> Result<NodeId, ModelError> {
    if g.shape(b)[0] != g.shape(z)[0] {
        return Err(ModelError::Shape(format!(
            "{} boundary probabilities for {} frames",
            g.shape(b)[0],
            g.shape(z)[0]
        )));
    }
    let alpha = attention_graph(g, b, heads, sigma, policy)?;
    Ok(g.matmul(alpha, z)?)
}

pub fn predict_boundaries<T: Real>(
    z: &FrameSequence<T>,
    model: &EncoderModel<T>,
) -> Result<BoundarySequence<T>, ModelError> {
    if z.len() < 2 {
        return Err(ModelError::TooShort(format!("{} frames; boundary prediction needs 2", z.len())));
    }
    let mut g = model.graph()?;
    let zn = g.constant(z.values.clone())?;
    let b = boundary_graph(&mut g, zn)?;
    BoundarySequence::from_probs(g.value(b).data().to_vec())
}

fn column<T: Real>(v: &[T]) -> Result<Tensor<T>, ModelError> {
    Ok(Tensor::new(vec![v.len(), 1], v.to_vec())?)
}

/// Kernel values before normalisation, `[M, N]`.
pub fn unnormalized_kernel<T: Real>(probs: &[T], heads: usize, sigma: f64) -> Result<Tensor<T>, ModelError> {
    let mut g = Graph::new();
    let b = g.constant(column(probs)?)?;
    let lk = log_kernel_graph(&mut g, b, heads, sigma)?;
    let e = g.exp(lk)?;
    Ok(g.value(e).clone())
}

/// Normalised attention weights from cumulative positions `a`.
pub fn attention_weights<T: Real>(a: &[T], heads: usize, sigma: f64) -> Result<AttentionMatrix<T>, ModelError> {
    if heads == 0 || !(sigma > 0.0) {
        return Err(ModelError::Config(format!("heads {heads} and sigma {sigma} must be positive")));
    }
    // recover increments so the graph's prefix sum reproduces `a`
    let probs: Vec<T> = a.iter().enumerate().map(|(i, &v)| if i == 0 { v } else { v - a[i - 1] }).collect();
    let mut g = Graph::new();
    let b = g.constant(column(&probs)?)?;
    let alpha = attention_graph(&mut g, b, heads, sigma, UnderflowPolicy::Error)?;
    Ok(AttentionMatrix { alpha: g.value(alpha).clone() })
}

/// Pools `z` with `M = config.heads(N)` heads.
pub fn soft_pool<T: Real>(
    z: &FrameSequence<T>,
    b: &BoundarySequence<T>,
    config: &AttentionConfig,
) -> Result<PooledSequence<T>, ModelError> {
    config.validate()?;
    soft_pool_heads(z, b, config.heads(z.len()), config.sigma)
}

/// Pools with an explicit head count.
pub fn soft_pool_heads<T: Real>(
    z: &FrameSequence<T>,
    b: &BoundarySequence<T>,
    heads: usize,
    sigma: f64,
) -> Result<PooledSequence<T>, ModelError> {
    let mut g = Graph::new();
    let zn = g.constant(z.values.clone())?;
    let bn = g.constant(column(&b.probs)?)?;
    let s = pool_graph(&mut g, zn, bn, heads, sigma, UnderflowPolicy::Error)?;
    Ok(PooledSequence { values: g.value(s).clone() })
}

/// Local maxima `≥ threshold` (strictly above the left neighbour, at least
/// the right one), then greedy suppression of peaks closer than
/// `min_gap_frames` to a larger kept peak (ties keep the earlier frame).
/// Returns times in seconds.
pub fn extract_hard_boundaries<T: Real>(probs: &[T], threshold: f64, min_gap_frames: usize) -> Vec<f64> {
    let p: Vec<f64> = probs.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let n = p.len();
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&i| {
            p[i] >= threshold && (i == 0 || p[i] > p[i - 1]) && (i + 1 == n || p[i] >= p[i + 1])
        })
        .collect();
    peaks.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in peaks {
        if kept.iter().all(|&k| k.abs_diff(i) >= min_gap_frames) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| i as f64 / FRAME_RATE).collect()
}

/// CSV `frame,prob`.
pub fn boundaries_csv<T: Real>(probs: &[T]) -> String {
    let mut s = String::from("frame,prob\n");
    for (i, p) in probs.iter().enumerate() {
        let _ = writeln!(s, "{i},{p:.6}");
    }
    s
}

/// `M` rows of `N` comma-separated values.
pub fn matrix_csv<T: Real>(m: &Tensor<T>) -> String {
    let (r, c) = m.dims2();
    let mut s = String::new();
    for i in 0..r {
        let row: Vec<String> = m.data()[i * c..(i + 1) * c].iter().map(|v| format!("{:.6e}", v.to_f64().unwrap_or(f64::NAN))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}
