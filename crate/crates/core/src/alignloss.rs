//! Contrastive alignment between pooled sequences of original and
//! augmented audio. Head `m` of the augmented sequence is the positive
//! for head `m` of the original; the softmax runs over the original
//! sequence's own heads.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Real, Tensor};
use crate::encoder::ModelError;
use crate::softpool::PooledSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignLossConfig {
    pub tau: f64,
    /// Use the positive in place of the self-similarity term of the
    /// denominator (the usual contrastive form).
    pub include_positive_in_denominator: bool,
}

impl Default for AlignLossConfig {
    fn default() -> Self {
        Self { tau: 0.1, include_positive_in_denominator: false }
    }
}

impl AlignLossConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ModelError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Per-head terms `[M]`.
pub fn alignment_terms_graph<T: Real>(
    g: &mut Graph<T>,
    s: NodeId,
    s_aug: NodeId,
    config: &AlignLossConfig,
) -> Result<NodeId, ModelError> {
    config.validate()?;
    let (sa, sb) = (g.shape(s).to_vec(), g.shape(s_aug).to_vec());
    if sa != sb || sa.len() != 2 {
        return Err(ModelError::Shape(format!("pooled sequences {sa:?} and {sb:?} differ")));
    }
    let m = sa[0];
    let inv_tau = T::c(1.0 / config.tau);
    let self_cos = g.cosine_similarity(s, s)?;
    let cross = g.cosine_similarity(s, s_aug)?;
    let pos = g.gather(cross, (0..m).map(|i| i * m + i).collect(), vec![m])?;
    let denom = if config.include_positive_in_denominator {
        let a = g.reshape(self_cos, vec![m * m, 1])?;
        let b = g.reshape(cross, vec![m * m, 1])?;
        let both = g.concat_rows(&[a, b])?;
        let idx = (0..m)
            .flat_map(|i| (0..m).map(move |j| if i == j { m * m + i * m + i } else { i * m + j }))
            .collect();
        g.gather(both, idx, vec![m, m])?
    } else {
        self_cos
    };
    let logits = g.scale(denom, inv_tau)?;
    let lse = g.logsumexp_rows(logits)?;
    let pos = g.scale(pos, inv_tau)?;
    Ok(g.sub(lse, pos)?)
}

/// Optimisation objective: the sum of terms divided by `M`.
pub fn alignment_loss_graph<T: Real>(
    g: &mut Graph<T>,
    s: NodeId,
    s_aug: NodeId,
    config: &AlignLossConfig,
) -> Result<NodeId, ModelError> {
    let terms = alignment_terms_graph(g, s, s_aug, config)?;
    Ok(g.mean(terms)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignLoss {
    /// `Σ_m term_m`.
    pub total: f64,
    pub terms: Vec<f64>,
}

impl AlignLoss {
    pub fn mean(&self) -> f64 {
        self.total / self.terms.len() as f64
    }
}

pub fn alignment_contrastive_loss<T: Real>(
    s: &PooledSequence<T>,
    s_aug: &PooledSequence<T>,
    config: &AlignLossConfig,
) -> Result<AlignLoss, ModelError> {
    let mut g: Graph<T> = Graph::new();
    let a = g.constant(s.values.clone())?;
    let b = g.constant(s_aug.values.clone())?;
    let t = alignment_terms_graph(&mut g, a, b, config)?;
    let terms: Vec<f64> = g.value(t).data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    Ok(AlignLoss { total: terms.iter().sum(), terms })
}

/// Convenience constructor for tests and tools.
pub fn pooled<T: Real>(rows: usize, cols: usize, data: Vec<T>) -> Result<PooledSequence<T>, ModelError> {
    Ok(PooledSequence { values: Tensor::new(vec![rows, cols], data)? })
}
