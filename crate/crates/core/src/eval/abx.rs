use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{representation, EvalError, Representation};
use crate::diffcore::{Real, Tensor};
use crate::dsp;
use crate::encoder::EncoderModel;
use crate::synth::{AbxCondition, AbxTriple};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbxResult {
    /// `None` when no triple of that condition was scored.
    pub within_error: Option<f64>,
    pub across_error: Option<f64>,
    pub n_within: usize,
    pub n_across: usize,
}

fn unit_rows<T: Real>(x: &Tensor<T>) -> Vec<Vec<f64>> {
    let (n, d) = x.dims2();
    (0..n)
        .map(|i| {
            let r: Vec<f64> = x.data()[i * d..(i + 1) * d].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|v| v / norm).collect()
            } else {
                r
            }
        })
        .collect()
}

/// Mean cosine distance along the cheapest monotonic alignment between
/// the rows of `a` and `b` (steps right, down, diagonal; unit weights).
/// Among equal-cost paths the shorter one is taken.
pub fn dtw_distance<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, EvalError> {
    let (ua, ub) = (unit_rows(a), unit_rows(b));
    let (n, m) = (ua.len(), ub.len());
    if n == 0 || m == 0 || a.dims2().1 != b.dims2().1 {
        return Err(EvalError::Invalid(format!("cannot align {:?} with {:?}", a.shape(), b.shape())));
    }
    let dist = |i: usize, j: usize| 1.0 - ua[i].iter().zip(&ub[j]).map(|(x, y)| x * y).sum::<f64>();
    // (cost, length) per cell, one row at a time
    let mut prev: Vec<(f64, usize)> = vec![(f64::INFINITY, 0); m];
    let mut cur = prev.clone();
    for i in 0..n {
        for j in 0..m {
            let d = dist(i, j);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut cands = Vec::with_capacity(3);
                if i > 0 {
                    cands.push(prev[j]);
                }
                if j > 0 {
                    cands.push(cur[j - 1]);
                }
                if i > 0 && j > 0 {
                    cands.push(prev[j - 1]);
                }
                cands.into_iter().min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1))).expect("non-empty")
            };
            cur[j] = (best.0 + d, best.1 + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (cost, len) = prev[m - 1];
    Ok(cost / len as f64)
}

/// Per-triple error: 1 if X is closer to B, 0.5 on a tie, 0 otherwise.
pub fn triple_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>, x: &Tensor<T>) -> Result<f64, EvalError> {
    let (dax, dbx) = (dtw_distance(a, x)?, dtw_distance(b, x)?);
    Ok(if dax > dbx {
        1.0
    } else if dax == dbx {
        0.5
    } else {
        0.0
    })
}

/// Scores precomputed frame sequences `(A, B, X, condition)`.
pub fn abx_error_features<T: Real>(
    triples: &[(Tensor<T>, Tensor<T>, Tensor<T>, AbxCondition)],
) -> Result<AbxResult, EvalError> {
    if triples.is_empty() {
        return Err(EvalError::EmptyTriples);
    }
    let errs = triples
        .par_iter()
        .map(|(a, b, x, c)| Ok((triple_error(a, b, x)?, *c)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(summarize(&errs))
}

fn summarize(errs: &[(f64, AbxCondition)]) -> AbxResult {
    let part = |c: AbxCondition| {
        let v: Vec<f64> = errs.iter().filter(|e| e.1 == c).map(|e| e.0).collect();
        ((!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64), v.len())
    };
    let (within_error, n_within) = part(AbxCondition::Within);
    let (across_error, n_across) = part(AbxCondition::Across);
    AbxResult { within_error, across_error, n_within, n_across }
}

/// Encodes every triple's A, B and X (paths relative to `base`) and
/// scores them.
pub fn abx_error(
    model: &EncoderModel<f32>,
    triples: &[AbxTriple],
    base: &Path,
    repr: Representation,
) -> Result<AbxResult, EvalError> {
    if triples.is_empty() {
        return Err(EvalError::EmptyTriples);
    }
    let errs = triples
        .par_iter()
        .map(|t| {
            let feats = [&t.a, &t.b, &t.x]
                .map(|p| -> Result<Tensor<f32>, EvalError> {
                    let audio = dsp::load_wav(base.join(p))?;
                    representation(model, &audio, repr)
                });
            let [a, b, x] = feats;
            Ok((triple_error(&a?, &b?, &x?)?, t.condition))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(summarize(&errs))
}
