use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{representation, EvalError, Representation};
use crate::encoder::EncoderModel;
use crate::rng;
use crate::synth::load_manifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Fraction of each speaker's utterances held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
    /// L2 penalty on the classifier weights.
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { test_fraction: 0.25, seed: 0, l2: 1e-3, max_iters: 2000, tol: 1e-6 }
    }
}

/// Multinomial logistic regression, weights `[d + 1, k]` (last row bias).
struct Softmax {
    d: usize,
    k: usize,
    w: Vec<f64>,
}

impl Softmax {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.w[self.d * self.k..].to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += xi * self.w[i * self.k + c];
            }
        }
        z
    }

    fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        (0..self.k).fold(0, |best, c| if z[c] > z[best] { c } else { best })
    }

    /// Mean negative log-likelihood plus penalty, and its gradient.
    fn objective(&self, w: &[f64], xs: &[Vec<f64>], ys: &[usize], l2: f64) -> (f64, Vec<f64>) {
        let probe = Softmax { d: self.d, k: self.k, w: w.to_vec() };
        let mut grad = vec![0.0; w.len()];
        let mut loss = 0.0;
        let n = xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let z = probe.logits(x);
            let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - z[y];
            for c in 0..self.k {
                let r = ((z[c] - lse).exp() - if c == y { 1.0 } else { 0.0 }) / n;
                for (i, &xi) in x.iter().enumerate() {
                    grad[i * self.k + c] += r * xi;
                }
                grad[self.d * self.k + c] += r;
            }
        }
        loss /= n;
        for i in 0..self.d * self.k {
            loss += 0.5 * l2 * w[i] * w[i];
            grad[i] += l2 * w[i];
        }
        (loss, grad)
    }

    /// Gradient descent with backtracking line search.
    fn fit(d: usize, k: usize, xs: &[Vec<f64>], ys: &[usize], cfg: &ProbeConfig) -> Self {
        let mut m = Softmax { d, k, w: vec![0.0; (d + 1) * k] };
        let mut step = 1.0;
        let (mut f, mut g) = m.objective(&m.w, xs, ys, cfg.l2);
        for _ in 0..cfg.max_iters {
            let gn2: f64 = g.iter().map(|v| v * v).sum();
            if gn2.sqrt() < cfg.tol {
                break;
            }
            loop {
                let cand: Vec<f64> = m.w.iter().zip(&g).map(|(w, gi)| w - step * gi).collect();
                let (fc, gc) = m.objective(&cand, xs, ys, cfg.l2);
                if fc <= f - 0.5 * step * gn2 || step < 1e-12 {
                    m.w = cand;
                    f = fc;
                    g = gc;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
        }
        m
    }
}

/// Test accuracy of a linear speaker classifier on `features`, split per
/// label so every label appears in both halves.
pub fn probe_accuracy(features: &[Vec<f64>], labels: &[usize], config: &ProbeConfig) -> Result<f64, EvalError> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(EvalError::Invalid(format!("{} feature rows for {} labels", features.len(), labels.len())));
    }
    if !(config.test_fraction > 0.0 && config.test_fraction < 1.0) {
        return Err(EvalError::Invalid(format!("test_fraction {} must lie in (0, 1)", config.test_fraction)));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(EvalError::Invalid("feature rows differ in length".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_label[l].push(i);
    }
    let present = by_label.iter().filter(|v| !v.is_empty()).count();
    if present < 2 {
        return Err(EvalError::InsufficientData(format!("{present} speaker(s); the probe needs at least 2")));
    }
    let mut r = rng::stream(config.seed, 0x9b);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in &mut by_label {
        if idx.len() < 2 {
            train.extend(idx.iter().copied());
            continue;
        }
        idx.shuffle(&mut r);
        let n_test = ((idx.len() as f64 * config.test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    if test.is_empty() {
        return Err(EvalError::InsufficientData("no speaker has two utterances to split".into()));
    }

    // standardize with training statistics
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(&features[i]) {
            *m += v / train.len() as f64;
        }
    }
    for &i in &train {
        for ((s, m), v) in sd.iter_mut().zip(&mean).zip(&features[i]) {
            *s += (v - m).powi(2) / train.len() as f64;
        }
    }
    let norm = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&mean)
            .zip(&sd)
            .map(|((v, m), s)| if s.sqrt() > 1e-12 { (v - m) / s.sqrt() } else { 0.0 })
            .collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| norm(&features[i])).collect();
    let ys: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let model = Softmax::fit(d, k, &xs, &ys, config);
    let correct = test.iter().filter(|&&i| model.predict(&norm(&features[i])) == labels[i]).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Mean-pools each utterance's frames and probes speaker identity.
pub fn speaker_probe(
    model: &EncoderModel<f32>,
    manifest: &Path,
    config: &ProbeConfig,
    repr: Representation,
) -> Result<f64, EvalError> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = load_manifest(manifest)?;
    let feats = entries
        .par_iter()
        .map(|e| {
            let audio = e.load_audio(base)?;
            let x = representation(model, &audio, repr)?;
            let (n, d) = x.dims2();
            let mut m = vec![0.0; d];
            for i in 0..n {
                for (mj, v) in m.iter_mut().zip(x.row(i)) {
                    *mj += *v as f64 / n as f64;
                }
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let labels: Vec<usize> = entries.iter().map(|e| e.speaker as usize).collect();
    probe_accuracy(&feats, &labels, config)
}
