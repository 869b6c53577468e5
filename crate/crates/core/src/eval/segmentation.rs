use serde::{Deserialize, Serialize};

use super::EvalError;

/// Slack added to the tolerance so that boundaries exactly `tolerance`
/// apart still match after floating-point rounding.
const MATCH_EPS: f64 = 1e-9;

/// Hit and list counts; additive across utterances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationCounts {
    pub hits: usize,
    pub n_pred: usize,
    pub n_ref: usize,
}

impl SegmentationCounts {
    pub fn add(&mut self, o: SegmentationCounts) {
        self.hits += o.hits;
        self.n_pred += o.n_pred;
        self.n_ref += o.n_ref;
    }

    pub fn scores(&self) -> Result<SegmentationScore, EvalError> {
        if self.n_ref == 0 {
            return Err(EvalError::EmptyReference);
        }
        let p = if self.n_pred == 0 { 0.0 } else { self.hits as f64 / self.n_pred as f64 };
        let r = self.hits as f64 / self.n_ref as f64;
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        // R/P - 1, written so it stays defined when nothing matched
        let os = self.n_pred as f64 / self.n_ref as f64 - 1.0;
        let r1 = ((1.0 - r).powi(2) + os * os).sqrt();
        let r2 = (-os + r - 1.0) / std::f64::consts::SQRT_2;
        let r_value = 1.0 - (r1.abs() + r2.abs()) / 2.0;
        Ok(SegmentationScore { precision: p, recall: r, f1, r_value, counts: *self })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub r_value: f64,
    pub counts: SegmentationCounts,
}

fn check_sorted(what: &str, v: &[f64]) -> Result<(), EvalError> {
    if v.iter().any(|t| !t.is_finite()) || v.windows(2).any(|w| w[1] < w[0]) {
        return Err(EvalError::Invalid(format!("{what} boundaries must be finite and sorted")));
    }
    Ok(())
}

/// Walks the references in time order; each takes the nearest unmatched
/// prediction within `tolerance` (ties go to the earlier prediction).
pub fn match_boundaries(predicted: &[f64], reference: &[f64], tolerance: f64) -> Result<SegmentationCounts, EvalError> {
    check_sorted("predicted", predicted)?;
    check_sorted("reference", reference)?;
    if !(tolerance >= 0.0) {
        return Err(EvalError::Invalid(format!("tolerance {tolerance} must be non-negative")));
    }
    let mut used = vec![false; predicted.len()];
    let mut hits = 0;
    for &r in reference {
        let lo = predicted.partition_point(|&p| p < r - tolerance - MATCH_EPS);
        let best = (lo..predicted.len())
            .take_while(|&i| predicted[i] <= r + tolerance + MATCH_EPS)
            .filter(|&i| !used[i])
            .min_by(|&a, &b| (predicted[a] - r).abs().total_cmp(&(predicted[b] - r).abs()).then(a.cmp(&b)));
        if let Some(i) = best {
            used[i] = true;
            hits += 1;
        }
    }
    Ok(SegmentationCounts { hits, n_pred: predicted.len(), n_ref: reference.len() })
}

pub fn segmentation_scores(predicted: &[f64], reference: &[f64], tolerance: f64) -> Result<SegmentationScore, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    match_boundaries(predicted, reference, tolerance)?.scores()
}
