//! Segmentation scoring, ABX discriminability, the speaker probe and
//! TIMIT label ingestion.

mod abx;
mod phn;
mod probe;
mod segmentation;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use abx::{abx_error, abx_error_features, dtw_distance, triple_error, AbxResult};
pub use phn::{parse_phn, parse_phn_str, PhnLabels};
pub use probe::{probe_accuracy, speaker_probe, ProbeConfig};
pub use segmentation::{match_boundaries, segmentation_scores, SegmentationCounts, SegmentationScore};

use crate::diffcore::Tensor;
use crate::dsp::{AudioBuffer, DspError};
use crate::encoder::{context_graph, encode_graph, audio_tensor, EncoderModel, ModelError};
use crate::softpool::{boundary_graph, extract_hard_boundaries, pool_graph, AttentionConfig, UnderflowPolicy};
use crate::synth::{load_manifest, SynthError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference boundary list is empty")]
    EmptyReference,
    #[error("no ABX triples to score")]
    EmptyTriples,
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl EvalError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// Which layer feeds ABX and the speaker probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    #[default]
    Z,
    C,
    /// Soft-pooled `s` with the default attention configuration.
    S,
}

/// `[rows, d]` representation of a waveform.
pub fn representation(model: &EncoderModel<f32>, audio: &AudioBuffer, repr: Representation) -> Result<Tensor<f32>, EvalError> {
    let mut g = model.graph()?;
    let x = g.constant(audio_tensor(audio)?).map_err(ModelError::from)?;
    let z = encode_graph(&mut g, x)?;
    let out = match repr {
        Representation::Z => z,
        Representation::C => context_graph(&mut g, &model.config, z)?,
        Representation::S => {
            let att = AttentionConfig::default();
            let b = boundary_graph(&mut g, z)?;
            let n = g.shape(z)[0];
            pool_graph(&mut g, z, b, att.heads(n), att.sigma, UnderflowPolicy::Stable)?
        }
    };
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub tolerance: f64,
    pub threshold: f64,
    pub min_gap_frames: usize,
    /// Drop reference boundaries at or before this time (utterance onsets).
    pub skip_before: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { tolerance: 0.02, threshold: 0.5, min_gap_frames: 2, skip_before: 0.0 }
    }
}

/// Boundary probabilities of a waveform.
pub fn boundary_probs(model: &EncoderModel<f32>, audio: &AudioBuffer) -> Result<Vec<f32>, EvalError> {
    let mut g = model.graph()?;
    let x = g.constant(audio_tensor(audio)?).map_err(ModelError::from)?;
    let z = encode_graph(&mut g, x)?;
    let b = boundary_graph(&mut g, z)?;
    Ok(g.value(b).data().to_vec())
}

fn keep_reference(times: &[f64], cfg: &SegmentationConfig) -> Vec<f64> {
    times.iter().copied().filter(|&t| t > cfg.skip_before).collect()
}

/// Micro-averaged segmentation scores over a manifest. References come
/// from the synthetic labels, or from `<phn_dir>/<audio stem>.PHN` when
/// `phn_dir` is given.
pub fn evaluate_segmentation(
    model: &EncoderModel<f32>,
    manifest: &Path,
    phn_dir: Option<&Path>,
    cfg: &SegmentationConfig,
) -> Result<SegmentationScore, EvalError> {
    evaluate_segmentation_with(manifest, phn_dir, cfg, |audio, _| {
        let probs = boundary_probs(model, audio)?;
        Ok(extract_hard_boundaries(&probs, cfg.threshold, cfg.min_gap_frames))
    })
}

/// As [`evaluate_segmentation`] with an arbitrary predictor, which gets
/// the audio and the reference boundaries.
pub fn evaluate_segmentation_with<F>(
    manifest: &Path,
    phn_dir: Option<&Path>,
    cfg: &SegmentationConfig,
    predict: F,
) -> Result<SegmentationScore, EvalError>
where
    F: Fn(&AudioBuffer, &[f64]) -> Result<Vec<f64>, EvalError> + Sync,
{
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = load_manifest(manifest)?;
    let counts = entries
        .par_iter()
        .map(|e| {
            let audio = e.load_audio(base)?;
            let reference = match phn_dir {
                Some(dir) => {
                    let stem = Path::new(&e.audio).file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    parse_phn(&dir.join(format!("{stem}.PHN")), audio.sample_rate())?.boundaries
                }
                None => e.load_label(base)?.starts,
            };
            let pred = predict(&audio, &reference)?;
            match_boundaries(&keep_reference(&pred, cfg), &keep_reference(&reference, cfg), cfg.tolerance)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let mut total = SegmentationCounts::default();
    for c in counts {
        total.add(c);
    }
    total.scores()
}
