use std::path::Path;

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_utterance, Corpus, SynthError};
use crate::dsp::{self, AudioBuffer};
use crate::{fsutil, rng};

pub const TRIPLES_FILE: &str = "triples.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbxCondition {
    Within,
    Across,
}

/// A, B share a speaker and differ only in the centre unit; X repeats A's
/// units, spoken by A's speaker (within) or another one (across).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbxTriple {
    /// WAV paths relative to the triples file.
    pub a: String,
    pub b: String,
    pub x: String,
    pub condition: AbxCondition,
    pub speaker_a: u32,
    pub speaker_x: u32,
    pub units_a: Vec<usize>,
    pub units_b: Vec<usize>,
}

/// Renders `n_triples` triphone triples from the corpus described by
/// `manifest` into `out_dir` (alternating within/across) and writes
/// `triples.jsonl` there.
pub fn generate_abx_triples(
    manifest: &Path,
    n_triples: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<AbxTriple>, SynthError> {
    let corpus = Corpus::load_for_manifest(manifest)?;
    let n_speakers = corpus.speakers.len();
    let n_units = corpus.inventory.len();
    if n_speakers < 2 {
        return Err(SynthError::InsufficientDiversity(format!(
            "{n_speakers} speaker(s); need 2"
        )));
    }
    if n_units < 2 {
        return Err(SynthError::InsufficientDiversity(format!(
            "{n_units} unit(s); need 2 centre units"
        )));
    }
    let sr = corpus.config.sample_rate;
    let (dlo, dhi) = corpus.config.unit_seconds;

    let triples = (0..n_triples)
        .into_par_iter()
        .map(|i| -> Result<AbxTriple, SynthError> {
            let mut r = rng::stream(rng::derive(seed, &[i as u64]), 0xab);
            let condition = if i % 2 == 0 {
                AbxCondition::Within
            } else {
                AbxCondition::Across
            };
            let sa = r.random_range(0..n_speakers);
            let sx = match condition {
                AbxCondition::Within => sa,
                AbxCondition::Across => (sa + 1 + r.random_range(0..n_speakers - 1)) % n_speakers,
            };
            let u1 = r.random_range(0..n_units);
            let u2 = r.random_range(0..n_units);
            let u5 = (u2 + 1 + r.random_range(0..n_units - 1)) % n_units;
            let u3 = r.random_range(0..n_units);
            let mut dur = || dlo + (dhi - dlo) * r.random::<f64>();
            let units_a = vec![u1, u2, u3];
            let units_b = vec![u1, u5, u3];
            let da: Vec<f64> = (0..3).map(|_| dur()).collect();
            let db: Vec<f64> = (0..3).map(|_| dur()).collect();
            let dx: Vec<f64> = (0..3).map(|_| dur()).collect();
            let render =
                |units: &[usize], d: &[f64], s: usize, k: u64| -> Result<AudioBuffer, SynthError> {
                    let (a, _) = generate_utterance(
                        &corpus.inventory,
                        units,
                        d,
                        &corpus.speakers[s],
                        s as u32,
                        sr,
                        rng::derive(seed, &[i as u64, k]),
                    )?;
                    Ok(a)
                };
            let names = ["a", "b", "x"].map(|t| format!("abx/{i:05}_{t}.wav"));
            let audios = [
                render(&units_a, &da, sa, 0)?,
                render(&units_b, &db, sa, 1)?,
                render(&units_a, &dx, sx, 2)?,
            ];
            for (name, audio) in names.iter().zip(&audios) {
                let p = out_dir.join(name);
                fsutil::write_atomic(&p, &dsp::wav_bytes(audio)?)
                    .map_err(|e| SynthError::io(&p, e))?;
            }
            let [a, b, x] = names;
            Ok(AbxTriple {
                a,
                b,
                x,
                condition,
                speaker_a: sa as u32,
                speaker_x: sx as u32,
                units_a,
                units_b,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut text = String::new();
    for t in &triples {
        text.push_str(&serde_json::to_string(t)?);
        text.push('\n');
    }
    let p = out_dir.join(TRIPLES_FILE);
    fsutil::write_atomic_str(&p, &text).map_err(|e| SynthError::io(&p, e))?;
    Ok(triples)
}

pub fn load_abx_triples(path: &Path) -> Result<Vec<AbxTriple>, SynthError> {
    let text = std::fs::read_to_string(path).map_err(|e| SynthError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SynthError::Malformed {
                what: format!("triples line {}", i + 1),
                detail: e.to_string(),
            })
        })
        .collect()
}
