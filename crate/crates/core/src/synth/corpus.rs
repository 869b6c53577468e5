use std::path::{Path, PathBuf};

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_utterance, SpeakerParams, SynthError, UnitInventory, UtteranceLabel};
use crate::dsp::{self, AudioBuffer, DEFAULT_SAMPLE_RATE};
use crate::{fsutil, rng};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CORPUS_FILE: &str = "corpus.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Exact utterance count; takes precedence over `minutes`.
    pub n_utterances: Option<usize>,
    /// Generate until at least this much audio exists.
    pub minutes: Option<f64>,
    pub n_speakers: usize,
    pub n_units: usize,
    pub utterance_seconds: (f64, f64),
    pub unit_seconds: (f64, f64),
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_utterances: Some(100),
            minutes: None,
            n_speakers: 4,
            n_units: 20,
            utterance_seconds: (2.0, 4.0),
            unit_seconds: (0.06, 0.25),
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_speakers < 2 {
            return bad(format!("need at least 2 speakers, got {}", self.n_speakers));
        }
        if self.n_units == 0 {
            return bad("n_units must be positive".into());
        }
        if self.n_utterances.is_none() && self.minutes.is_none_or(|m| !(m > 0.0)) {
            return bad("set n_utterances or a positive minutes".into());
        }
        let (lo, hi) = self.unit_seconds;
        if !(super::MIN_UNIT_SECONDS..=super::MAX_UNIT_SECONDS).contains(&lo)
            || !(lo..=super::MAX_UNIT_SECONDS).contains(&hi)
        {
            return bad(format!(
                "unit_seconds ({lo}, {hi}) must lie within [0.05, 0.4]"
            ));
        }
        let (ulo, uhi) = self.utterance_seconds;
        if !(ulo > 0.0 && ulo <= uhi) {
            return bad(format!("bad utterance_seconds ({ulo}, {uhi})"));
        }
        if self.sample_rate < 8000 {
            return bad(format!("sample rate {} too low", self.sample_rate));
        }
        Ok(())
    }
}

/// Corpus-level metadata stored next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub inventory: UnitInventory,
    pub speakers: Vec<SpeakerParams>,
}

impl Corpus {
    pub fn from_config(config: &CorpusConfig) -> Result<Self, SynthError> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            inventory: UnitInventory::generate(config.n_units, rng::derive(config.seed, &[1]))?,
            speakers: SpeakerParams::generate_set(
                config.n_speakers,
                rng::derive(config.seed, &[2]),
            ),
        })
    }

    /// Reads `corpus.json` from the directory holding `manifest`.
    pub fn load_for_manifest(manifest: &Path) -> Result<Self, SynthError> {
        let path = manifest
            .parent()
            .unwrap_or(Path::new("."))
            .join(CORPUS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| SynthError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Paths are relative to the manifest's directory.
    pub audio: String,
    pub speaker: u32,
    pub labels: String,
}

impl ManifestEntry {
    pub fn audio_path(&self, base: &Path) -> PathBuf {
        base.join(&self.audio)
    }

    pub fn labels_path(&self, base: &Path) -> PathBuf {
        base.join(&self.labels)
    }

    pub fn load_audio(&self, base: &Path) -> Result<AudioBuffer, SynthError> {
        Ok(dsp::load_wav(self.audio_path(base))?)
    }

    pub fn load_label(&self, base: &Path) -> Result<UtteranceLabel, SynthError> {
        let p = self.labels_path(base);
        let text = std::fs::read_to_string(&p).map_err(|e| SynthError::io(&p, e))?;
        UtteranceLabel::from_csv(&text, self.speaker)
    }
}

/// Reads a JSON-lines manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, SynthError> {
    let text = std::fs::read_to_string(path).map_err(|e| SynthError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SynthError::Malformed {
                what: format!("manifest line {}", i + 1),
                detail: e.to_string(),
            })
        })
        .collect()
}

struct Plan {
    units: Vec<usize>,
    durations: Vec<f64>,
    speaker: usize,
    seed: u64,
}

fn plan_corpus(config: &CorpusConfig) -> Vec<Plan> {
    let mut r = rng::stream(config.seed, 0xc0);
    let uniform = |r: &mut rng::Rng, (lo, hi): (f64, f64)| lo + (hi - lo) * r.random::<f64>();
    let target_total = config.minutes.map(|m| m * 60.0).unwrap_or(f64::INFINITY);
    let mut plans = Vec::new();
    let mut total = 0.0;
    loop {
        let i = plans.len();
        match config.n_utterances {
            Some(n) if i >= n => break,
            None if total >= target_total => break,
            _ => {}
        }
        let target = uniform(&mut r, config.utterance_seconds);
        let mut units = Vec::new();
        let mut durations = Vec::new();
        let mut len = 0.0;
        while len < target || units.is_empty() {
            let d: f64 = uniform(&mut r, config.unit_seconds);
            units.push(r.random_range(0..config.n_units));
            durations.push(d);
            len += d;
        }
        total += len;
        plans.push(Plan {
            units,
            durations,
            speaker: i % config.n_speakers,
            seed: rng::derive(config.seed, &[3, i as u64]),
        });
    }
    plans
}

/// Writes `wav/`, `labels/`, the manifest and `corpus.json` under `out_dir`.
pub fn generate_corpus(
    config: &CorpusConfig,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>, SynthError> {
    let corpus = Corpus::from_config(config)?;
    for sub in ["wav", "labels"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| SynthError::io(&d, e))?;
    }
    let plans = plan_corpus(config);
    let entries = plans
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<ManifestEntry, SynthError> {
            let (audio, label) = generate_utterance(
                &corpus.inventory,
                &p.units,
                &p.durations,
                &corpus.speakers[p.speaker],
                p.speaker as u32,
                config.sample_rate,
                p.seed,
            )?;
            let entry = ManifestEntry {
                audio: format!("wav/utt_{i:05}.wav"),
                speaker: p.speaker as u32,
                labels: format!("labels/utt_{i:05}.csv"),
            };
            let wav = dsp::wav_bytes(&audio)?;
            let ap = entry.audio_path(out_dir);
            fsutil::write_atomic(&ap, &wav).map_err(|e| SynthError::io(&ap, e))?;
            let lp = entry.labels_path(out_dir);
            fsutil::write_atomic_str(&lp, &label.to_csv()).map_err(|e| SynthError::io(&lp, e))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut manifest = String::new();
    for e in &entries {
        manifest.push_str(&serde_json::to_string(e)?);
        manifest.push('\n');
    }
    let mp = out_dir.join(MANIFEST_FILE);
    fsutil::write_atomic_str(&mp, &manifest).map_err(|e| SynthError::io(&mp, e))?;
    let cp = out_dir.join(CORPUS_FILE);
    fsutil::write_atomic_str(&cp, &serde_json::to_string_pretty(&corpus)?)
        .map_err(|e| SynthError::io(&cp, e))?;
    log::info!(
        "wrote {} utterances to {}",
        entries.len(),
        out_dir.display()
    );
    Ok(entries)
}
