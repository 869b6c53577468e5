//! Synthetic speech: a discrete unit inventory rendered by source-filter
//! synthesis, with exact unit boundaries and controllable speakers.

mod abx;
mod corpus;
mod render;

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::RngExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::DspError;
use crate::rng;

pub use abx::{generate_abx_triples, load_abx_triples, AbxCondition, AbxTriple, TRIPLES_FILE};
pub use corpus::{
    generate_corpus, load_manifest, Corpus, CorpusConfig, ManifestEntry, CORPUS_FILE, MANIFEST_FILE,
};
pub use render::{generate_utterance, CROSSFADE_SECONDS, MAX_UNIT_SECONDS, MIN_UNIT_SECONDS};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown unit id {0}")]
    UnknownUnit(usize),
    #[error("unit duration {0} s outside [0.05, 0.4]")]
    DurationOutOfRange(f64),
    #[error("invalid speaker: {0}")]
    InvalidSpeaker(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("insufficient corpus diversity: {0}")]
    InsufficientDiversity(String),
    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SynthError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    /// Centre frequency in Hz.
    pub freq: f64,
    /// Bandwidth in Hz.
    pub bandwidth: f64,
    /// Linear gain at the centre frequency.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitTemplate {
    pub resonances: Vec<Resonance>,
    /// Aspiration noise level relative to the pulse train.
    pub noise_mix: f64,
    /// Noise-excited high-frequency resonance.
    pub frication: Resonance,
    pub gain: f64,
}

/// Resonance ranges (Hz) for the three template formants.
const FORMANT_RANGES: [(f64, f64); 3] = [(250.0, 900.0), (800.0, 2500.0), (1800.0, 4000.0)];
/// Minimum cosine distance between template envelopes.
pub const MIN_TEMPLATE_DISTANCE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitInventory {
    units: Vec<UnitTemplate>,
}

impl UnitInventory {
    pub fn new(units: Vec<UnitTemplate>) -> Result<Self, SynthError> {
        if units.is_empty() {
            return Err(SynthError::InvalidConfig("empty inventory".into()));
        }
        for (i, u) in units.iter().enumerate() {
            if u.resonances.is_empty()
                || u.resonances.iter().any(|r| {
                    !(r.freq > 0.0 && r.bandwidth > 0.0 && r.freq < 8000.0 && r.amplitude > 0.0)
                })
            {
                return Err(SynthError::InvalidConfig(format!(
                    "unit {i} has invalid resonances"
                )));
            }
        }
        Ok(Self { units })
    }

    /// Random inventory with pairwise-distinct templates.
    pub fn generate(n_units: usize, seed: u64) -> Result<Self, SynthError> {
        if n_units == 0 {
            return Err(SynthError::InvalidConfig("n_units must be positive".into()));
        }
        let mut r = rng::stream(seed, 0x1e7);
        let mut units: Vec<UnitTemplate> = Vec::with_capacity(n_units);
        let mut attempts = 0;
        while units.len() < n_units {
            attempts += 1;
            if attempts > 100_000 {
                return Err(SynthError::InsufficientDiversity(format!(
                    "could not place {n_units} distinct templates"
                )));
            }
            let resonances: Vec<Resonance> = FORMANT_RANGES
                .iter()
                .map(|&(lo, hi)| {
                    let freq = (lo.ln() + (hi.ln() - lo.ln()) * r.random::<f64>()).exp();
                    let amplitude = 10f64.powf(-15.0 * r.random::<f64>() / 20.0);
                    Resonance {
                        freq,
                        bandwidth: 40.0 + 0.04 * freq,
                        amplitude,
                    }
                })
                .collect();
            let noise_mix = 0.02 + 0.4 * r.random::<f64>();
            let ff = (3000f64.ln() + (7000f64.ln() - 3000f64.ln()) * r.random::<f64>()).exp();
            let frication = Resonance {
                freq: ff,
                bandwidth: 300.0 + 0.1 * ff,
                amplitude: 10f64.powf(-30.0 * r.random::<f64>() / 20.0),
            };
            let gain = 0.5 + 0.5 * r.random::<f64>();
            let cand = UnitTemplate {
                resonances,
                noise_mix,
                frication,
                gain,
            };
            if units
                .iter()
                .all(|u| template_distance(u, &cand) >= MIN_TEMPLATE_DISTANCE)
            {
                units.push(cand);
            }
        }
        Ok(Self { units })
    }

    pub fn units(&self) -> &[UnitTemplate] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.units.len() {
            for j in i + 1..self.units.len() {
                best = best.min(template_distance(&self.units[i], &self.units[j]));
            }
        }
        best
    }
}

/// Complex response of a unit-peak two-pole resonator at `f` Hz.
fn resonator_response(r: &Resonance, f: f64, sr: f64) -> (f64, f64) {
    let c = -(-2.0 * PI * r.bandwidth / sr).exp();
    let b = 2.0 * (-PI * r.bandwidth / sr).exp() * (2.0 * PI * r.freq / sr).cos();
    let den = |w: f64| {
        (
            1.0 - b * w.cos() - c * (2.0 * w).cos(),
            b * w.sin() + c * (2.0 * w).sin(),
        )
    };
    let (pr, pi) = den(2.0 * PI * r.freq / sr);
    let (dr, di) = den(2.0 * PI * f / sr);
    let a = pr.hypot(pi);
    let n = dr * dr + di * di;
    (a * dr / n, -a * di / n)
}

/// Mean-removed log power envelope of a template on an even grid up to
/// 8 kHz (flat excitation, no speaker tilt).
pub fn template_envelope(t: &UnitTemplate) -> Vec<f64> {
    const SR: f64 = 16_000.0;
    const BINS: usize = 128;
    let env: Vec<f64> = (0..BINS)
        .map(|i| {
            let f = (i as f64 + 0.5) * 0.5 * SR / BINS as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for (n, r) in t.resonances.iter().enumerate() {
                let (x, y) = resonator_response(r, f, SR);
                let s = if n % 2 == 0 {
                    r.amplitude
                } else {
                    -r.amplitude
                };
                re += s * x;
                im += s * y;
            }
            let (fx, fy) = resonator_response(&t.frication, f, SR);
            let voiced = (re * re + im * im) * (1.0 + t.noise_mix * t.noise_mix / 3.0);
            let hiss = t.frication.amplitude.powi(2) * (fx * fx + fy * fy) / 3.0;
            (voiced + hiss + 1e-12).ln()
        })
        .collect();
    let m = env.iter().sum::<f64>() / BINS as f64;
    env.into_iter().map(|v| v - m).collect()
}

/// Cosine distance between template envelopes.
pub fn template_distance(a: &UnitTemplate, b: &UnitTemplate) -> f64 {
    let (x, y) = (template_envelope(a), template_envelope(b));
    let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
    let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
    let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    1.0 - dot / (nx * ny)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerParams {
    pub f0_base: f64,
    pub f0_jitter: f64,
    /// dB per octave, non-positive.
    pub spectral_tilt: f64,
    pub resonance_scale: f64,
}

impl SpeakerParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(80.0..=300.0).contains(&self.f0_base) {
            return Err(SynthError::InvalidSpeaker(format!(
                "f0_base {} outside [80, 300]",
                self.f0_base
            )));
        }
        if !(0.85..=1.15).contains(&self.resonance_scale) {
            return Err(SynthError::InvalidSpeaker(format!(
                "resonance_scale {} outside [0.85, 1.15]",
                self.resonance_scale
            )));
        }
        if !(self.f0_jitter >= 0.0 && self.f0_jitter.is_finite() && self.spectral_tilt.is_finite())
        {
            return Err(SynthError::InvalidSpeaker("bad jitter or tilt".into()));
        }
        Ok(())
    }

    /// `n` speakers with f0 stratified over [90, 250] Hz.
    pub fn generate_set(n: usize, seed: u64) -> Vec<Self> {
        let mut r = rng::stream(seed, 0x5be);
        (0..n)
            .map(|i| {
                let u = (i as f64 + 0.2 + 0.6 * r.random::<f64>()) / n as f64;
                Self {
                    f0_base: 90.0 + 160.0 * u,
                    f0_jitter: 4.0 + 8.0 * r.random::<f64>(),
                    spectral_tilt: -3.0 - 9.0 * r.random::<f64>(),
                    resonance_scale: 0.88 + 0.24 * r.random::<f64>(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceLabel {
    pub units: Vec<usize>,
    /// Start time of each unit in seconds.
    pub starts: Vec<f64>,
    pub speaker: u32,
}

impl UtteranceLabel {
    /// CSV `start_seconds,unit_id`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("start_seconds,unit_id\n");
        for (t, u) in self.starts.iter().zip(&self.units) {
            let _ = writeln!(s, "{t:.6},{u}");
        }
        s
    }

    pub fn from_csv(text: &str, speaker: u32) -> Result<Self, SynthError> {
        let bad = |detail: String| SynthError::Malformed {
            what: "label file".into(),
            detail,
        };
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "start_seconds,unit_id" => {}
            other => return Err(bad(format!("bad header {other:?}"))),
        }
        let mut starts = Vec::new();
        let mut units = Vec::new();
        for (i, l) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut p = l.split(',');
            let t = p.next().and_then(|v| v.trim().parse::<f64>().ok());
            let u = p.next().and_then(|v| v.trim().parse::<usize>().ok());
            match (t, u, p.next()) {
                (Some(t), Some(u), None) => {
                    starts.push(t);
                    units.push(u);
                }
                _ => return Err(bad(format!("line {}: `{l}`", i + 2))),
            }
        }
        let label = Self {
            units,
            starts,
            speaker,
        };
        label.validate().map_err(bad)?;
        Ok(label)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.starts.len() != self.units.len() || self.starts.is_empty() {
            return Err("boundary count must equal unit count".into());
        }
        if self.starts[0] != 0.0 {
            return Err(format!("first boundary is {}", self.starts[0]));
        }
        if !self.starts.windows(2).all(|w| w[1] > w[0]) {
            return Err("boundaries not strictly increasing".into());
        }
        Ok(())
    }
}
