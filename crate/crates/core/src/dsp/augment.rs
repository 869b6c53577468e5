use std::fmt::Write as _;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::vocoder::{pitch_shift, time_stretch};
use super::{AudioBuffer, DspError};
use crate::rng;

/// Monotonic piecewise-linear map from original to augmented time.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    knots: Vec<(f64, f64)>,
}

const TIME_EPS: f64 = 1e-9;

impl AlignmentMap {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, DspError> {
        if knots.len() < 2 {
            return Err(DspError::InvalidMap("need at least two knots".into()));
        }
        if knots[0] != (0.0, 0.0) {
            return Err(DspError::InvalidMap(format!(
                "first knot must be (0,0), got {:?}",
                knots[0]
            )));
        }
        for w in knots.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return Err(DspError::InvalidMap(format!(
                    "knots not strictly increasing at {:?}",
                    w[1]
                )));
            }
        }
        if knots.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(DspError::InvalidMap("non-finite knot".into()));
        }
        Ok(Self { knots })
    }

    pub fn identity(duration: f64) -> Result<Self, DspError> {
        Self::new(vec![(0.0, 0.0), (duration, duration)])
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn original_duration(&self) -> f64 {
        self.knots.last().map(|k| k.0).unwrap_or(0.0)
    }

    pub fn augmented_duration(&self) -> f64 {
        self.knots.last().map(|k| k.1).unwrap_or(0.0)
    }

    /// Augmented time of original time `t`.
    pub fn map_time(&self, t: f64) -> Result<f64, DspError> {
        let end = self.original_duration();
        if !(-TIME_EPS..=end + TIME_EPS).contains(&t) {
            return Err(DspError::TimeOutOfRange { t, duration: end });
        }
        let t = t.clamp(0.0, end);
        let i = self
            .knots
            .partition_point(|k| k.0 <= t)
            .clamp(1, self.knots.len() - 1);
        let (t0, a0) = self.knots[i - 1];
        let (t1, a1) = self.knots[i];
        Ok(a0 + (t - t0) * (a1 - a0) / (t1 - t0))
    }

    /// CSV with header `t_orig,t_aug`, six decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_orig,t_aug\n");
        for (a, b) in &self.knots {
            let _ = writeln!(s, "{a:.6},{b:.6}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, DspError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "t_orig,t_aug" => {}
            other => return Err(DspError::InvalidMap(format!("bad header {other:?}"))),
        }
        let knots = lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                let mut parts = l.split(',');
                let parse = |p: Option<&str>| p.and_then(|v| v.trim().parse::<f64>().ok());
                match (parse(parts.next()), parse(parts.next()), parts.next()) {
                    (Some(a), Some(b), None) => Ok((a, b)),
                    _ => Err(DspError::InvalidMap(format!("line {}: `{l}`", i + 2))),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(knots)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub n_segments: usize,
    pub stretch_range: (f64, f64),
    pub pitch_range_semitones: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_segments: 3,
            stretch_range: (0.8, 1.25),
            pitch_range_semitones: (-2.0, 2.0),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        let (lo, hi) = self.stretch_range;
        let (plo, phi) = self.pitch_range_semitones;
        if self.n_segments == 0 {
            return Err(DspError::InvalidArgument(
                "n_segments must be at least 1".into(),
            ));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(DspError::InvalidArgument(format!(
                "bad stretch range ({lo}, {hi})"
            )));
        }
        if plo > phi {
            return Err(DspError::InvalidArgument(format!(
                "bad pitch range ({plo}, {phi})"
            )));
        }
        Ok(())
    }
}

/// Parameters drawn for one augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub rates: Vec<f64>,
    pub semitones: f64,
}

fn draw(rng: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

impl AugmentDraw {
    pub fn sample(config: &AugmentConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, 0xa06);
        let rates = (0..config.n_segments)
            .map(|_| draw(&mut r, config.stretch_range))
            .collect();
        let semitones = draw(&mut r, config.pitch_range_semitones);
        Self { rates, semitones }
    }
}

pub const MIN_SEGMENT_SECONDS: f64 = 0.1;

/// Splits into equal segments, stretches each by its own random rate,
/// concatenates, then applies one global pitch shift.
pub fn augment_utterance(
    audio: &AudioBuffer,
    config: &AugmentConfig,
    seed: u64,
) -> Result<(AudioBuffer, AlignmentMap), DspError> {
    config.validate()?;
    augment_with(audio, &AugmentDraw::sample(config, seed))
}

/// Deterministic augmentation with explicit per-segment rates and shift.
pub fn augment_with(
    audio: &AudioBuffer,
    draw: &AugmentDraw,
) -> Result<(AudioBuffer, AlignmentMap), DspError> {
    let n = draw.rates.len();
    let needed = n as f64 * MIN_SEGMENT_SECONDS;
    if n == 0 || audio.duration() < needed - TIME_EPS {
        return Err(DspError::TooShort {
            seconds: audio.duration(),
            needed,
        });
    }
    let sr = audio.sample_rate() as f64;
    let len = audio.len();
    let mut out = Vec::with_capacity(len * 2);
    let mut knots = vec![(0.0, 0.0)];
    for (i, &rate) in draw.rates.iter().enumerate() {
        let (s, e) = (i * len / n, (i + 1) * len / n);
        let (piece, _) = time_stretch(&audio.slice(s, e), rate)?;
        out.extend_from_slice(piece.samples());
        knots.push((e as f64 / sr, out.len() as f64 / sr));
    }
    let stretched = AudioBuffer::new(out, audio.sample_rate())?;
    let shifted = if draw.semitones == 0.0 {
        stretched
    } else {
        pitch_shift(&stretched, draw.semitones)?
    };
    Ok((shifted, AlignmentMap::new(knots)?))
}
