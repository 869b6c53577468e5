//! Source-filter rendering: a pulse train at the speaker's f0 (plus a
//! little aspiration noise) through a parallel bank of two-pole resonators.

use std::f64::consts::PI;

use rand::RngExt;

use super::{SpeakerParams, SynthError, UnitInventory, UtteranceLabel};
use crate::dsp::AudioBuffer;
use crate::rng;

pub const MIN_UNIT_SECONDS: f64 = 0.05;
pub const MAX_UNIT_SECONDS: f64 = 0.4;
/// Cross-fade length at unit joins.
pub const CROSSFADE_SECONDS: f64 = 0.010;
const WARMUP_SECONDS: f64 = 0.020;
const PEAK: f64 = 0.9;

/// Two-pole resonator scaled to unit gain at its centre frequency.
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, sr: f64) -> Self {
        let c = -(-2.0 * PI * bandwidth / sr).exp();
        let b = 2.0 * (-PI * bandwidth / sr).exp() * (2.0 * PI * freq / sr).cos();
        let w = 2.0 * PI * freq / sr;
        // |1 - b e^{-jw} - c e^{-2jw}|
        let re = 1.0 - b * w.cos() - c * (2.0 * w).cos();
        let im = b * w.sin() + c * (2.0 * w).sin();
        Self {
            a: re.hypot(im),
            b,
            c,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// One-pole low-pass approximating a spectral tilt in dB/octave.
fn tilt_pole(tilt_db_per_octave: f64) -> f64 {
    (-tilt_db_per_octave / 15.0).clamp(0.0, 0.95)
}

/// Renders `units` with per-unit `durations` (seconds) for `speaker`.
pub fn generate_utterance(
    inventory: &UnitInventory,
    units: &[usize],
    durations: &[f64],
    speaker: &SpeakerParams,
    speaker_id: u32,
    sample_rate: u32,
    seed: u64,
) -> Result<(AudioBuffer, UtteranceLabel), SynthError> {
    if units.len() != durations.len() || units.is_empty() {
        return Err(SynthError::InvalidConfig(format!(
            "{} units but {} durations",
            units.len(),
            durations.len()
        )));
    }
    if let Some(&u) = units.iter().find(|&&u| u >= inventory.len()) {
        return Err(SynthError::UnknownUnit(u));
    }
    if let Some(&d) = durations
        .iter()
        .find(|d| !(MIN_UNIT_SECONDS..=MAX_UNIT_SECONDS).contains(*d))
    {
        return Err(SynthError::DurationOutOfRange(d));
    }
    speaker.validate()?;

    let sr = sample_rate as f64;
    let mut bounds = Vec::with_capacity(units.len() + 1);
    let mut acc = 0.0;
    bounds.push(0usize);
    for d in durations {
        acc += d;
        bounds.push((acc * sr).round() as usize);
    }
    let total = *bounds.last().expect("non-empty");

    let mut r = rng::stream(seed, 0x5e7);
    // slow f0 drift: per-utterance offset plus a gentle vibrato-like wobble
    let offset = speaker.f0_jitter * (2.0 * r.random::<f64>() - 1.0);
    let wobble_phase = 2.0 * PI * r.random::<f64>();
    let f0 = |t: f64| -> f64 {
        (speaker.f0_base
            + offset
            + 0.5 * speaker.f0_jitter * (2.0 * PI * 0.7 * t + wobble_phase).sin())
        .clamp(50.0, 400.0)
    };

    let warm = (WARMUP_SECONDS * sr) as usize;
    let half_fade = (0.5 * CROSSFADE_SECONDS * sr) as usize;
    let lead = warm + half_fade;
    // excitation over [-lead, total + half_fade)
    let ext_len = total + lead + half_fade;
    let mut pulses = vec![0.0; ext_len];
    let mut phase = r.random::<f64>();
    for (i, p) in pulses.iter_mut().enumerate() {
        let t = (i as f64 - lead as f64) / sr;
        phase += f0(t.max(0.0)) / sr;
        if phase >= 1.0 {
            phase -= 1.0;
            *p = 1.0;
        }
    }
    // noise power matched to the pulse train's (f0 / sr per sample)
    let noise_scale = (3.0 * speaker.f0_base / sr).sqrt();
    let noise: Vec<f64> = (0..ext_len)
        .map(|_| noise_scale * (2.0 * r.random::<f64>() - 1.0))
        .collect();

    let pole = tilt_pole(speaker.spectral_tilt);
    let mut out = vec![0.0f64; total];
    for (k, &u) in units.iter().enumerate() {
        let template = &inventory.units()[u];
        let (s, e) = (bounds[k], bounds[k + 1]);
        let fade_in = k > 0;
        let fade_out = k + 1 < units.len();
        let lo = if fade_in {
            s.saturating_sub(half_fade)
        } else {
            0
        };
        let hi = if fade_out {
            (e + half_fade).min(total)
        } else {
            total
        };
        let mut chain: Vec<(f64, Resonator)> = template
            .resonances
            .iter()
            .map(|res| {
                (
                    res.amplitude,
                    Resonator::new(res.freq * speaker.resonance_scale, res.bandwidth, sr),
                )
            })
            .collect();
        let fr = template.frication;
        let mut fric = Resonator::new(fr.freq, fr.bandwidth, sr);
        let mut lp = 0.0;
        // warm filters up before the unit becomes audible
        let start = lo + lead - warm;
        for i in start..hi + lead {
            let x = pulses[i] + template.noise_mix * noise[i];
            // parallel bank with alternating signs, as in formant synthesisers
            let mut y = 0.0;
            for (n, (amp, res)) in chain.iter_mut().enumerate() {
                let v = *amp * res.tick(x);
                y += if n % 2 == 0 { v } else { -v };
            }
            lp = (1.0 - pole) * y + pole * lp;
            let hiss = fr.amplitude * fric.tick(noise[i]);
            let t = i as isize - lead as isize;
            if t < lo as isize {
                continue;
            }
            let t = t as usize;
            let w = crossfade_weight(t, s, e, half_fade, fade_in, fade_out);
            out[t] += w * template.gain * (lp + hiss);
        }
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { PEAK / peak } else { 0.0 };
    let samples = out.into_iter().map(|v| (v * scale) as f32).collect();
    let audio = AudioBuffer::new(samples, sample_rate)?;
    let label = UtteranceLabel {
        units: units.to_vec(),
        starts: bounds[..units.len()]
            .iter()
            .map(|&b| b as f64 / sr)
            .collect(),
        speaker: speaker_id,
    };
    Ok((audio, label))
}

/// Linear ramps of width `2·half` centred on each join; adjacent weights
/// sum to one.
fn crossfade_weight(
    t: usize,
    s: usize,
    e: usize,
    half: usize,
    fade_in: bool,
    fade_out: bool,
) -> f64 {
    let width = (2 * half).max(1) as f64;
    let mut w = 1.0;
    if fade_in {
        let x = (t as f64 - (s as f64 - half as f64)) / width;
        w *= x.clamp(0.0, 1.0);
    }
    if fade_out {
        let x = ((e as f64 + half as f64) - t as f64) / width;
        w *= x.clamp(0.0, 1.0);
    }
    w
}
