//! Phase vocoder with identity phase locking.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{AlignmentMap, AudioBuffer, DspError};

/// Analysis window length in samples.
pub const WINDOW: usize = 1024;
/// Synthesis hop in samples.
pub const HOP: usize = 256;

pub const MIN_RATE: f64 = 0.25;
pub const MAX_RATE: f64 = 4.0;

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn princarg(p: f64) -> f64 {
    p - 2.0 * PI * ((p + PI) / (2.0 * PI)).floor()
}

struct Plans {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

fn plans() -> Plans {
    let mut p = FftPlanner::new();
    Plans {
        fwd: p.plan_fft_forward(WINDOW),
        inv: p.plan_fft_inverse(WINDOW),
    }
}

/// Stretches `x` to `out_len` samples while keeping its pitch. Analysis
/// frames advance by `HOP * rate` input samples per synthesis hop.
fn stretch_samples(x: &[f64], rate: f64, out_len: usize) -> Vec<f64> {
    let half = WINDOW / 2;
    let bins = WINDOW / 2 + 1;
    let window = hann(WINDOW);
    let Plans { fwd, inv } = plans();
    let read = |i: isize| -> f64 {
        if i < 0 || i as usize >= x.len() {
            0.0
        } else {
            x[i as usize]
        }
    };

    let n_frames = (out_len + half) / HOP + 2;
    let mut out = vec![0.0; (n_frames - 1) * HOP + WINDOW];
    let mut norm = vec![0.0; out.len()];

    let mut prev_phase = vec![0.0; bins];
    let mut synth_phase = vec![0.0; bins];
    let mut prev_start = 0isize;
    let mut buf = vec![Complex64::new(0.0, 0.0); WINDOW];
    let mut mag = vec![0.0; bins];
    let mut phase = vec![0.0; bins];

    for j in 0..n_frames {
        // frame centre sits at input time j*HOP*rate
        let start = (j as f64 * HOP as f64 * rate).round() as isize - half as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(read(start + i as isize) * window[i], 0.0);
        }
        fwd.process(&mut buf);
        for k in 0..bins {
            mag[k] = buf[k].norm();
            phase[k] = buf[k].arg();
        }

        if j == 0 {
            synth_phase.copy_from_slice(&phase);
        } else {
            let ha = (start - prev_start) as f64;
            let advance = |k: usize, prev_synth: f64| -> f64 {
                let omega = 2.0 * PI * k as f64 / WINDOW as f64;
                let delta = princarg(phase[k] - prev_phase[k] - omega * ha);
                prev_synth + HOP as f64 * (omega + delta / ha)
            };
            let peaks: Vec<usize> = (0..bins)
                .filter(|&k| {
                    let m = mag[k];
                    (k < 1 || m > mag[k - 1])
                        && (k < 2 || m > mag[k - 2])
                        && (k + 1 >= bins || m >= mag[k + 1])
                        && (k + 2 >= bins || m >= mag[k + 2])
                })
                .collect();
            if peaks.is_empty() {
                for k in 0..bins {
                    synth_phase[k] = advance(k, synth_phase[k]);
                }
            } else {
                let peak_phase: Vec<f64> =
                    peaks.iter().map(|&p| advance(p, synth_phase[p])).collect();
                // each bin follows the nearest peak (region boundary at the midpoint)
                let mut pi = 0;
                for k in 0..bins {
                    while pi + 1 < peaks.len()
                        && (k as isize - peaks[pi] as isize).abs()
                            > (peaks[pi + 1] as isize - k as isize).abs()
                    {
                        pi += 1;
                    }
                    let p = peaks[pi];
                    synth_phase[k] = peak_phase[pi] + phase[k] - phase[p];
                }
            }
        }
        prev_phase.copy_from_slice(&phase);
        prev_start = start;

        for k in 0..bins {
            buf[k] = Complex64::from_polar(mag[k], synth_phase[k]);
        }
        for k in bins..WINDOW {
            buf[k] = buf[WINDOW - k].conj();
        }
        inv.process(&mut buf);
        let pos = j * HOP;
        for i in 0..WINDOW {
            out[pos + i] += buf[i].re / WINDOW as f64 * window[i];
            norm[pos + i] += window[i] * window[i];
        }
    }

    (0..out_len)
        .map(|t| {
            let i = t + half;
            if norm[i] > 1e-3 {
                out[i] / norm[i]
            } else {
                0.0
            }
        })
        .collect()
}

/// Time-stretches by `rate` (> 1 shortens). Output length is
/// `round(len / rate)`; the returned map is the linear correspondence.
pub fn time_stretch(
    audio: &AudioBuffer,
    rate: f64,
) -> Result<(AudioBuffer, AlignmentMap), DspError> {
    if !(MIN_RATE..=MAX_RATE).contains(&rate) {
        return Err(DspError::RateOutOfRange(rate));
    }
    if audio.is_empty() {
        return Err(DspError::TooShort {
            seconds: 0.0,
            needed: 1.0 / audio.sample_rate() as f64,
        });
    }
    let out_len = ((audio.len() as f64 / rate).round() as usize).max(1);
    let x: Vec<f64> = audio.samples().iter().map(|&s| s as f64).collect();
    let y = stretch_samples(&x, rate, out_len);
    let sr = audio.sample_rate() as f64;
    let map = AlignmentMap::new(vec![
        (0.0, 0.0),
        (audio.len() as f64 / sr, out_len as f64 / sr),
    ])?;
    let out = AudioBuffer::new(
        y.into_iter().map(|v| v as f32).collect(),
        audio.sample_rate(),
    )?;
    Ok((out, map))
}

pub const MAX_SEMITONES: f64 = 12.0;

/// Linear-interpolation resampling to `out_len` samples spanning the same
/// signal (reading at a fixed step).
fn resample(x: &[f32], out_len: usize) -> Vec<f64> {
    let step = x.len() as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            let a = x.get(i0).copied().unwrap_or(0.0) as f64;
            let b = x.get(i0 + 1).copied().unwrap_or(0.0) as f64;
            a + (b - a) * frac
        })
        .collect()
}

/// Shifts pitch by `semitones` keeping duration: resample by
/// `2^(semitones/12)`, then time-stretch back to the original length.
pub fn pitch_shift(audio: &AudioBuffer, semitones: f64) -> Result<AudioBuffer, DspError> {
    if !(-MAX_SEMITONES..=MAX_SEMITONES).contains(&semitones) || !semitones.is_finite() {
        return Err(DspError::SemitonesOutOfRange(semitones));
    }
    if audio.is_empty() {
        return Ok(audio.clone());
    }
    let factor = 2f64.powf(semitones / 12.0);
    let n = audio.len();
    let m = ((n as f64 / factor).round() as usize).max(1);
    let resampled = resample(audio.samples(), m);
    let rate = m as f64 / n as f64;
    let y = stretch_samples(&resampled, rate, n);
    AudioBuffer::new(
        y.into_iter().map(|v| v as f32).collect(),
        audio.sample_rate(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64) -> AudioBuffer {
        let n = (secs * 16_000.0) as usize;
        let s = (0..n)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / 16_000.0).sin()) as f32)
            .collect();
        AudioBuffer::new(s, 16_000).unwrap()
    }

    #[test]
    fn unit_rate_keeps_length_and_map() {
        let a = sine(300.0, 1.0);
        let (b, map) = time_stretch(&a, 1.0).unwrap();
        assert!((b.len() as isize - a.len() as isize).abs() <= HOP as isize);
        assert_eq!(map.map_time(0.7).unwrap(), 0.7);
    }

    #[test]
    fn rate_two_halves_duration() {
        let a = sine(300.0, 2.0);
        let (b, map) = time_stretch(&a, 2.0).unwrap();
        assert!((b.duration() - 1.0).abs() <= HOP as f64 / 16_000.0);
        assert!((map.map_time(1.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rate_bounds() {
        let a = sine(300.0, 0.5);
        assert!(matches!(
            time_stretch(&a, 0.2),
            Err(DspError::RateOutOfRange(_))
        ));
        assert!(matches!(
            time_stretch(&a, 4.5),
            Err(DspError::RateOutOfRange(_))
        ));
        assert!(time_stretch(&a, 0.25).is_ok());
    }

    #[test]
    fn semitone_bounds() {
        let a = sine(300.0, 0.5);
        assert!(matches!(
            pitch_shift(&a, 12.5),
            Err(DspError::SemitonesOutOfRange(_))
        ));
        assert!(matches!(
            pitch_shift(&a, -13.0),
            Err(DspError::SemitonesOutOfRange(_))
        ));
    }

    #[test]
    fn pitch_shift_keeps_duration() {
        let a = sine(300.0, 0.73);
        for s in [-12.0, -3.5, 0.0, 2.0, 7.0, 12.0] {
            let b = pitch_shift(&a, s).unwrap();
            assert!(
                (b.len() as isize - a.len() as isize).abs() <= HOP as isize,
                "{s}"
            );
        }
    }

    #[test]
    fn zero_semitones_is_near_identity() {
        let a = sine(220.0, 1.0);
        let b = pitch_shift(&a, 0.0).unwrap();
        let (x, y) = (a.samples(), b.samples());
        let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
        let nx: f64 = x.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
        assert!(dot / (nx * ny) > 0.99, "{}", dot / (nx * ny));
    }
}
