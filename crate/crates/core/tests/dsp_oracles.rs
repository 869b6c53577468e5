use std::f64::consts::PI;

use proptest::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use sspool_core::dsp::{
    augment_utterance, augment_with, pitch_shift, time_stretch, AudioBuffer, AugmentConfig,
    AugmentDraw, HOP,
};

const SR: f64 = 16_000.0;

fn sine(freq: f64, secs: f64) -> AudioBuffer {
    let n = (secs * SR).round() as usize;
    let s = (0..n)
        .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / SR).sin()) as f32)
        .collect();
    AudioBuffer::new(s, SR as u32).unwrap()
}

/// Dominant frequency: Hann-windowed, 4x zero-padded FFT with parabolic
/// interpolation of the log-magnitude peak.
fn dominant_frequency(a: &AudioBuffer) -> f64 {
    let x = a.samples();
    let n = x.len();
    let size = (4 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = (0..size)
        .map(|i| {
            if i < n {
                let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
                Complex64::new(x[i] as f64 * w, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    FftPlanner::new().plan_fft_forward(size).process(&mut buf);
    let mags: Vec<f64> = buf[..size / 2]
        .iter()
        .map(|c| c.norm().max(1e-30).ln())
        .collect();
    let k = (1..mags.len() - 1)
        .max_by(|&a, &b| mags[a].total_cmp(&mags[b]))
        .unwrap();
    let (l, c, r) = (mags[k - 1], mags[k], mags[k + 1]);
    let offset = 0.5 * (l - r) / (l - 2.0 * c + r);
    (k as f64 + offset) * SR / size as f64
}

#[test]
fn oracle_recovers_a_known_tone() {
    assert!((dominant_frequency(&sine(440.0, 1.0)) - 440.0).abs() < 0.05);
}

#[test]
fn slow_down_doubles_duration_and_keeps_pitch() {
    let a = sine(440.0, 1.0);
    let (b, _) = time_stretch(&a, 0.5).unwrap();
    assert!((b.len() as i64 - 2 * a.len() as i64).abs() <= HOP as i64);
    let f = dominant_frequency(&b);
    assert!((f - 440.0).abs() <= 1.0, "{f}");
}

#[test]
fn octave_shifts() {
    let a = sine(440.0, 1.0);
    let up = dominant_frequency(&pitch_shift(&a, 12.0).unwrap());
    let down = dominant_frequency(&pitch_shift(&a, -12.0).unwrap());
    assert!((up - 880.0).abs() <= 2.0, "{up}");
    assert!((down - 220.0).abs() <= 2.0, "{down}");
}

#[test]
fn segment_durations_add_up() {
    let a = sine(300.0, 3.0);
    let draw = AugmentDraw {
        rates: vec![0.8, 1.0, 1.25],
        semitones: 0.7,
    };
    let (b, map) = augment_with(&a, &draw).unwrap();
    let expected: f64 = 1.0 / 0.8 + 1.0 / 1.0 + 1.0 / 1.25;
    assert!((expected - 3.05).abs() < 1e-12);
    assert!(
        (b.duration() - expected).abs() <= 3.0 * HOP as f64 / SR,
        "{}",
        b.duration()
    );
    assert!((map.augmented_duration() - b.duration()).abs() < 1e-9);
    assert_eq!(map.knots().len(), 4);
}

#[test]
fn maps_are_valid_for_many_seeds() {
    let a = sine(250.0, 0.45);
    let cfg = AugmentConfig::default();
    for seed in 0..1000u64 {
        let draw = AugmentDraw::sample(&cfg, seed);
        assert!(draw.rates.iter().all(|r| (0.8..=1.25).contains(r)));
        assert!((-2.0..=2.0).contains(&draw.semitones));
        let (b, map) = augment_with(
            &a,
            &AugmentDraw {
                semitones: 0.0,
                ..draw
            },
        )
        .unwrap();
        let k = map.knots();
        assert_eq!(k[0], (0.0, 0.0));
        assert!(k.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 > w[0].1));
        assert!((k[3].0 - a.duration()).abs() < 1e-12);
        assert!((k[3].1 - b.duration()).abs() < 1e-12);
    }
}

#[test]
fn full_augmentation_map_matches_output() {
    let a = sine(180.0, 1.2);
    for seed in 0..20 {
        let (b, map) = augment_utterance(&a, &AugmentConfig::default(), seed).unwrap();
        assert!((map.augmented_duration() - b.duration()).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stretch_preserves_tone(rate in 0.25f64..4.0, freq in 200.0f64..1500.0) {
        let a = sine(freq, 1.0);
        let (b, _) = time_stretch(&a, rate).unwrap();
        let f = dominant_frequency(&b);
        prop_assert!((f - freq).abs() <= 1.0, "rate {} freq {} -> {}", rate, freq, f);
    }

    #[test]
    fn pitch_shift_preserves_duration(semis in -12.0f64..12.0, secs in 0.2f64..1.5) {
        let a = sine(330.0, secs);
        let b = pitch_shift(&a, semis).unwrap();
        prop_assert!((b.len() as i64 - a.len() as i64).abs() <= HOP as i64);
    }

    #[test]
    fn mapped_boundaries_stay_inside(seed in 0u64..10_000, cuts in proptest::collection::vec(0.0f64..1.0, 1..8)) {
        let a = sine(200.0, 0.6);
        let (b, map) = augment_utterance(&a, &AugmentConfig::default(), seed).unwrap();
        let mut times: Vec<f64> = cuts.iter().map(|c| c * a.duration()).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mapped: Vec<f64> = times.iter().map(|&t| map.map_time(t).unwrap()).collect();
        prop_assert!(mapped.iter().all(|&t| (0.0..=b.duration() + 1e-9).contains(&t)));
        prop_assert!(mapped.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn map_time_is_strictly_monotonic(seed in 0u64..1000, pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1000)) {
        let draw = AugmentDraw::sample(&AugmentConfig::default(), seed);
        let a = sine(200.0, 0.5);
        let (_, map) = augment_with(&a, &AugmentDraw { semitones: 0.0, ..draw }).unwrap();
        let d = map.original_duration();
        for (x, y) in pairs {
            let (t1, t2) = if x < y { (x * d, y * d) } else { (y * d, x * d) };
            if t1 < t2 {
                prop_assert!(map.map_time(t1).unwrap() < map.map_time(t2).unwrap());
            }
        }
    }
}
