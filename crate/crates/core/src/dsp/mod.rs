//! WAV I/O and content-preserving augmentation (time-stretch and
//! pitch-shift) with explicit alignment maps.

mod audio;
mod augment;
mod vocoder;

pub use audio::{
    load_wav, read_wav, save_wav, wav_bytes, write_wav, AudioBuffer, DEFAULT_SAMPLE_RATE,
};
pub use augment::{
    augment_utterance, augment_with, AlignmentMap, AugmentConfig, AugmentDraw, MIN_SEGMENT_SECONDS,
};
pub use vocoder::{pitch_shift, time_stretch, HOP, MAX_RATE, MAX_SEMITONES, MIN_RATE, WINDOW};

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav error: {0}")]
    Wav(String),
    #[error("expected mono audio, found {0} channels")]
    Channels(u16),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("truncated wav data")]
    Truncated,
    #[error("stretch rate {0} outside [0.25, 4.0]")]
    RateOutOfRange(f64),
    #[error("pitch shift {0} semitones outside [-12, 12]")]
    SemitonesOutOfRange(f64),
    #[error("audio too short: {seconds:.3} s, need at least {needed:.3} s")]
    TooShort { seconds: f64, needed: f64 },
    #[error("time {t} outside [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },
    #[error("invalid alignment map: {0}")]
    InvalidMap(String),
    #[error("{0}")]
    InvalidArgument(String),
}
