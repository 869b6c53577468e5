use std::io::{Cursor, Read, Seek, Write};
use std::path::Path;

use super::DspError;
use crate::fsutil;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, DspError> {
        if sample_rate == 0 {
            return Err(DspError::InvalidArgument(
                "sample rate must be positive".into(),
            ));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(DspError::InvalidArgument(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Sub-range `[start, end)` in samples.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

fn map_hound(e: hound::Error) -> DspError {
    match e {
        // hound reports short reads as `Other` with this message
        hound::Error::IoError(io)
            if io.kind() == std::io::ErrorKind::UnexpectedEof
                || io.to_string().contains("read enough bytes") =>
        {
            DspError::Truncated
        }
        hound::Error::IoError(io) => DspError::Io(io),
        hound::Error::Unsupported | hound::Error::InvalidSampleFormat | hound::Error::TooWide => {
            DspError::UnsupportedEncoding(e.to_string())
        }
        other => DspError::Wav(other.to_string()),
    }
}

/// Decodes 16-bit PCM mono WAV.
pub fn read_wav<R: Read>(reader: R) -> Result<AudioBuffer, DspError> {
    let mut r = hound::WavReader::new(reader).map_err(map_hound)?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(DspError::Channels(spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(DspError::UnsupportedEncoding(format!(
            "{:?} {}-bit (expected 16-bit integer PCM)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let expected = r.len() as usize;
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0).map_err(map_hound))
        .collect::<Result<Vec<_>, _>>()?;
    if samples.len() != expected {
        return Err(DspError::Truncated);
    }
    AudioBuffer::new(samples, spec.sample_rate)
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, DspError> {
    let f = std::fs::File::open(path.as_ref())?;
    read_wav(std::io::BufReader::new(f))
}

/// Encodes as 16-bit PCM mono. Samples are clipped to `[-1, 1]`.
pub fn write_wav<W: Write + Seek>(audio: &AudioBuffer, writer: W) -> Result<(), DspError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::new(writer, spec).map_err(map_hound)?;
    for &s in &audio.samples {
        w.write_sample(quantize(s)).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)
}

fn quantize(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * 32768.0)
        .round()
        .clamp(-32768.0, 32767.0) as i16
}

pub fn wav_bytes(audio: &AudioBuffer) -> Result<Vec<u8>, DspError> {
    let mut cur = Cursor::new(Vec::new());
    write_wav(audio, &mut cur)?;
    Ok(cur.into_inner())
}

/// Writes a WAV file atomically.
pub fn save_wav(audio: &AudioBuffer, path: impl AsRef<Path>) -> Result<(), DspError> {
    let bytes = wav_bytes(audio)?;
    fsutil::write_atomic(path.as_ref(), &bytes)?;
    Ok(())
}
