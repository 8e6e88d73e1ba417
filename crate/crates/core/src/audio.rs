//! PCM buffers and WAV file I/O.

use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("wav error on {path}: {message}")]
    Wav { path: String, message: String },
    #[error("unsupported wav encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

/// Mono PCM samples in [-1, 1] with their sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Pcm {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Pcm {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn silence(seconds: f64, sample_rate: u32) -> Self {
        Self::new(vec![0.0; (seconds * sample_rate as f64).round() as usize], sample_rate)
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()))
    }

    pub fn check_finite(&self) -> Result<(), AudioError> {
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(())
    }

    /// Scale so the peak sits at `target` (linear), only if the current peak
    /// exceeds it. Silent buffers are left untouched.
    pub fn limit_peak(&mut self, target: f32) {
        let peak = self.peak();
        if peak > target && peak > 0.0 {
            let g = target / peak;
            for s in &mut self.samples {
                *s *= g;
            }
        }
    }
}

/// Deterministic sine generator used across tests and the procedural bank.
pub fn sine(freq_hz: f64, seconds: f64, amplitude: f32, sample_rate: u32) -> Pcm {
    let n = (seconds * sample_rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            amplitude * (2.0 * std::f64::consts::PI * freq_hz * t).sin() as f32
        })
        .collect();
    Pcm::new(samples, sample_rate)
}

/// Write mono 16-bit PCM.
pub fn write_wav(pcm: &Pcm, path: &Path) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: pcm.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| AudioError::Wav {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    for &s in &pcm.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer.write_sample(v).map_err(|e| AudioError::Wav {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| AudioError::Wav {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Read a WAV file as mono f32; multi-channel input is averaged down.
pub fn read_wav(path: &Path) -> Result<Pcm, AudioError> {
    let mut reader = hound::WavReader::open(path).map_err(|e| AudioError::Wav {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let wav_err = |e: hound::Error| AudioError::Wav {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / i16::MAX as f32))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Int, 24) | (hound::SampleFormat::Int, 32) => {
            let scale = 1.0 / ((1i64 << (spec.bits_per_sample - 1)) as f32);
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().collect::<Result<_, _>>().map_err(wav_err)?
        }
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!("{fmt:?} {bits}-bit")))
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks(channels)
            .map(|fr| fr.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Ok(Pcm::new(samples, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_roundtrip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let pcm = sine(440.0, 0.1, 0.5, 16000);
        write_wav(&pcm, &path).unwrap();
        let got = read_wav(&path).unwrap();
        assert_eq!(got.sample_rate, 16000);
        assert_eq!(got.samples.len(), pcm.samples.len());
        let max_err = pcm
            .samples
            .iter()
            .zip(&got.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 2.0 / i16::MAX as f32, "max_err={max_err}");
    }

    #[test]
    fn limit_peak_only_reduces() {
        let mut loud = Pcm::new(vec![0.0, 2.0, -3.0], 16000);
        loud.limit_peak(0.9);
        assert!((loud.peak() - 0.9).abs() < 1e-6);
        let mut quiet = Pcm::new(vec![0.1, -0.2], 16000);
        quiet.limit_peak(0.9);
        assert_eq!(quiet.samples, vec![0.1, -0.2]);
    }
}
