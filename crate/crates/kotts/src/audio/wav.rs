//! PCM WAV reading/writing at the fixed corpus rate.

use std::path::Path;

use thiserror::Error;

/// All corpus audio is 22050 Hz; anything else is rejected rather than
/// silently resampled.
pub const CORPUS_SAMPLE_RATE: u32 = 22_050;

/// Mono audio in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

#[derive(Debug, Error)]
pub enum WavError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: hound::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: hound::Error },
    #[error("{path}: sample rate {found} Hz, expected {expected} Hz (no resampling)")]
    RateMismatch { path: String, found: u32, expected: u32 },
    #[error("{path}: unsupported sample format ({bits}-bit {format})")]
    UnsupportedFormat { path: String, bits: u16, format: &'static str },
    #[error("{path}: contains no samples")]
    Empty { path: String },
}

/// Loads a PCM WAV file, normalizing samples to [-1, 1] and downmixing
/// multi-channel audio to mono by averaging.
pub fn load_wav(path: &Path) -> Result<Waveform, WavError> {
    let display = path.display().to_string();
    let mut reader = hound::WavReader::open(path)
        .map_err(|source| WavError::Read { path: display.clone(), source })?;
    let spec = reader.spec();
    if spec.sample_rate != CORPUS_SAMPLE_RATE {
        return Err(WavError::RateMismatch {
            path: display,
            found: spec.sample_rate,
            expected: CORPUS_SAMPLE_RATE,
        });
    }
    let raw: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(|source| WavError::Read { path: display.clone(), source })?
        }
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|source| WavError::Read { path: display.clone(), source })?,
        (format, bits) => {
            return Err(WavError::UnsupportedFormat {
                path: display,
                bits,
                format: match format {
                    hound::SampleFormat::Int => "int",
                    hound::SampleFormat::Float => "float",
                },
            })
        }
    };
    if raw.is_empty() {
        return Err(WavError::Empty { path: display });
    }
    let channels = spec.channels as usize;
    let samples = if channels <= 1 {
        raw
    } else {
        raw.chunks(channels).map(|frame| frame.iter().sum::<f64>() / channels as f64).collect()
    };
    Ok(Waveform { samples, sample_rate: spec.sample_rate })
}

/// Writes mono 16-bit PCM, clamping samples to [-1, 1].
pub fn save_wav(path: &Path, w: &Waveform) -> Result<(), WavError> {
    let display = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|source| WavError::Write { path: display.clone(), source })?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer
            .write_sample(v)
            .map_err(|source| WavError::Write { path: display.clone(), source })?;
    }
    writer.finalize().map_err(|source| WavError::Write { path: display, source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_i16(path: &Path, rate: u32, samples: &[i16]) {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn loads_expected_sample_count_for_typical_clip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.wav");
        // 2.38 s at 22050 Hz.
        let n = (2.38 * CORPUS_SAMPLE_RATE as f64) as usize;
        assert_eq!(n, 52_479);
        write_i16(&path, CORPUS_SAMPLE_RATE, &vec![0i16; n]);
        let w = load_wav(&path).unwrap();
        assert_eq!(w.samples.len(), 52_479);
        assert!((w.duration_seconds() - 2.38).abs() < 1e-4);
    }

    #[test]
    fn full_scale_int16_normalizes_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.wav");
        write_i16(&path, CORPUS_SAMPLE_RATE, &[i16::MAX, i16::MIN, 0]);
        let w = load_wav(&path).unwrap();
        assert!((w.samples[0] - 1.0).abs() <= 1.0 / 32768.0);
        assert!((w.samples[1] + 1.0).abs() <= 1.0 / 32768.0);
        assert_eq!(w.samples[2], 0.0);
    }

    #[test]
    fn rejects_wrong_sample_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad_rate.wav");
        write_i16(&path, 16_000, &[0; 100]);
        assert!(matches!(
            load_wav(&path),
            Err(WavError::RateMismatch { found: 16_000, .. })
        ));
    }

    #[test]
    fn rejects_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        write_i16(&path, CORPUS_SAMPLE_RATE, &[]);
        assert!(matches!(load_wav(&path), Err(WavError::Empty { .. })));
    }

    #[test]
    fn stereo_downmixes_by_averaging() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: CORPUS_SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(16384i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let wave = load_wav(&path).unwrap();
        assert_eq!(wave.samples.len(), 10);
        assert!((wave.samples[0] - 0.25).abs() < 1e-4);
    }

    #[test]
    fn save_load_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let samples: Vec<f64> =
            (0..2000).map(|i| (i as f64 * 0.05).sin() * 0.6).collect();
        save_wav(&path, &Waveform { samples: samples.clone(), sample_rate: CORPUS_SAMPLE_RATE })
            .unwrap();
        let back = load_wav(&path).unwrap();
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
