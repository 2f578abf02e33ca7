//! Magnitude STFT and log-mel analysis.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wav::Waveform;

/// Analysis geometry. All fields are overridable through the config file;
/// the band count is pinned to 80 so every artifact in a run shares one mel
/// axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: usize,
    pub mel_bands: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            fft_size: 1024,
            hop: 256,
            window: 1024,
            mel_bands: 80,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<(), MelError> {
        if !(self.hop <= self.window && self.window <= self.fft_size) {
            return Err(MelError::BadConfig(format!(
                "need hop <= window <= fft size, got hop {}, window {}, fft {}",
                self.hop, self.window, self.fft_size
            )));
        }
        if self.mel_bands != 80 {
            return Err(MelError::BadConfig(format!(
                "mel band count is fixed at 80, got {}",
                self.mel_bands
            )));
        }
        if self.log_floor <= 0.0 || !(self.fmin_hz >= 0.0 && self.fmax_hz > self.fmin_hz) {
            return Err(MelError::BadConfig("log floor must be positive and fmin < fmax".into()));
        }
        Ok(())
    }

    /// Frame duration contributed by one hop, in seconds.
    pub fn seconds_per_frame(&self, sample_rate: u32) -> f64 {
        self.hop as f64 / sample_rate as f64
    }
}

/// T x 80 matrix of natural-log mel amplitudes, clamped below at
/// ln(log_floor).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub config: MelConfig,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// Mean log-mel amplitude per frame, the energy measure the pause
    /// detector thresholds.
    pub fn frame_energies(&self) -> Vec<f64> {
        self.frames
            .rows()
            .into_iter()
            .map(|r| r.sum() / r.len() as f64)
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum MelError {
    #[error("invalid mel config: {0}")]
    BadConfig(String),
    #[error("waveform of {len} samples is shorter than one window ({window})")]
    TooShort { len: usize, window: usize },
    #[error("non-finite value in mel input")]
    NonFinite,
}

fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| {
            let x = std::f64::consts::PI * n as f64 / len as f64;
            x.sin() * x.sin()
        })
        .collect()
}

/// Window of `cfg.window` samples centered in an fft-size frame.
pub(crate) fn padded_window_for(cfg: &MelConfig) -> Vec<f64> {
    let w = hann(cfg.window);
    let mut out = vec![0.0; cfg.fft_size];
    let offset = (cfg.fft_size - cfg.window) / 2;
    out[offset..offset + cfg.window].copy_from_slice(&w);
    out
}

/// Magnitude STFT with half-fft zero padding at both ends, so
/// T = 1 + (padded - fft) / hop.
pub fn stft_magnitudes(samples: &[f64], cfg: &MelConfig) -> Result<Array2<f64>, MelError> {
    if samples.len() < cfg.window {
        return Err(MelError::TooShort { len: samples.len(), window: cfg.window });
    }
    let pad = cfg.fft_size / 2;
    let mut padded = vec![0.0; samples.len() + 2 * pad];
    padded[pad..pad + samples.len()].copy_from_slice(samples);
    let frames = 1 + (padded.len() - cfg.fft_size) / cfg.hop;
    let bins = cfg.fft_size / 2 + 1;
    let window = padded_window_for(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut out = Array2::zeros((frames, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..frames {
        let start = t * cfg.hop;
        for n in 0..cfg.fft_size {
            buf[n] = Complex::new(padded[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for (k, row) in out.row_mut(t).iter_mut().enumerate().take(bins) {
            *row = buf[k].norm();
        }
    }
    Ok(out)
}

/// HTK-scale mel value of a frequency in Hz.
fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `mel_bands` x (fft/2 + 1), peak weight 1.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> Array2<f64> {
    let bins = cfg.fft_size / 2 + 1;
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz.min(sample_rate as f64 / 2.0));
    let points: Vec<f64> = (0..cfg.mel_bands + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bands + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
    let mut fb = Array2::zeros((cfg.mel_bands, bins));
    for m in 0..cfg.mel_bands {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f <= center {
                (f - left) / (center - left)
            } else {
                (right - f) / (right - center)
            };
            if w > 0.0 {
                fb[[m, k]] = w;
            }
        }
    }
    fb
}

/// Center frequency of the mel band a given frequency falls into.
pub fn mel_band_of(cfg: &MelConfig, sample_rate: u32, hz: f64) -> usize {
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz.min(sample_rate as f64 / 2.0));
    let step = (hi - lo) / (cfg.mel_bands + 1) as f64;
    let m = (hz_to_mel(hz) - lo) / step - 1.0;
    m.round().clamp(0.0, (cfg.mel_bands - 1) as f64) as usize
}

/// Magnitude STFT, mel filterbank, then natural log clamped at the floor.
/// Deterministic for equal inputs.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram, MelError> {
    cfg.validate()?;
    let mags = stft_magnitudes(&w.samples, cfg)?;
    let fb = mel_filterbank(cfg, w.sample_rate);
    let mel_amp = mags.dot(&fb.t());
    let frames = mel_amp.mapv(|a| a.max(cfg.log_floor).ln());
    Ok(MelSpectrogram { frames, config: cfg.clone(), sample_rate: w.sample_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::wav::CORPUS_SAMPLE_RATE;

    fn tone(freq: f64, seconds: f64, amp: f64) -> Waveform {
        let n = (seconds * CORPUS_SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| {
                amp * (2.0 * std::f64::consts::PI * freq * i as f64
                    / CORPUS_SAMPLE_RATE as f64)
                    .sin()
            })
            .collect();
        Waveform { samples, sample_rate: CORPUS_SAMPLE_RATE }
    }

    #[test]
    fn one_second_is_about_87_frames() {
        let m = mel_spectrogram(&tone(440.0, 1.0, 0.5), &MelConfig::default()).unwrap();
        let frames = m.num_frames() as i64;
        assert!((frames - 86).abs() <= 1, "got {frames}");
        assert_eq!(m.frames.ncols(), 80);
    }

    #[test]
    fn digital_silence_clamps_to_floor() {
        let w = Waveform { samples: vec![0.0; 22050], sample_rate: CORPUS_SAMPLE_RATE };
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&w, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(m.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn doubling_amplitude_adds_log_two() {
        let cfg = MelConfig::default();
        let quiet = mel_spectrogram(&tone(440.0, 0.5, 0.2), &cfg).unwrap();
        let loud = mel_spectrogram(&tone(440.0, 0.5, 0.4), &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        let mut checked = 0;
        for (a, b) in quiet.frames.iter().zip(loud.frames.iter()) {
            // Only entries comfortably above the clamp obey log-linearity.
            if *a > floor + 1.0 {
                assert!((b - a - std::f64::consts::LN_2).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 100, "tone should light up many entries, saw {checked}");
    }

    #[test]
    fn too_short_input_is_an_error() {
        let w = Waveform { samples: vec![0.0; 100], sample_rate: CORPUS_SAMPLE_RATE };
        assert!(matches!(
            mel_spectrogram(&w, &MelConfig::default()),
            Err(MelError::TooShort { .. })
        ));
    }

    #[test]
    fn analysis_is_deterministic() {
        let w = tone(523.0, 0.3, 0.7);
        let cfg = MelConfig::default();
        let a = mel_spectrogram(&w, &cfg).unwrap();
        let b = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn all_entries_respect_the_floor() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&tone(220.0, 0.4, 0.1), &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(m.frames.iter().all(|&v| v >= floor));
    }

    #[test]
    fn tone_energy_lands_in_its_mel_band() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&tone(440.0, 0.5, 0.5), &cfg).unwrap();
        let mid = m.frames.row(m.num_frames() / 2);
        let peak_band = mid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let expect = mel_band_of(&cfg, CORPUS_SAMPLE_RATE, 440.0);
        assert!(
            (peak_band as i64 - expect as i64).abs() <= 1,
            "peak band {peak_band} vs expected {expect}"
        );
    }

    #[test]
    fn band_count_other_than_80_is_rejected() {
        let cfg = MelConfig { mel_bands: 64, ..MelConfig::default() };
        assert!(matches!(cfg.validate(), Err(MelError::BadConfig(_))));
    }
}
