//! Griffin-Lim phase reconstruction from log-mel input.
//!
//! Stands in for a neural vocoder: mel amplitudes are lifted back to a linear
//! magnitude spectrogram through the transposed filterbank (column-sum
//! normalized), then phases are re-estimated by iterating
//! STFT -> magnitude replacement -> iSTFT. Deterministic given the phase
//! seed.

use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use super::mel::{mel_filterbank, padded_window_for, MelConfig, MelSpectrogram};
use super::wav::Waveform;

/// Default iteration count for inversion.
pub const DEFAULT_ITERATIONS: usize = 60;

#[derive(Debug, Error)]
pub enum InvertError {
    #[error("non-finite value in mel input")]
    NonFinite,
    #[error("mel input has no frames")]
    Empty,
}

fn istft(spec: &Array2<Complex<f64>>, cfg: &MelConfig, out_len: usize) -> Vec<f64> {
    let fft_size = cfg.fft_size;
    let window = padded_window_for(cfg);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(fft_size);
    let frames = spec.nrows();
    let padded_len = (frames - 1) * cfg.hop + fft_size;
    let mut acc = vec![0.0; padded_len];
    let mut norm = vec![0.0; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let bins = fft_size / 2 + 1;
    for t in 0..frames {
        for k in 0..bins {
            buf[k] = spec[[t, k]];
        }
        // Hermitian symmetry restores the real signal's negative frequencies.
        for k in bins..fft_size {
            buf[k] = spec[[t, fft_size - k]].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for n in 0..fft_size {
            let v = buf[n].re / fft_size as f64;
            acc[start + n] += v * window[n];
            norm[start + n] += window[n] * window[n];
        }
    }
    let pad = fft_size / 2;
    (0..out_len)
        .map(|i| {
            let j = i + pad;
            if norm[j] > 1e-10 {
                acc[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect()
}

fn stft_complex(samples: &[f64], cfg: &MelConfig, frames: usize) -> Array2<Complex<f64>> {
    let pad = cfg.fft_size / 2;
    let mut padded = vec![0.0; samples.len() + 2 * pad];
    padded[pad..pad + samples.len()].copy_from_slice(samples);
    let needed = (frames - 1) * cfg.hop + cfg.fft_size;
    padded.resize(padded.len().max(needed), 0.0);
    let window = padded_window_for(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let bins = cfg.fft_size / 2 + 1;
    let mut out = Array2::zeros((frames, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..frames {
        let start = t * cfg.hop;
        for n in 0..cfg.fft_size {
            buf[n] = Complex::new(padded[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for (k, cell) in out.row_mut(t).iter_mut().enumerate().take(bins) {
            *cell = buf[k];
        }
    }
    out
}

/// Approximate linear magnitudes from mel amplitudes via the transposed
/// filterbank with column-sum normalization.
fn mel_to_linear(m: &MelSpectrogram) -> Array2<f64> {
    let fb = mel_filterbank(&m.config, m.sample_rate);
    let bins = fb.ncols();
    let col_sums: Vec<f64> = (0..bins).map(|k| fb.column(k).sum()).collect();
    let amps = m.frames.mapv(f64::exp);
    let mut linear = amps.dot(&fb);
    for mut row in linear.rows_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            if col_sums[k] > 1e-10 {
                *v /= col_sums[k];
            } else {
                *v = 0.0;
            }
        }
    }
    linear
}

/// Inverts a log-mel spectrogram to audio with `iterations` Griffin-Lim
/// steps, using `seed` for the initial phases.
pub fn griffin_lim_invert(
    m: &MelSpectrogram,
    iterations: usize,
    seed: u64,
) -> Result<Waveform, InvertError> {
    if m.frames.is_empty() {
        return Err(InvertError::Empty);
    }
    if m.frames.iter().any(|v| !v.is_finite()) {
        return Err(InvertError::NonFinite);
    }
    let cfg = &m.config;
    let target = mel_to_linear(m);
    let frames = target.nrows();
    let out_len = (frames - 1) * cfg.hop + cfg.window - cfg.fft_size / 2;
    let out_len = out_len.max(cfg.hop * frames);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = target.mapv(|mag| {
        let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        Complex::from_polar(mag, phase)
    });
    for _ in 0..iterations {
        let audio = istft(&spec, cfg, out_len);
        let re = stft_complex(&audio, cfg, frames);
        for t in 0..frames {
            for k in 0..re.ncols() {
                let phase = re[[t, k]].arg();
                spec[[t, k]] = Complex::from_polar(target[[t, k]], phase);
            }
        }
    }
    let mut samples = istft(&spec, cfg, out_len);
    let peak = samples.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
    if peak > 1.0 {
        for s in &mut samples {
            *s /= peak;
        }
    }
    Ok(Waveform { samples, sample_rate: m.sample_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::mel::{mel_band_of, mel_spectrogram};
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
    fn inverted_tone_peaks_in_the_right_mel_band() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&tone(440.0, 0.5, 0.5), &cfg).unwrap();
        let audio = griffin_lim_invert(&m, 30, 7).unwrap();

        // FFT oracle over the middle of the reconstruction.
        let n = 8192;
        let mid = audio.samples.len() / 2 - n / 2;
        let mut buf: Vec<Complex<f64>> = audio.samples[mid..mid + n]
            .iter()
            .map(|&s| Complex::new(s, 0.0))
            .collect();
        FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut buf);
        let peak_bin = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().partial_cmp(&buf[b].norm()).unwrap())
            .unwrap();
        let peak_hz = peak_bin as f64 * CORPUS_SAMPLE_RATE as f64 / n as f64;
        let got = mel_band_of(&cfg, CORPUS_SAMPLE_RATE, peak_hz);
        let want = mel_band_of(&cfg, CORPUS_SAMPLE_RATE, 440.0);
        assert!(
            (got as i64 - want as i64).abs() <= 1,
            "peak at {peak_hz:.1} Hz (band {got}), expected near band {want}"
        );
    }

    #[test]
    fn all_floor_mel_inverts_to_near_silence() {
        let cfg = MelConfig::default();
        let frames = Array2::from_elem((60, 80), cfg.log_floor.ln());
        let m = MelSpectrogram { frames, config: cfg, sample_rate: CORPUS_SAMPLE_RATE };
        let audio = griffin_lim_invert(&m, 10, 1).unwrap();
        assert!(audio.rms() < 1e-3, "rms {}", audio.rms());
    }

    #[test]
    fn same_seed_gives_identical_output() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&tone(330.0, 0.3, 0.4), &cfg).unwrap();
        let a = griffin_lim_invert(&m, 15, 42).unwrap();
        let b = griffin_lim_invert(&m, 15, 42).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let cfg = MelConfig::default();
        let mut frames = Array2::from_elem((10, 80), -2.0);
        frames[[3, 5]] = f64::NAN;
        let m = MelSpectrogram { frames, config: cfg, sample_rate: CORPUS_SAMPLE_RATE };
        assert!(matches!(griffin_lim_invert(&m, 5, 0), Err(InvertError::NonFinite)));
    }
}
