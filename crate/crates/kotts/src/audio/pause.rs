//! Energy-threshold pause detection and statistics over mel-spectrograms.
//!
//! A frame is silent when its mean log-mel amplitude falls below the
//! threshold. Maximal silent runs of at least `min_frames` count as pauses,
//! except runs touching the first or last frame, which are utterance-edge
//! silence: reported, but excluded from pause statistics.

use serde::Serialize;
use thiserror::Error;

use super::mel::MelSpectrogram;

/// One detected pause, in frames and seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PauseSegment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub seconds: f64,
}

/// Interior pauses plus the edge silence that was set aside.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PauseReport {
    pub segments: Vec<PauseSegment>,
    /// Maximal silent run touching frame 0 (whole utterance if all silent).
    pub leading_silence_frames: usize,
    /// Maximal silent run touching the final frame, disjoint from the
    /// leading run.
    pub trailing_silence_frames: usize,
    pub threshold: f64,
    pub min_frames: usize,
}

/// Aggregate statistics over interior pauses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PauseStats {
    pub count: usize,
    pub mean_seconds: f64,
    pub total_seconds: f64,
    /// Pauses per second of speech (utterance time minus pause time).
    pub rate_per_second: f64,
}

#[derive(Debug, Error)]
pub enum PauseError {
    #[error("segments must be sorted and non-overlapping: [{a_start},{a_end}) then [{b_start},{b_end})")]
    Overlap { a_start: usize, a_end: usize, b_start: usize, b_end: usize },
    #[error("segment [{start},{end}) exceeds total frame count {total}")]
    OutOfRange { start: usize, end: usize, total: usize },
}

/// Maximal runs of frames at or below the threshold. Inclusive comparison
/// matters: digitally silent audio clamps to exactly the log floor, and the
/// percentile-derived operating threshold can land on that same value.
fn silent_runs(energies: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &e) in energies.iter().enumerate() {
        if e <= threshold {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            runs.push((s, i));
        }
    }
    if let Some(s) = start {
        runs.push((s, energies.len()));
    }
    runs
}

/// Detects interior pauses; edge silence is reported but not listed.
pub fn detect_pauses(m: &MelSpectrogram, threshold: f64, min_frames: usize) -> PauseReport {
    let min_frames = min_frames.max(1);
    let energies = m.frame_energies();
    let total = energies.len();
    let spf = m.config.seconds_per_frame(m.sample_rate);
    let mut leading = 0;
    let mut trailing = 0;
    let mut segments = Vec::new();
    for (start, end) in silent_runs(&energies, threshold) {
        if start == 0 {
            leading = end - start;
            continue;
        }
        if end == total {
            trailing = end - start;
            continue;
        }
        if end - start >= min_frames {
            segments.push(PauseSegment {
                start_frame: start,
                end_frame: end,
                seconds: (end - start) as f64 * spf,
            });
        }
    }
    PauseReport {
        segments,
        leading_silence_frames: leading,
        trailing_silence_frames: trailing,
        threshold,
        min_frames,
    }
}

/// Count of frames in all kept silent runs, edge runs included.
///
/// This is the quantity that is provably monotone under threshold sweeps:
/// lowering the threshold shrinks the silent frame set, so every run kept at
/// the lower threshold sits inside a kept run at the higher one. Interior
/// pause time alone is not monotone, because an interior run can merge into
/// edge silence as the threshold rises and leave the pause list.
pub fn low_energy_frames(m: &MelSpectrogram, threshold: f64, min_frames: usize) -> usize {
    let min_frames = min_frames.max(1);
    silent_runs(&m.frame_energies(), threshold)
        .into_iter()
        .filter(|(s, e)| e - s >= min_frames)
        .map(|(s, e)| e - s)
        .sum()
}

/// Threshold at the given percentile (nearest rank) of frame energies; the
/// detector's default operating point is the 20th percentile.
pub fn energy_percentile(m: &MelSpectrogram, percentile: f64) -> f64 {
    let mut energies = m.frame_energies();
    energies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if energies.is_empty() {
        return f64::NEG_INFINITY;
    }
    let rank = (percentile / 100.0 * (energies.len() - 1) as f64).round() as usize;
    energies[rank.min(energies.len() - 1)]
}

/// Aggregates sorted, disjoint segments into counts, durations, and rate.
pub fn pause_statistics(
    segments: &[PauseSegment],
    total_frames: usize,
    m_config: &super::mel::MelConfig,
    sample_rate: u32,
) -> Result<PauseStats, PauseError> {
    let spf = m_config.seconds_per_frame(sample_rate);
    let mut prev_end = 0;
    for (i, s) in segments.iter().enumerate() {
        if s.end_frame > total_frames {
            return Err(PauseError::OutOfRange {
                start: s.start_frame,
                end: s.end_frame,
                total: total_frames,
            });
        }
        if i > 0 && s.start_frame < prev_end {
            let p = &segments[i - 1];
            return Err(PauseError::Overlap {
                a_start: p.start_frame,
                a_end: p.end_frame,
                b_start: s.start_frame,
                b_end: s.end_frame,
            });
        }
        prev_end = s.end_frame;
    }
    let count = segments.len();
    let total_seconds: f64 = segments.iter().map(|s| s.seconds).sum();
    let mean_seconds = if count == 0 { 0.0 } else { total_seconds / count as f64 };
    let utterance_seconds = total_frames as f64 * spf;
    let speech_seconds = (utterance_seconds - total_seconds).max(1e-9);
    let rate_per_second = if count == 0 { 0.0 } else { count as f64 / speech_seconds };
    Ok(PauseStats { count, mean_seconds, total_seconds, rate_per_second })
}
