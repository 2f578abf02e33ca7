//! Deterministic synthetic corpus for tests and smoke training.
//!
//! Eight short Korean sentences, each with a bracketed constituency parse.
//! The audio is built syllable by syllable from pure tones, and silences are
//! placed where the parses put phrase boundaries: long gaps after NP/VP
//! ends, short gaps at plain word breaks. That gives a corpus whose pause
//! structure genuinely correlates with the markup, is a few seconds long in
//! total, and is reproducible bit for bit from a seed.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{save_wav, WavError, Waveform, CORPUS_SAMPLE_RATE};
use crate::pipeline::BOUNDARY_CATEGORIES;
use crate::syntax::{extract_boundaries, parse_bracketed, SyntaxError};

/// One scripted utterance: surface text plus its bracketed parse.
#[derive(Debug, Clone, Copy)]
pub struct FixtureUtterance {
    pub text: &'static str,
    pub parse: &'static str,
}

/// The fixture script. Every parse detokenizes to exactly its `text`.
pub const FIXTURE_UTTERANCES: [FixtureUtterance; 8] = [
    FixtureUtterance {
        text: "아버지가 방에 들어가신다",
        parse: "(S (NP 아버지가) (VP (NP 방에) (VP 들어가신다)))",
    },
    FixtureUtterance {
        text: "나는 사과를 먹는다",
        parse: "(S (NP 나는) (VP (NP 사과를) (VP 먹는다)))",
    },
    FixtureUtterance { text: "하늘이 맑다", parse: "(S (NP 하늘이) (VP 맑다))" },
    FixtureUtterance {
        text: "아이가 공원에서 논다",
        parse: "(S (NP 아이가) (VP (NP 공원에서) (VP 논다)))",
    },
    FixtureUtterance { text: "바람이 분다", parse: "(S (NP 바람이) (VP 분다))" },
    FixtureUtterance {
        text: "고양이가 우유를 마신다",
        parse: "(S (NP 고양이가) (VP (NP 우유를) (VP 마신다)))",
    },
    FixtureUtterance {
        text: "학생이 책을 읽는다",
        parse: "(S (NP 학생이) (VP (NP 책을) (VP 읽는다)))",
    },
    FixtureUtterance {
        text: "동생이 노래를 부른다",
        parse: "(S (NP 동생이) (VP (NP 노래를) (VP 부른다)))",
    },
];

const SYLLABLE_SECONDS: f64 = 0.10;
const RAMP_SECONDS: f64 = 0.008;
const WORD_GAP_SECONDS: f64 = 0.05;
const BOUNDARY_PAUSE_SECONDS: f64 = 0.15;
const TRAILING_SECONDS: f64 = 0.20;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error("fixture parse: {0}")]
    Syntax(#[from] SyntaxError),
}

/// Where everything landed, with wav paths relative to the corpus root so
/// they can go straight into the metadata file.
#[derive(Debug)]
pub struct FixtureReport {
    pub dir: PathBuf,
    pub wav_files: Vec<PathBuf>,
    pub metadata_path: PathBuf,
    pub parses_path: PathBuf,
    pub total_seconds: f64,
}

/// Synthesizes one utterance's waveform. Public so tests can check pause
/// placement without touching the filesystem.
pub fn fixture_waveform(index: usize, seed: u64) -> Result<Waveform, FixtureError> {
    let u = &FIXTURE_UTTERANCES[index];
    let tree = parse_bracketed(u.parse)?;
    let boundary_offsets: std::collections::BTreeSet<usize> =
        extract_boundaries(&tree, &BOUNDARY_CATEGORIES).positions().collect();

    let sr = CORPUS_SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9));
    let base_hz: f64 = rng.random_range(140.0..180.0);
    let amp: f64 = rng.random_range(0.22..0.30);

    let mut samples = Vec::new();
    let mut syllable = 0usize;
    for (pos, c) in u.text.chars().enumerate() {
        if c == ' ' {
            // A space right after a phrase end carries the long pause; the
            // boundary offset is the index of the space itself.
            let gap = if boundary_offsets.contains(&pos) {
                BOUNDARY_PAUSE_SECONDS
            } else {
                WORD_GAP_SECONDS
            };
            samples.extend(std::iter::repeat_n(0.0, (gap * sr).round() as usize));
        } else {
            let hz = base_hz + 22.0 * ((3 * syllable + 5 * index) % 9) as f64;
            push_tone(&mut samples, hz, SYLLABLE_SECONDS, amp, sr);
            syllable += 1;
        }
    }
    samples.extend(std::iter::repeat_n(0.0, (TRAILING_SECONDS * sr).round() as usize));
    Ok(Waveform { samples, sample_rate: CORPUS_SAMPLE_RATE })
}

fn push_tone(samples: &mut Vec<f64>, hz: f64, seconds: f64, amp: f64, sr: f64) {
    let n = (seconds * sr).round() as usize;
    let ramp = ((RAMP_SECONDS * sr).round() as usize).min(n / 2);
    for i in 0..n {
        let t = i as f64 / sr;
        let env = if i < ramp {
            0.5 * (1.0 - (std::f64::consts::PI * i as f64 / ramp as f64).cos())
        } else if i + ramp >= n {
            0.5 * (1.0 - (std::f64::consts::PI * (n - i) as f64 / ramp as f64).cos())
        } else {
            1.0
        };
        samples.push(amp * env * (2.0 * std::f64::consts::PI * hz * t).sin());
    }
}

/// Writes the whole corpus under `dir`: `wavs/NNNN.wav`, `metadata.txt`
/// (`wav_path|text` lines), and `parses.txt` (one bracketed parse per line,
/// aligned with the metadata).
pub fn write_fixture_corpus(dir: &Path, seed: u64) -> Result<FixtureReport, FixtureError> {
    let wav_dir = dir.join("wavs");
    fs::create_dir_all(&wav_dir)
        .map_err(|e| FixtureError::Io { path: wav_dir.display().to_string(), source: e })?;

    let mut metadata = String::new();
    let mut parses = String::new();
    let mut wav_files = Vec::new();
    let mut total_seconds = 0.0;
    for (i, u) in FIXTURE_UTTERANCES.iter().enumerate() {
        let wave = fixture_waveform(i, seed)?;
        total_seconds += wave.samples.len() as f64 / wave.sample_rate as f64;
        let rel = PathBuf::from("wavs").join(format!("{:04}.wav", i + 1));
        save_wav(&dir.join(&rel), &wave)?;
        metadata.push_str(&format!("{}|{}\n", rel.display(), u.text));
        parses.push_str(u.parse);
        parses.push('\n');
        wav_files.push(rel);
    }

    let metadata_path = dir.join("metadata.txt");
    let parses_path = dir.join("parses.txt");
    for (path, content) in [(&metadata_path, &metadata), (&parses_path, &parses)] {
        fs::write(path, content)
            .map_err(|e| FixtureError::Io { path: path.display().to_string(), source: e })?;
    }
    Ok(FixtureReport { dir: dir.to_path_buf(), wav_files, metadata_path, parses_path, total_seconds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{detect_pauses, energy_percentile, mel_spectrogram, MelConfig};

    #[test]
    fn every_parse_detokenizes_to_its_text() {
        for u in FIXTURE_UTTERANCES {
            let tree = parse_bracketed(u.parse).unwrap();
            assert_eq!(tree.sentence(), u.text);
        }
    }

    #[test]
    fn waveforms_are_seed_deterministic() {
        let a = fixture_waveform(2, 7).unwrap();
        let b = fixture_waveform(2, 7).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = fixture_waveform(2, 8).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn boundary_pauses_outnumber_and_outlast_word_gaps() {
        // 아버지가| 방에| 들어가신다| has boundaries at both spaces, so the
        // detector should see two long interior pauses and no short ones.
        let wave = fixture_waveform(0, 42).unwrap();
        let m = mel_spectrogram(&wave, &MelConfig::default()).unwrap();
        let threshold = energy_percentile(&m, 20.0);
        let report = detect_pauses(&m, threshold, 3);
        assert_eq!(report.segments.len(), 2, "{report:?}");
        for seg in &report.segments {
            let dur = seg.seconds;
            assert!(
                (0.10..=0.22).contains(&dur),
                "boundary pause of {dur:.3}s outside expected range"
            );
        }
    }

    #[test]
    fn corpus_writes_aligned_metadata_and_parses() {
        let dir = tempfile::tempdir().unwrap();
        let report = write_fixture_corpus(dir.path(), 1).unwrap();
        assert_eq!(report.wav_files.len(), 8);
        let metadata = fs::read_to_string(&report.metadata_path).unwrap();
        let parses = fs::read_to_string(&report.parses_path).unwrap();
        assert_eq!(metadata.lines().count(), 8);
        assert_eq!(parses.lines().count(), 8);
        for (line, u) in metadata.lines().zip(FIXTURE_UTTERANCES) {
            let (path, text) = line.split_once('|').unwrap();
            assert!(dir.path().join(path).exists());
            assert_eq!(text, u.text);
        }
        assert!(report.total_seconds > 4.0, "corpus suspiciously short");
    }
}
