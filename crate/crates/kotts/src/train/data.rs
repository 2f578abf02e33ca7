//! Corpus ingestion: metadata parsing, parse-tree sidecars, the train/valid
//! split, and feature preprocessing with an on-disk cache.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{
    load_wav, mel_spectrogram, read_mel_file, write_mel_file, MelConfig, MelError, MelFileError,
    MelSpectrogram, WavError,
};
use crate::pipeline::mark_text;
use crate::syntax::SyntaxError;
use crate::text::{decompose_hangul, SymbolTable, TableError};

/// One corpus entry as read from metadata, before feature extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub wav_path: PathBuf,
    pub text: String,
    /// Single-line bracketed constituency tree, when a sidecar provides one.
    pub parse: Option<String>,
    /// 1-based line number in the metadata file; pairs sidecar lines and
    /// anchors error messages.
    pub line_number: usize,
}

impl UtteranceRecord {
    /// Cache/artifact stem: the wav file name without extension, falling
    /// back to the metadata line number.
    pub fn stem(&self) -> String {
        self.wav_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("line{}", self.line_number))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetadataReport {
    pub loaded: usize,
    /// (line number, reason) for every line that was dropped.
    pub skipped: Vec<(usize, String)>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("no valid records in {path}")]
    NoRecords { path: String },
    #[error("need at least 2 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("utterance {stem}: {source}")]
    Utterance {
        stem: String,
        #[source]
        source: UtteranceError,
    },
}

/// Per-utterance failure, wrapped with the utterance stem by [`DataError`].
#[derive(Debug, Error)]
pub enum UtteranceError {
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Mel(#[from] MelError),
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    MelFile(#[from] MelFileError),
    #[error("cache write: {0}")]
    Cache(io::Error),
    #[error("text reduced to nothing after normalization")]
    EmptyText,
}

fn attach(stem: &str, e: impl Into<UtteranceError>) -> DataError {
    DataError::Utterance { stem: stem.to_string(), source: e.into() }
}

/// Parses a pipe-separated metadata file: `wav_path|transcript` per line,
/// extra columns ignored. Wav paths are resolved relative to the metadata
/// file's directory. Malformed lines are skipped and reported, not fatal;
/// a file with zero valid lines is an error.
pub fn load_metadata(path: &Path) -> Result<(Vec<UtteranceRecord>, MetadataReport), DataError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut records = Vec::new();
    let mut report = MetadataReport::default();
    for (i, line) in raw.lines().enumerate() {
        let line_number = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '|');
        let wav = fields.next().unwrap_or("").trim();
        let Some(text) = fields.next().map(str::trim) else {
            report.skipped.push((line_number, "no | separator".into()));
            continue;
        };
        if wav.is_empty() || text.is_empty() {
            report.skipped.push((line_number, "empty wav path or transcript".into()));
            continue;
        }
        records.push(UtteranceRecord {
            wav_path: base.join(wav),
            text: text.to_string(),
            parse: None,
            line_number,
        });
    }
    for (line, reason) in &report.skipped {
        log::warn!("{}:{line}: skipped ({reason})", path.display());
    }
    if records.is_empty() {
        return Err(DataError::NoRecords { path: path.display().to_string() });
    }
    report.loaded = records.len();
    Ok((records, report))
}

/// Reads a parse sidecar: one bracketed tree per line, aligned with the
/// metadata file by line number; blank lines mean "no parse".
pub fn load_parse_sidecar(path: &Path) -> Result<Vec<Option<String>>, DataError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    Ok(raw
        .lines()
        .map(|l| {
            let l = l.trim_end_matches('\r').trim();
            if l.is_empty() {
                None
            } else {
                Some(l.to_string())
            }
        })
        .collect())
}

/// Pairs sidecar trees with records by metadata line number. Returns how
/// many records ended up without a parse.
pub fn attach_parses(records: &mut [UtteranceRecord], parses: &[Option<String>]) -> usize {
    let mut missing = 0;
    for r in records.iter_mut() {
        r.parse = parses.get(r.line_number - 1).cloned().flatten();
        if r.parse.is_none() {
            missing += 1;
        }
    }
    missing
}

/// Deterministic shuffled split. Membership is drawn by seeded shuffle;
/// each side then keeps corpus order. The validation side gets
/// `round(n * valid_fraction)`, clamped to leave both sides non-empty.
pub fn split_dataset<T>(
    items: Vec<T>,
    valid_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), DataError> {
    let n = items.len();
    if n < 2 {
        return Err(DataError::TooFewRecords(n));
    }
    let n_valid = ((n as f64 * valid_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut in_valid = vec![false; n];
    for &i in order.iter().take(n_valid) {
        in_valid[i] = true;
    }
    let mut train = Vec::with_capacity(n - n_valid);
    let mut valid = Vec::with_capacity(n_valid);
    for (i, item) in items.into_iter().enumerate() {
        if in_valid[i] {
            valid.push(item);
        } else {
            train.push(item);
        }
    }
    Ok((train, valid))
}

/// One utterance ready for the model: marked text, encoded ids, and the
/// target mel.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    pub stem: String,
    /// Normalized transcript with boundary pipes injected (or plain when no
    /// parse was available).
    pub marked_text: String,
    pub ids: Vec<usize>,
    /// (frames, mel_bands) log-amplitude target.
    pub mel: Array2<f64>,
    pub seconds: f64,
    pub had_parse: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PreprocessReport {
    pub utterances: usize,
    pub cache_hits: usize,
    pub stripped_characters: usize,
    pub missing_parses: usize,
    pub mean_clip_seconds: f64,
}

/// Sidecar JSON stored next to each cached mel; holds everything except the
/// frames so a cache hit never touches the source wav.
#[derive(Debug, Serialize, Deserialize)]
pub struct CachedFeatures {
    config_hash: String,
    text: String,
    marked_text: String,
    ids: Vec<usize>,
    seconds: f64,
    had_parse: bool,
    stripped_characters: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn try_cache_hit(
    mel_path: &Path,
    meta_path: &Path,
    record: &UtteranceRecord,
    hash_hex: &str,
) -> Option<(PreparedUtterance, usize)> {
    let meta: CachedFeatures = serde_json::from_str(&fs::read_to_string(meta_path).ok()?).ok()?;
    if meta.config_hash != hash_hex
        || meta.text != record.text
        || meta.had_parse != record.parse.is_some()
    {
        return None;
    }
    let (mel, stored_hash) = read_mel_file(mel_path).ok()?;
    if hex(&stored_hash) != hash_hex {
        return None;
    }
    Some((
        PreparedUtterance {
            stem: record.stem(),
            marked_text: meta.marked_text,
            ids: meta.ids,
            mel: mel.frames,
            seconds: meta.seconds,
            had_parse: meta.had_parse,
        },
        meta.stripped_characters,
    ))
}

/// Runs the full front end over a corpus, reusing cached features keyed by
/// the pipeline config digest. A rerun with an unchanged config recomputes
/// nothing.
pub fn preprocess_corpus(
    records: &[UtteranceRecord],
    table: &SymbolTable,
    mel_cfg: &MelConfig,
    cache_dir: &Path,
    config_hash: &[u8; 32],
) -> Result<(Vec<PreparedUtterance>, PreprocessReport), DataError> {
    fs::create_dir_all(cache_dir)
        .map_err(|e| DataError::Io { path: cache_dir.display().to_string(), source: e })?;
    let hash_hex = hex(config_hash);
    let mut prepared = Vec::with_capacity(records.len());
    let mut report = PreprocessReport::default();
    let mut total_seconds = 0.0;
    for record in records {
        let stem = record.stem();
        let mel_path = cache_dir.join(format!("{stem}.mel"));
        let meta_path = cache_dir.join(format!("{stem}.features.json"));
        if let Some((hit, stripped)) = try_cache_hit(&mel_path, &meta_path, record, &hash_hex) {
            total_seconds += hit.seconds;
            report.cache_hits += 1;
            report.stripped_characters += stripped;
            report.missing_parses += usize::from(!hit.had_parse);
            prepared.push(hit);
            continue;
        }

        let marked = mark_text(&record.text, record.parse.as_deref(), table)
            .map_err(|e| attach(&stem, e))?;
        if marked.marked.is_empty() {
            return Err(attach(&stem, UtteranceError::EmptyText));
        }
        let symbols = decompose_hangul(&marked.marked);
        let ids = table.encode(&symbols).map_err(|e| attach(&stem, e))?;
        let wave = load_wav(&record.wav_path).map_err(|e| attach(&stem, e))?;
        let seconds = wave.duration_seconds();
        let mel = mel_spectrogram(&wave, mel_cfg).map_err(|e| attach(&stem, e))?;
        write_mel_file(&mel_path, &mel, config_hash).map_err(|e| attach(&stem, e))?;
        let cached = CachedFeatures {
            config_hash: hash_hex.clone(),
            text: record.text.clone(),
            marked_text: marked.marked.clone(),
            ids: ids.clone(),
            seconds,
            had_parse: record.parse.is_some(),
            stripped_characters: marked.stripped,
        };
        let json = serde_json::to_string_pretty(&cached).expect("plain data serializes");
        fs::write(&meta_path, json).map_err(|e| attach(&stem, UtteranceError::Cache(e)))?;
        report.stripped_characters += marked.stripped;
        report.missing_parses += usize::from(record.parse.is_none());
        if record.parse.is_none() {
            log::warn!("utterance {stem}: no parse, marking boundaries skipped (degraded mode)");
        }
        total_seconds += seconds;
        prepared.push(PreparedUtterance {
            stem,
            marked_text: marked.marked,
            ids,
            mel: mel.frames,
            seconds,
            had_parse: record.parse.is_some(),
        });
    }
    report.utterances = prepared.len();
    if !prepared.is_empty() {
        report.mean_clip_seconds = total_seconds / prepared.len() as f64;
    }
    Ok((prepared, report))
}

/// Reads previously cached features without touching source audio; fails if
/// any entry is missing or was built under a different config.
pub fn load_cached_corpus(
    records: &[UtteranceRecord],
    cache_dir: &Path,
    config_hash: &[u8; 32],
) -> Result<Vec<PreparedUtterance>, DataError> {
    let hash_hex = hex(config_hash);
    let mut prepared = Vec::with_capacity(records.len());
    for record in records {
        let stem = record.stem();
        let mel_path = cache_dir.join(format!("{stem}.mel"));
        let meta_path = cache_dir.join(format!("{stem}.features.json"));
        match try_cache_hit(&mel_path, &meta_path, record, &hash_hex) {
            Some((hit, _)) => prepared.push(hit),
            None => {
                return Err(DataError::Utterance {
                    stem,
                    source: UtteranceError::Cache(io::Error::new(
                        io::ErrorKind::NotFound,
                        "cache entry missing or built under a different config",
                    )),
                })
            }
        }
    }
    Ok(prepared)
}

/// Rebuilds a [`MelSpectrogram`] view over prepared frames, for pause
/// analysis of cached or synthesized features.
pub fn as_spectrogram(mel: Array2<f64>, cfg: &MelConfig, sample_rate: u32) -> MelSpectrogram {
    MelSpectrogram { frames: mel, config: cfg.clone(), sample_rate }
}
