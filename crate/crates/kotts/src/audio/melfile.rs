//! Portable binary container for mel-spectrograms.
//!
//! Little-endian throughout: magic, format version, a 32-byte pipeline
//! config digest, the mel settings, then row-major f64 frames. The digest
//! lets consumers reject features computed under a different configuration
//! without recomputing anything.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::mel::{MelConfig, MelSpectrogram};

const MAGIC: &[u8; 4] = b"KMEL";
pub const MEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MelFileError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a mel file (bad magic)")]
    BadMagic,
    #[error("unsupported mel file version {0}")]
    Version(u32),
    #[error("file ends before the declared {frames}x{bands} frames")]
    Truncated { frames: usize, bands: usize },
    #[error("declared dimensions {frames}x{bands} overflow")]
    BadDimensions { frames: usize, bands: usize },
}

fn io_err(path: &Path, source: io::Error) -> MelFileError {
    MelFileError::Io { path: path.display().to_string(), source }
}

pub fn write_mel_file(
    path: &Path,
    m: &MelSpectrogram,
    config_hash: &[u8; 32],
) -> Result<(), MelFileError> {
    let mut buf = Vec::with_capacity(128 + m.frames.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&MEL_FILE_VERSION.to_le_bytes());
    buf.extend_from_slice(config_hash);
    buf.extend_from_slice(&m.sample_rate.to_le_bytes());
    for v in [m.config.fft_size, m.config.hop, m.config.window, m.config.mel_bands] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in [m.config.fmin_hz, m.config.fmax_hz, m.config.log_floor] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(m.frames.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.frames.ncols() as u64).to_le_bytes());
    for &v in m.frames.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let (head, rest) = self.bytes.split_at_checked(N)?;
        self.bytes = rest;
        Some(head.try_into().expect("split at N"))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Option<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }
}

/// Reads a mel file back, returning the spectrogram and the config digest
/// it was produced under.
pub fn read_mel_file(path: &Path) -> Result<(MelSpectrogram, [u8; 32]), MelFileError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let mut c = Cursor { bytes: &bytes };
    if c.take::<4>().map(|m| &m == MAGIC) != Some(true) {
        return Err(MelFileError::BadMagic);
    }
    let version = c.u32().ok_or(MelFileError::BadMagic)?;
    if version != MEL_FILE_VERSION {
        return Err(MelFileError::Version(version));
    }
    let eof = || MelFileError::Truncated { frames: 0, bands: 0 };
    let hash = c.take::<32>().ok_or_else(eof)?;
    let sample_rate = c.u32().ok_or_else(eof)?;
    let mut dims = [0u64; 4];
    for d in &mut dims {
        *d = c.u64().ok_or_else(eof)?;
    }
    let mut floats = [0f64; 3];
    for v in &mut floats {
        *v = c.f64().ok_or_else(eof)?;
    }
    let frames = c.u64().ok_or_else(eof)? as usize;
    let bands = c.u64().ok_or_else(eof)? as usize;
    let count = frames
        .checked_mul(bands)
        .and_then(|n| n.checked_mul(8).map(|_| n))
        .ok_or(MelFileError::BadDimensions { frames, bands })?;
    if c.bytes.len() < count * 8 {
        return Err(MelFileError::Truncated { frames, bands });
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(c.f64().expect("length checked above"));
    }
    let config = MelConfig {
        fft_size: dims[0] as usize,
        hop: dims[1] as usize,
        window: dims[2] as usize,
        mel_bands: dims[3] as usize,
        fmin_hz: floats[0],
        fmax_hz: floats[1],
        log_floor: floats[2],
    };
    let frames = Array2::from_shape_vec((frames, bands), data)
        .map_err(|_| MelFileError::BadDimensions { frames, bands })?;
    Ok((MelSpectrogram { frames, config, sample_rate }, hash))
}
