//! Waveform and mel-spectrogram handling: WAV I/O, STFT/mel analysis,
//! Griffin-Lim inversion, and pause detection.

pub mod griffin_lim;
pub mod mel;
pub mod melfile;
pub mod pause;
pub mod wav;

pub use griffin_lim::{griffin_lim_invert, InvertError, DEFAULT_ITERATIONS};
pub use mel::{mel_spectrogram, MelConfig, MelError, MelSpectrogram};
pub use melfile::{read_mel_file, write_mel_file, MelFileError, MEL_FILE_VERSION};
pub use pause::{
    detect_pauses, energy_percentile, low_energy_frames, pause_statistics, PauseError,
    PauseReport, PauseSegment, PauseStats,
};
pub use wav::{load_wav, save_wav, Waveform, WavError, CORPUS_SAMPLE_RATE};
