//! Checkpoint save/load: all named parameters, optimizer moments, the
//! configs, the symbol table, and the RNG key, in one versioned binary file.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use thiserror::Error;

use super::config::TrainConfig;
use super::trainer::Trainer;
use crate::audio::MelConfig;
use crate::model::{Model, ModelConfig, ModelError};
use crate::nn::{Adam, ParamSet};
use crate::text::{SymbolTable, TableError};

const MAGIC: &[u8; 4] = b"KCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint file ends mid-record")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint symbol table does not match the one in use")]
    TableMismatch,
    #[error("checkpoint parameter {name} does not exist in the rebuilt model")]
    UnknownParam { name: String },
    #[error("parameter {name}: stored shape {stored:?} != model shape {expected:?}")]
    ShapeMismatch { name: String, stored: Vec<usize>, expected: Vec<usize> },
    #[error("stored moment arrays do not pair one-to-one with parameters")]
    MomentMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Table(#[from] TableError),
}

/// A trainer frozen at one iteration. Everything needed to resume: configs,
/// vocabulary, parameters, optimizer moments, and the (seed, iteration) RNG
/// key.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub iteration: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub mel: MelConfig,
    pub train: TrainConfig,
    /// Symbol table in its text form; one symbol per line, id = line index.
    pub table_text: String,
    pub params: Vec<(String, ArrayD<f64>)>,
    pub adam_step: u64,
    pub adam_m: Vec<ArrayD<f64>>,
    pub adam_v: Vec<ArrayD<f64>>,
}

impl Checkpoint {
    /// Snapshots a live trainer. `mel` rides along so synthesis can rebuild
    /// features identically; `table` pins the vocabulary.
    pub fn capture(trainer: &Trainer, mel: &MelConfig, table: &SymbolTable) -> Checkpoint {
        let params = trainer
            .params
            .iter()
            .map(|(_, name, value)| (name.to_string(), value.clone()))
            .collect();
        Checkpoint {
            iteration: trainer.iteration,
            seed: trainer.cfg.seed,
            model: trainer.model.cfg.clone(),
            mel: mel.clone(),
            train: trainer.cfg.clone(),
            table_text: table.to_text(),
            params,
            adam_step: trainer.opt.step,
            adam_m: trainer.opt.m.clone(),
            adam_v: trainer.opt.v.clone(),
        }
    }

    /// Rebuilds the model and optimizer exactly as captured. The caller's
    /// symbol table must match the stored one; everything else (shapes,
    /// counts) is cross-checked against a freshly constructed model.
    pub fn restore(&self, table: &SymbolTable) -> Result<(Model, ParamSet, Adam), CheckpointError> {
        if table.to_text() != self.table_text {
            return Err(CheckpointError::TableMismatch);
        }
        let (model, mut ps) = Model::new(&self.model, table.len(), self.seed)?;
        if self.params.len() != ps.len() {
            return Err(CheckpointError::Corrupt(format!(
                "stored {} parameters, model has {}",
                self.params.len(),
                ps.len()
            )));
        }
        for (name, stored) in &self.params {
            let id = ps
                .id_of(name)
                .ok_or_else(|| CheckpointError::UnknownParam { name: name.clone() })?;
            if ps.value(id).shape() != stored.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    stored: stored.shape().to_vec(),
                    expected: ps.value(id).shape().to_vec(),
                });
            }
            ps.value_mut(id).assign(stored);
        }
        let mut opt = Adam::new(self.train.adam, &ps);
        if self.adam_m.len() != ps.len() || self.adam_v.len() != ps.len() {
            return Err(CheckpointError::MomentMismatch);
        }
        for (slot, (name, _)) in self.params.iter().enumerate() {
            let id = ps.id_of(name).expect("checked above");
            if self.adam_m[slot].shape() != ps.value(id).shape() {
                return Err(CheckpointError::MomentMismatch);
            }
            opt.m[id] = self.adam_m[slot].clone();
            opt.v[id] = self.adam_v[slot].clone();
        }
        opt.step = self.adam_step;
        Ok((model, ps, opt))
    }

    /// Restores a full trainer positioned at the stored iteration.
    pub fn resume(
        &self,
        items: Vec<super::data::PreparedUtterance>,
        table: &SymbolTable,
    ) -> Result<Trainer, CheckpointError> {
        let (model, ps, opt) = self.restore(table)?;
        let mut trainer = Trainer::new(model, ps, items, self.train.clone())
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        trainer.opt = opt;
        trainer.iteration = self.iteration;
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.iteration.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        write_string(&mut buf, &serde_json::to_string(&self.model).expect("config serializes"));
        write_string(&mut buf, &serde_json::to_string(&self.mel).expect("config serializes"));
        write_string(&mut buf, &serde_json::to_string(&self.train).expect("config serializes"));
        write_string(&mut buf, &self.table_text);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, value) in &self.params {
            write_string(&mut buf, name);
            write_array(&mut buf, value);
        }
        buf.extend_from_slice(&self.adam_step.to_le_bytes());
        for arr in self.adam_m.iter().chain(self.adam_v.iter()) {
            write_array(&mut buf, arr);
        }
        let tmp = path.with_extension("tmp");
        let io_err = |e| CheckpointError::Io { path: path.display().to_string(), source: e };
        fs::File::create(&tmp).and_then(|mut f| f.write_all(&buf)).map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
        let mut r = Reader { bytes: &bytes };
        if r.take(4)? != MAGIC.as_slice() {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let model: ModelConfig = read_json(&mut r)?;
        let mel: MelConfig = read_json(&mut r)?;
        let train: TrainConfig = read_json(&mut r)?;
        let table_text = r.string()?;
        let count = r.u64()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let value = read_array(&mut r)?;
            params.push((name, value));
        }
        let adam_step = r.u64()?;
        let mut adam_m = Vec::with_capacity(count);
        for _ in 0..count {
            adam_m.push(read_array(&mut r)?);
        }
        let mut adam_v = Vec::with_capacity(count);
        for _ in 0..count {
            adam_v.push(read_array(&mut r)?);
        }
        Ok(Checkpoint {
            iteration,
            seed,
            model,
            mel,
            train,
            table_text,
            params,
            adam_step,
            adam_m,
            adam_v,
        })
    }
}

fn write_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn write_array(buf: &mut Vec<u8>, arr: &ArrayD<f64>) {
    buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
    for &d in arr.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in arr.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let (head, rest) = self.bytes.split_at_checked(n).ok_or(CheckpointError::Truncated)?;
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u64()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|e| CheckpointError::Corrupt(format!("non-UTF-8 string: {e}")))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(r: &mut Reader) -> Result<T, CheckpointError> {
    let s = r.string()?;
    serde_json::from_str(&s).map_err(|e| CheckpointError::Corrupt(format!("config json: {e}")))
}

fn read_array(r: &mut Reader) -> Result<ArrayD<f64>, CheckpointError> {
    let ndim = r.u32()? as usize;
    if ndim > 8 {
        return Err(CheckpointError::Corrupt(format!("{ndim}-dimensional tensor")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
    }
    ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
        .map_err(|e| CheckpointError::Corrupt(format!("tensor shape: {e}")))
}

/// `checkpoint-<iteration>.kckp`, zero-padded so lexical order is
/// iteration order.
pub fn checkpoint_file_name(iteration: u64) -> String {
    format!("checkpoint-{iteration:09}.kckp")
}

/// The highest-iteration checkpoint in `dir`, if any. Relies on the
/// zero-padded file names sorting in iteration order.
pub fn latest_checkpoint(dir: &Path) -> Option<std::path::PathBuf> {
    let mut best: Option<(String, std::path::PathBuf)> = None;
    for entry in fs::read_dir(dir).ok()? {
        let path = entry.ok()?.path();
        let name = path.file_name()?.to_string_lossy().into_owned();
        if name.starts_with("checkpoint-")
            && name.ends_with(".kckp")
            && best.as_ref().is_none_or(|(b, _)| *b < name)
        {
            best = Some((name, path));
        }
    }
    best.map(|(_, path)| path)
}
