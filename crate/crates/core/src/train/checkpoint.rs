use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::fit::{EpochLog, TrainState};
use super::optim::OptimizerState;
use crate::data::{NormalizationStats, PaddingSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegmentationModel};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"SEGFCKPT";
pub const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "optim.velocity/";

type ByName<'a, T> = HashMap<&'a str, &'a Tensor<T>>;

/// Position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best_miou: Option<f64>,
    pub rng: RngState,
    pub normalization: Option<NormalizationStats>,
    pub logs: Vec<EpochLog>,
    #[serde(default)]
    pub padding: Option<PaddingSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord<T> {
    pub header: CheckpointHeader,
    /// Parameters and buffers by name, then `optim.velocity/<name>` entries.
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Element> CheckpointRecord<T> {
    pub fn from_state(state: &TrainState<T>, train: &TrainConfig, normalization: Option<&NormalizationStats>) -> Self {
        let store = state.model.params();
        let mut tensors: Vec<(String, Tensor<T>)> =
            store.iter().map(|(_, p)| (p.name.clone(), (*p.value).clone())).collect();
        tensors.extend(state.optimizer.named(store).map(|(n, v)| (format!("{VELOCITY_PREFIX}{n}"), v.clone())));
        CheckpointRecord {
            header: CheckpointHeader {
                model: state.model.config().clone(),
                train: train.clone(),
                epoch: state.epoch,
                best_miou: state.best_miou,
                rng: RngState::capture(&state.rng),
                normalization: normalization.cloned(),
                logs: state.logs.clone(),
                padding: None,
            },
            tensors,
        }
    }

    pub fn with_padding(mut self, padding: Option<PaddingSpec>) -> Self {
        self.header.padding = padding;
        self
    }

    fn split(&self) -> (ByName<'_, T>, ByName<'_, T>) {
        let mut params = HashMap::new();
        let mut velocities = HashMap::new();
        for (name, t) in &self.tensors {
            match name.strip_prefix(VELOCITY_PREFIX) {
                Some(n) => velocities.insert(n, t),
                None => params.insert(name.as_str(), t),
            };
        }
        (params, velocities)
    }

    /// Copies parameters and buffers into `model`, requiring the same name set and shapes.
    pub fn restore_model(&self, model: &mut SegmentationModel<T>) -> Result<()> {
        let (params, _) = self.split();
        let store = model.params_mut();
        let mut updates = Vec::with_capacity(store.len());
        for (id, p) in store.iter() {
            let t = params
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` is {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            updates.push((id, (*t).clone()));
        }
        let known: HashSet<&str> = store.names().collect();
        if let Some((name, _)) =
            self.tensors.iter().find(|(n, _)| !n.starts_with(VELOCITY_PREFIX) && !known.contains(n.as_str()))
        {
            return Err(Error::Checkpoint(format!("checkpoint parameter `{name}` is not part of the model")));
        }
        for (id, t) in updates {
            store.set_value(id, t)?;
        }
        Ok(())
    }

    /// Model built from the stored config with the stored weights.
    pub fn build_model(&self) -> Result<SegmentationModel<T>> {
        let mut model = SegmentationModel::new(self.header.model.clone())?;
        self.restore_model(&mut model)?;
        Ok(model)
    }

    /// Full training state for resuming.
    pub fn into_state(self) -> Result<TrainState<T>> {
        let model = self.build_model()?;
        let (_, velocities) = self.split();
        let optimizer = OptimizerState::from_named(model.params(), |n| velocities.get(n).map(|t| (*t).clone()))?;
        Ok(TrainState {
            model,
            optimizer,
            epoch: self.header.epoch,
            rng: self.header.rng.restore()?,
            best_miou: self.header.best_miou,
            logs: self.header.logs,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint<T: Element>(record: &CheckpointRecord<T>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&record.header)?;
    let mut out = Vec::with_capacity(header.len() + 64);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, header.len() as u64);
    out.extend_from_slice(&header);
    put_u32(&mut out, record.tensors.len() as u32);
    for (name, t) in &record.tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Writes through a temporary file and renames, so a crash never leaves a partial checkpoint.
pub fn save_checkpoint<T: Element>(record: &CheckpointRecord<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode_checkpoint(record)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: {what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<CheckpointRecord<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a segforge checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let hlen = r.len("header length")?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(nlen, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let tag = r.take(1, "dtype")?[0];
        let dtype =
            DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("`{name}`: unknown dtype tag {tag}")))?;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.len("dimension")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape {shape:?} overflows")))?;
        let raw = r.take(numel.saturating_mul(dtype.size()), &format!("data of `{name}`"))?;
        let data: Vec<T> = match dtype {
            DType::F32 => {
                raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect()
            }
            DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
        };
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the tensor table", bytes.len() - r.pos)));
    }
    Ok(CheckpointRecord { header, tensors })
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<CheckpointRecord<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
