//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FUSN"  magic
//! u32     format version
//! u32     ablation bitfield
//! u32     base width
//! u32     flags (bit 0: optimizer state present)
//! u64     optimizer step      u64 seed
//! f64     best validation     u32 epochs without improvement
//! u32     record count
//! records: u32 name length, name bytes, u32 rank, u64 extent * rank,
//!          f64 payload
//! u32     CRC32 of everything after the magic
//! ```
//!
//! Optimizer moments are stored as records named `adam.m/<param>` and
//! `adam.v/<param>` after the parameters.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{FusionError, Result};
use crate::model::{AblationConfig, FusionModel, ModelConfig};
use crate::tensor::Tensor;
use crate::training::TrainState;

pub const MAGIC: &[u8; 4] = b"FUSN";
pub const VERSION: u32 = 1;
const FLAG_OPTIMIZER: u32 = 1;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub state: Option<TrainState>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len() as u32);
    for &d in shape {
        put_u64(buf, d as u64);
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model and, optionally, its optimizer state.
pub fn encode(model: &FusionModel, state: Option<&TrainState>) -> Result<Vec<u8>> {
    let params = model.params();
    if let Some(s) = state {
        if !s.matches(params) {
            return Err(FusionError::Checkpoint("optimizer state does not match the model".into()));
        }
    }
    let cfg = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, cfg.ablation.to_bits());
    put_u32(&mut buf, cfg.width as u32);
    put_u32(&mut buf, if state.is_some() { FLAG_OPTIMIZER } else { 0 });
    let (step, seed, best, patience) = state.map_or((0, 0, f64::INFINITY, 0), |s| (s.step, s.seed, s.best_val, s.patience));
    put_u64(&mut buf, step);
    put_u64(&mut buf, seed);
    buf.extend_from_slice(&best.to_le_bytes());
    put_u32(&mut buf, patience);
    let records = params.len() * if state.is_some() { 3 } else { 1 };
    put_u32(&mut buf, records as u32);
    for p in params.iter() {
        put_record(&mut buf, &p.name, p.tensor.shape(), p.tensor.data());
    }
    if let Some(s) = state {
        for (prefix, moments) in [(M_PREFIX, &s.m), (V_PREFIX, &s.v)] {
            for (p, buffer) in params.iter().zip(moments) {
                put_record(&mut buf, &format!("{prefix}{}", p.name), p.tensor.shape(), buffer);
            }
        }
    }
    let crc = crc32fast::hash(&buf[MAGIC.len()..]);
    put_u32(&mut buf, crc);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FusionError::Checkpoint(format!("truncated while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let len = self.u32("record name length")? as usize;
        let name = String::from_utf8(self.take(len, "record name")?.to_vec())
            .map_err(|_| FusionError::Checkpoint("record name is not UTF-8".into()))?;
        let rank = self.u32("record rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("record extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| FusionError::Checkpoint(format!("record `{name}` has an absurd shape {shape:?}")))?;
        let raw = self.take(n * 8, &format!("payload of `{name}`"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, shape, data))
    }
}

/// Parses and verifies a checkpoint image.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FusionError::Checkpoint("missing FUSN magic".into()));
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(FusionError::Checkpoint("truncated before the checksum".into()));
    }
    let body = &bytes[MAGIC.len()..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FusionError::CrcMismatch { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FusionError::Checkpoint(format!("unsupported format version {version} (expected {VERSION})")));
    }
    let ablation = AblationConfig::from_bits(r.u32("ablation bits")?)?;
    let width = r.u32("width")? as usize;
    let config = ModelConfig::new(width, ablation)?;
    let flags = r.u32("flags")?;
    let step = r.u64("step")?;
    let seed = r.u64("seed")?;
    let best_val = r.f64("best validation score")?;
    let patience = r.u32("patience")?;
    let count = r.u32("record count")? as usize;

    let mut params = Vec::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for _ in 0..count {
        let (name, shape, data) = r.record()?;
        if let Some(rest) = name.strip_prefix(M_PREFIX) {
            m.push((rest.to_string(), data));
        } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
            if data.iter().any(|x| *x < 0.0) {
                return Err(FusionError::Checkpoint(format!("negative second moment for `{rest}`")));
            }
            v.push((rest.to_string(), data));
        } else {
            let t = Tensor::new(&shape, data).map_err(|e| FusionError::Checkpoint(format!("parameter `{name}`: {e}")))?;
            params.push((name, t));
        }
    }
    if r.pos != body.len() {
        return Err(FusionError::Checkpoint(format!("{} trailing bytes after the records", body.len() - r.pos)));
    }

    let state = if flags & FLAG_OPTIMIZER != 0 {
        let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        for (kind, list) in [("first", &m), ("second", &v)] {
            let got: Vec<&str> = list.iter().map(|(n, _)| n.as_str()).collect();
            if got != names {
                return Err(FusionError::Checkpoint(format!("{kind} moments do not match the parameter table")));
            }
        }
        Some(TrainState {
            step,
            m: m.into_iter().map(|(_, d)| d).collect(),
            v: v.into_iter().map(|(_, d)| d).collect(),
            best_val,
            patience,
            seed,
        })
    } else {
        if !m.is_empty() || !v.is_empty() {
            return Err(FusionError::Checkpoint("optimizer records present but flag not set".into()));
        }
        None
    };
    Ok(Checkpoint { config, params, state })
}

impl Checkpoint {
    /// Copies the stored parameters into `model`, which must have the same
    /// parameter table (names and shapes, in order).
    pub fn restore_into(&self, model: &mut FusionModel) -> Result<()> {
        let store = model.params();
        if store.len() != self.params.len() {
            return Err(FusionError::Checkpoint(format!(
                "checkpoint has {} parameter tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (p, (name, t)) in store.iter().zip(&self.params) {
            if &p.name != name || p.tensor.shape() != t.shape() {
                return Err(FusionError::Checkpoint(format!(
                    "parameter table mismatch: checkpoint `{name}` {:?} vs model `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        for (p, (_, t)) in model.params_mut().iter_mut().zip(&self.params) {
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Builds a fresh model of the stored architecture with the stored
    /// weights.
    pub fn into_model(self) -> Result<(FusionModel, Option<TrainState>)> {
        let mut model = FusionModel::new(self.config, 0)?;
        self.restore_into(&mut model)?;
        Ok((model, self.state))
    }
}

/// Writes a checkpoint atomically (temporary file, then rename), so an
/// interrupted save never clobbers the previous one.
pub fn save_checkpoint(path: &Path, model: &FusionModel, state: Option<&TrainState>) -> Result<()> {
    let bytes = encode(model, state)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Loads a model and its optimizer state, if one was saved.
pub fn load_checkpoint(path: &Path) -> Result<(FusionModel, Option<TrainState>)> {
    read_checkpoint(path)?.into_model()
}
