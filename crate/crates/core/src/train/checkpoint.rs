//! Binary checkpoint files. All integers are little-endian.
//!
//! ```text
//! magic     8 bytes   "MFCKPT\0\0" (model) or "MFOPTM\0\0" (optimizer)
//! version   u32
//! digest    u32 length + ASCII hex of the RunConfig digest
//! config    u32 length + UTF-8 canonical RunConfig text
//! epoch     u64       epochs completed
//! step      u64       optimizer steps taken (0 in model files)
//! count     u32       number of records
//! records   count × { u32 key length, key, u32 rank, rank × u64 dims,
//!                     row-major f32 payload }
//! ```
//!
//! Model records are sorted lexicographically by key. Optimizer files hold
//! `m.<key>` and `v.<key>` records in the same order as the model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::model::{MaeModel, RunConfig};
use crate::nn::Parameters;
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::optim::{AdamW, AdamWConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MODEL_MAGIC: &[u8; 8] = b"MFCKPT\0\0";
const OPTIM_MAGIC: &[u8; 8] = b"MFOPTM\0\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub model: MaeModel<f32>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn record(&mut self, key: &str, t: &Tensor<f32>) {
        self.str(key);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let key = self.str()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("record too large".into()))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((key, Tensor::from_vec(&shape, data)?))
    }
}

struct Header {
    config: RunConfig,
    epoch: usize,
    step: u64,
    records: Vec<(String, Tensor<f32>)>,
}

fn encode(
    magic: &[u8; 8],
    config: &RunConfig,
    epoch: usize,
    step: u64,
    records: &[(String, &Tensor<f32>)],
) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(magic);
    w.u32(CHECKPOINT_VERSION);
    w.str(&config.digest());
    w.str(&config.to_text());
    w.u64(epoch as u64);
    w.u64(step);
    w.u32(records.len() as u32);
    for (k, t) in records {
        w.record(k, t);
    }
    w.0
}

fn decode(magic: &[u8; 8], bytes: &[u8], expected_digest: Option<&str>) -> Result<Header> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != magic {
        return Err(Error::Format(
            "not a checkpoint of this kind (bad magic)".into(),
        ));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let digest = r.str()?;
    if let Some(expected) = expected_digest {
        if expected != digest {
            return Err(Error::DigestMismatch {
                expected: expected.to_string(),
                found: digest,
            });
        }
    }
    let config = RunConfig::from_text(&r.str()?)?;
    if config.digest() != digest {
        return Err(Error::DigestMismatch {
            expected: digest,
            found: config.digest(),
        });
    }
    let epoch = r.u64()? as usize;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let records = (0..count).map(|_| r.record()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    Ok(Header {
        config,
        epoch,
        step,
        records,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, model: &MaeModel<f32>, epoch: usize) -> Result<()> {
    let mut named = model.named();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    write_file(path, &encode(MODEL_MAGIC, model.config(), epoch, 0, &named))
}

/// Loads a model checkpoint. With `expected_digest`, a checkpoint written
/// for a different configuration is refused.
pub fn load_checkpoint(path: &Path, expected_digest: Option<&str>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = decode(MODEL_MAGIC, &bytes, expected_digest)?;
    let mut by_key: BTreeMap<String, Tensor<f32>> = h.records.into_iter().collect();
    let mut model = MaeModel::<f32>::new(&h.config)?;
    let mut missing = None;
    model.visit_mut("", &mut |k, t| match by_key.remove(&k) {
        Some(v) if v.shape() == t.shape() => *t = v,
        _ => {
            missing.get_or_insert(k);
        }
    });
    if let Some(k) = missing {
        return Err(Error::Format(format!(
            "checkpoint lacks a matching record for `{k}`"
        )));
    }
    if let Some(k) = by_key.keys().next() {
        return Err(Error::Format(format!(
            "checkpoint has unknown record `{k}`"
        )));
    }
    Ok(Checkpoint {
        config: h.config,
        epoch: h.epoch,
        model,
    })
}

pub fn save_optimizer(
    path: &Path,
    opt: &AdamW<f32>,
    config: &RunConfig,
    epoch: usize,
) -> Result<()> {
    let c = opt.config;
    let hp = Tensor::matrix(1, 4, vec![c.beta1, c.beta2, c.eps, c.weight_decay]);
    let mut records = Vec::with_capacity(2 * opt.keys.len());
    for (i, k) in opt.keys.iter().enumerate() {
        records.push((format!("m.{k}"), &opt.m[i]));
        records.push((format!("v.{k}"), &opt.v[i]));
    }
    let hp_bytes: Vec<u8> = hp
        .data()
        .iter()
        .flat_map(|v: &f64| v.to_le_bytes())
        .collect();
    let mut bytes = encode(OPTIM_MAGIC, config, epoch, opt.step, &records);
    // hyperparameters as f64 so the resumed update is bit-identical
    bytes.extend_from_slice(&hp_bytes);
    write_file(path, &bytes)
}

/// Loads optimizer state saved for `model`'s configuration.
pub fn load_optimizer(path: &Path, model: &MaeModel<f32>) -> Result<(AdamW<f32>, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 32 {
        return Err(Error::Format("optimizer file truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 32);
    let hp: Vec<f64> = tail
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let h = decode(OPTIM_MAGIC, body, Some(&model.config().digest()))?;
    let mut opt = AdamW::new(
        model,
        AdamWConfig {
            beta1: hp[0],
            beta2: hp[1],
            eps: hp[2],
            weight_decay: hp[3],
        },
    );
    opt.step = h.step;
    if h.records.len() != 2 * opt.keys.len() {
        return Err(Error::Format(
            "optimizer record count does not match the model".into(),
        ));
    }
    for (i, pair) in h.records.chunks_exact(2).enumerate() {
        let k = &opt.keys[i];
        let (m, v) = (&pair[0], &pair[1]);
        if m.0 != format!("m.{k}")
            || v.0 != format!("v.{k}")
            || m.1.shape() != opt.m[i].shape()
            || v.1.shape() != opt.v[i].shape()
        {
            return Err(Error::Format(format!(
                "optimizer state for `{k}` missing or misshapen"
            )));
        }
        opt.m[i] = m.1.clone();
        opt.v[i] = v.1.clone();
    }
    Ok((opt, h.epoch))
}
