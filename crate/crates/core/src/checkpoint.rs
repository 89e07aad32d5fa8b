//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FLRN" | version: u8 = 1 | kind: u8 | entry count: u32
//! per entry: name length: u16 | UTF-8 name | rank: u8 | rank × u32 dims | f32 values
//! CRC-64/XZ of every preceding byte: u64
//! ```
//!
//! Entries whose name starts with `@` carry configuration rather than
//! tensors; integers are split into 16-bit chunks so they survive the
//! trip through `f32` exactly.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::arith::TaskVector;
use crate::error::{Error, Result};
use crate::lora::{LoraAdapterSet, LoraConfig};
use crate::model::{ModelConfig, ParamSet, Projection};
use crate::tensor::{NamedTensors, Tensor};

pub const MAGIC: &[u8; 4] = b"FLRN";
pub const VERSION: u8 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

const MODEL_META: &str = "@config.model";
const LORA_META: &str = "@config.lora";
const SOURCE_PREFIX: &str = "@source:";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Params = 0,
    Delta = 1,
    Adapters = 2,
}

impl Kind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Kind::Params),
            1 => Some(Kind::Delta),
            2 => Some(Kind::Adapters),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Params(ParamSet),
    Delta(TaskVector),
    Adapters(LoraAdapterSet),
}

impl Checkpoint {
    pub fn kind(&self) -> Kind {
        match self {
            Checkpoint::Params(_) => Kind::Params,
            Checkpoint::Delta(_) => Kind::Delta,
            Checkpoint::Adapters(_) => Kind::Adapters,
        }
    }

    pub fn into_params(self) -> Result<ParamSet> {
        match self {
            Checkpoint::Params(p) => Ok(p),
            other => Err(Error::input(format!("expected a parameter checkpoint, got {:?}", other.kind()))),
        }
    }

    pub fn into_delta(self) -> Result<TaskVector> {
        match self {
            Checkpoint::Delta(d) => Ok(d),
            other => Err(Error::input(format!("expected a task-vector checkpoint, got {:?}", other.kind()))),
        }
    }

    pub fn into_adapters(self) -> Result<LoraAdapterSet> {
        match self {
            Checkpoint::Adapters(a) => Ok(a),
            other => Err(Error::input(format!("expected an adapter checkpoint, got {:?}", other.kind()))),
        }
    }
}

impl From<ParamSet> for Checkpoint {
    fn from(p: ParamSet) -> Self {
        Checkpoint::Params(p)
    }
}

impl From<TaskVector> for Checkpoint {
    fn from(d: TaskVector) -> Self {
        Checkpoint::Delta(d)
    }
}

impl From<LoraAdapterSet> for Checkpoint {
    fn from(a: LoraAdapterSet) -> Self {
        Checkpoint::Adapters(a)
    }
}

fn u64_chunks(v: u64) -> [f32; 4] {
    [0, 16, 32, 48].map(|s| ((v >> s) & 0xffff) as f32)
}

fn chunks_u64(c: &[f32]) -> u64 {
    c.iter()
        .enumerate()
        .map(|(i, &x)| (x as u64) << (16 * i))
        .fold(0, |a, b| a | b)
}

fn model_meta(cfg: &ModelConfig) -> Tensor {
    let mut v = Vec::with_capacity(24);
    for n in [cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_seq_len] {
        v.extend(u64_chunks(n as u64));
    }
    v.extend(u64_chunks(cfg.seed));
    Tensor::from_vec(&[7, 4], v).expect("static shape")
}

fn parse_model_meta(t: &Tensor) -> Option<ModelConfig> {
    if t.shape() != [7, 4] {
        return None;
    }
    let f: Vec<u64> = t.data().chunks(4).map(chunks_u64).collect();
    Some(ModelConfig {
        vocab_size: f[0] as usize,
        d_model: f[1] as usize,
        n_layers: f[2] as usize,
        n_heads: f[3] as usize,
        d_ff: f[4] as usize,
        max_seq_len: f[5] as usize,
        seed: f[6],
    })
}

fn lora_meta(cfg: &LoraConfig) -> Tensor {
    let mask: u64 = cfg
        .targets
        .iter()
        .map(|p| 1u64 << Projection::ALL.iter().position(|q| q == p).expect("known"))
        .sum();
    let mut v = Vec::with_capacity(16);
    for x in [cfg.rank as u64, cfg.alpha.to_bits(), mask, cfg.seed] {
        v.extend(u64_chunks(x));
    }
    Tensor::from_vec(&[4, 4], v).expect("static shape")
}

fn parse_lora_meta(t: &Tensor) -> Option<LoraConfig> {
    if t.shape() != [4, 4] {
        return None;
    }
    let f: Vec<u64> = t.data().chunks(4).map(chunks_u64).collect();
    let targets: BTreeSet<Projection> = Projection::ALL
        .iter()
        .enumerate()
        .filter(|(i, _)| f[2] & (1 << i) != 0)
        .map(|(_, &p)| p)
        .collect();
    Some(LoraConfig {
        rank: f[0] as usize,
        alpha: f64::from_bits(f[1]),
        targets,
        seed: f[3],
    })
}

fn push_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::config(format!("tensor name `{name}` is too long")))?;
    let rank = u8::try_from(t.shape().len()).map_err(|_| Error::config("tensor rank above 255"))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::config("dimension above u32::MAX"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    let model_t;
    let lora_t;
    let source_t = Tensor::zeros(&[]);
    let tensors = match ckpt {
        Checkpoint::Params(p) => {
            model_t = model_meta(p.config());
            entries.push((MODEL_META.into(), &model_t));
            p.tensors()
        }
        Checkpoint::Delta(d) => {
            model_t = model_meta(d.config());
            entries.push((MODEL_META.into(), &model_t));
            entries.push((format!("{SOURCE_PREFIX}{}", d.source), &source_t));
            d.tensors()
        }
        Checkpoint::Adapters(a) => {
            model_t = model_meta(&adapter_model_config(a));
            lora_t = lora_meta(a.config());
            entries.push((MODEL_META.into(), &model_t));
            entries.push((LORA_META.into(), &lora_t));
            a.tensors()
        }
    };
    entries.extend(tensors.iter().map(|(n, t)| (n.to_string(), t)));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(ckpt.kind() as u8);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        push_entry(&mut out, name, t)?;
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

// Adapter sets only know their own geometry; the remaining model fields are
// recorded as zero and ignored on load.
fn adapter_model_config(a: &LoraAdapterSet) -> ModelConfig {
    ModelConfig {
        vocab_size: 0,
        d_model: a.d_model(),
        n_layers: a.n_layers(),
        n_heads: 0,
        d_ff: 0,
        max_seq_len: 0,
        seed: 0,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("len 2")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("len 4")))
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

/// Parses and validates a checkpoint from bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic bytes"));
    }
    if bytes.len() < 4 + 1 + 1 + 4 + 8 {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let body_len = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("len 8"));
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 4,
    };
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let kind = Kind::from_byte(r.u8("kind")?).ok_or_else(|| format_err(5, "unknown checkpoint kind"))?;
    let count = r.u32("entry count")?;

    let mut seen = HashSet::new();
    let mut tensors = NamedTensors::new();
    let mut model_cfg = None;
    let mut lora_cfg = None;
    let mut source = String::new();
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| format_err(start + 2, "tensor name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(format_err(start, format!("duplicate entry `{name}`")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format_err(start, "tensor size overflows"))?;
        let raw = r.take(n, "tensor values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("len 4")))
            .collect();
        let t = Tensor::from_vec(&shape, data)?;
        if name == MODEL_META {
            model_cfg = Some(parse_model_meta(&t).ok_or_else(|| format_err(start, "malformed model config"))?);
        } else if name == LORA_META {
            lora_cfg = Some(parse_lora_meta(&t).ok_or_else(|| format_err(start, "malformed LoRA config"))?);
        } else if let Some(s) = name.strip_prefix(SOURCE_PREFIX) {
            source = s.to_string();
        } else {
            tensors.insert(name, t)?;
        }
    }
    if r.pos != body_len {
        return Err(format_err(r.pos, "trailing bytes after the last entry"));
    }
    let computed = CRC64.checksum(&bytes[..body_len]);
    if computed != stored {
        return Err(format_err(body_len, format!("checksum mismatch: stored {stored:016x}, computed {computed:016x}")));
    }
    let model_cfg = model_cfg.ok_or_else(|| format_err(10, "missing model config entry"))?;
    let wrap = |e: Error| format_err(10, format!("invalid contents: {e}"));
    Ok(match kind {
        Kind::Params => Checkpoint::Params(ParamSet::from_tensors(model_cfg, tensors).map_err(wrap)?),
        Kind::Delta => Checkpoint::Delta(TaskVector::from_tensors(model_cfg, tensors, source).map_err(wrap)?),
        Kind::Adapters => {
            let lora = lora_cfg.ok_or_else(|| format_err(10, "missing LoRA config entry"))?;
            Checkpoint::Adapters(LoraAdapterSet::from_tensors(lora, &model_cfg, tensors).map_err(wrap)?)
        }
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&crate::io::read(path)?)
}
