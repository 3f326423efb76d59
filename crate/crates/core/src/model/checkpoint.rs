//! Binary checkpoints: a short text preamble, a JSON header with the tensor
//! directory, then little-endian tensor data.
//!
//! ```text
//! ICARUS-CHECKPOINT
//! version 1
//! header <n>
//! <n bytes of JSON>
//! <payload>
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterSet, BaseWeights, ConventionalAdapters, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

const MAGIC: &str = "ICARUS-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Adapter,
    ConventionalAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub task: String,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub precision: Precision,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterMeta>,
    pub tensors: Vec<TensorEntry>,
}

fn encode<T: Scalar>(
    kind: CheckpointKind,
    config: &ModelConfig,
    adapter: Option<AdapterMeta>,
    tensors: &[(String, &Tensor<T>)],
) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut dir = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let bytes = t.to_le_bytes();
        dir.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            len: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let header = CheckpointHeader {
        kind,
        precision: T::PRECISION,
        config: config.clone(),
        adapter,
        tensors: dir,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = format!("{MAGIC}\nversion {FORMAT_VERSION}\nheader {}\n", json.len()).into_bytes();
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("truncated preamble".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("preamble is not UTF-8".into()))
}

/// Parse the preamble and header; returns the header and the payload.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let mut pos = 0;
    if take_line(bytes, &mut pos)? != MAGIC {
        return Err(Error::Format("missing magic line".into()));
    }
    let version = take_line(bytes, &mut pos)?;
    if version != format!("version {FORMAT_VERSION}") {
        return Err(Error::Format(format!("unsupported {version:?}")));
    }
    let len: usize = take_line(bytes, &mut pos)?
        .strip_prefix("header ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad header length line".into()))?;
    let json = bytes
        .get(pos..pos + len)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| Error::Format(format!("header: {e}")))?;
    Ok((header, &bytes[pos + len..]))
}

struct Directory<'a> {
    entries: HashMap<String, &'a TensorEntry>,
    payload: &'a [u8],
}

impl<'a> Directory<'a> {
    fn take<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        let w = T::PRECISION.bytes();
        let start = e.offset as usize;
        let raw = self
            .payload
            .get(start..start + e.len as usize)
            .ok_or_else(|| Error::Format(format!("tensor {name} runs past the payload")))?;
        if raw.len() != e.shape.iter().product::<usize>() * w {
            return Err(Error::Format(format!("tensor {name} length disagrees with shape")));
        }
        Tensor::new(e.shape.clone(), raw.chunks_exact(w).map(T::read_le).collect())
    }
}

fn open<T: Scalar>(bytes: &[u8], kind: CheckpointKind) -> Result<(CheckpointHeader, &[u8])> {
    let (header, payload) = read_header(bytes)?;
    if header.kind != kind {
        return Err(Error::Format(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            header.kind
        )));
    }
    if header.precision != T::PRECISION {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, requested {}",
            header.precision,
            T::PRECISION
        )));
    }
    Ok((header, payload))
}

fn directory<'a>(header: &'a CheckpointHeader, payload: &'a [u8]) -> Directory<'a> {
    Directory {
        entries: header.tensors.iter().map(|e| (e.name.clone(), e)).collect(),
        payload,
    }
}

pub fn encode_base<T: Scalar>(base: &BaseWeights<T>) -> Vec<u8> {
    encode(CheckpointKind::Base, base.config(), None, &base.named_tensors())
}

pub fn decode_base<T: Scalar>(bytes: &[u8]) -> Result<BaseWeights<T>> {
    let (header, payload) = open::<T>(bytes, CheckpointKind::Base)?;
    let dir = directory(&header, payload);
    BaseWeights::from_named(header.config.clone(), |n| dir.take(n))
}

fn meta<T: Scalar>(a: &AdapterSet<T>) -> AdapterMeta {
    AdapterMeta {
        task: a.task().to_string(),
        rank: a.rank(),
        alpha: a.alpha(),
    }
}

pub fn encode_adapters<T: Scalar>(adapters: &AdapterSet<T>, config: &ModelConfig) -> Vec<u8> {
    encode(
        CheckpointKind::Adapter,
        config,
        Some(meta(adapters)),
        &adapters.named_tensors(),
    )
}

/// Decode an adapter checkpoint and the model config it was saved with.
pub fn decode_adapters<T: Scalar>(bytes: &[u8]) -> Result<(AdapterSet<T>, ModelConfig)> {
    let (header, payload) = open::<T>(bytes, CheckpointKind::Adapter)?;
    let m = header
        .adapter
        .clone()
        .ok_or_else(|| Error::Format("adapter checkpoint without adapter metadata".into()))?;
    let dir = directory(&header, payload);
    let set = AdapterSet::from_named(m.task, m.rank, m.alpha, header.config.num_layers, |n| dir.take(n))?;
    set.check_against(&header.config)?;
    Ok((set, header.config))
}

pub fn encode_conventional<T: Scalar>(adapters: &ConventionalAdapters<T>, config: &ModelConfig) -> Vec<u8> {
    encode(
        CheckpointKind::ConventionalAdapter,
        config,
        Some(meta(adapters.decoder())),
        &adapters.named_tensors(),
    )
}

pub fn decode_conventional<T: Scalar>(bytes: &[u8]) -> Result<(ConventionalAdapters<T>, ModelConfig)> {
    let (header, payload) = open::<T>(bytes, CheckpointKind::ConventionalAdapter)?;
    let m = header
        .adapter
        .clone()
        .ok_or_else(|| Error::Format("adapter checkpoint without adapter metadata".into()))?;
    let dir = directory(&header, payload);
    let set = ConventionalAdapters::from_named(m.task, m.rank, m.alpha, header.config.num_layers, |n| dir.take(n))?;
    Ok((set, header.config))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_round_trip_is_bit_exact() {
        let c = ModelConfig::tiny();
        let base = BaseWeights::<f32>::init(&c, 17).unwrap();
        let bytes = encode_base(&base);
        let back = decode_base::<f32>(&bytes).unwrap();
        assert_eq!(back, base);
        assert_eq!(back.freeze_hash(), base.freeze_hash());
        assert_eq!(encode_base(&back), bytes);
    }

    #[test]
    fn adapter_round_trips() {
        let c = ModelConfig::tiny();
        let a = AdapterSet::<f64>::random(&c, "copy", 3, 6.0, 2, 0.3).unwrap();
        let (back, cfg) = decode_adapters::<f64>(&encode_adapters(&a, &c)).unwrap();
        assert_eq!(back, a);
        assert_eq!(cfg, c);
        let conv = ConventionalAdapters::<f32>::random(&c, "copy", 3, 6.0, 2, 0.3).unwrap();
        let (back, _) = decode_conventional::<f32>(&encode_conventional(&conv, &c)).unwrap();
        assert_eq!(back, conv);
    }

    #[test]
    fn rejects_wrong_kind_precision_and_corruption() {
        let c = ModelConfig::tiny();
        let base = BaseWeights::<f32>::init(&c, 1).unwrap();
        let bytes = encode_base(&base);
        assert!(matches!(decode_base::<f64>(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_adapters::<f32>(&bytes), Err(Error::Format(_))));
        assert!(decode_base::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_base::<f32>(b"nonsense\n").is_err());
        let mut v2 = bytes.clone();
        v2[MAGIC.len() + 9] = b'9';
        assert!(decode_base::<f32>(&v2).is_err());
    }
}
