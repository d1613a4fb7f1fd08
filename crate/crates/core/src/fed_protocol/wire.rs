//! Little-endian message encoding. Every message is a 64-byte header
//! followed by named-tensor sections and then key/value sections.
//!
//! Header: magic `FOAP`, u16 version, u16 kind, u32 round, u32 client id,
//! u32 tensor section count, u32 KV section count, u64 body length, zero
//! padding up to 64 bytes.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::segnet::KVTokens;

pub const MAGIC: &[u8; 4] = b"FOAP";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 64;
/// Client id written into messages the server sends.
pub const SERVER_ID: u32 = u32::MAX;
/// Bytes of a KV section before its data: client id, round, tokens, d.
pub const KV_SECTION_PREFIX: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum MessageKind {
    Upload = 1,
    Broadcast = 2,
    Checkpoint = 3,
}

impl MessageKind {
    fn from_u16(v: u16) -> Option<Self> {
        match v {
            1 => Some(MessageKind::Upload),
            2 => Some(MessageKind::Broadcast),
            3 => Some(MessageKind::Checkpoint),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WireError {
    #[error("not a FOAP message")]
    BadMagic,
    #[error("unsupported message version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown message kind {0}")]
    UnknownKind(u16),
    #[error("message truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
}

/// A decoded message. Tensor data comes back at f32 precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: MessageKind,
    pub round: u32,
    pub client_id: u32,
    pub tensors: BTreeMap<String, Tensor>,
    pub kv: Vec<KVTokens>,
}

/// Encoded size of one named-tensor section.
pub fn tensor_section_len(name: &str, shape: &[usize]) -> usize {
    4 + name.len() + 1 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

/// Encoded size of one KV section.
pub fn kv_section_len(n_tokens: usize, dim: usize) -> usize {
    KV_SECTION_PREFIX + 4 * 2 * n_tokens * dim
}

/// Encoded size of a message without encoding it.
pub fn encoded_len(tensors: &BTreeMap<String, Tensor>, kv: &[&KVTokens]) -> usize {
    HEADER_BYTES
        + tensors
            .iter()
            .map(|(n, t)| tensor_section_len(n, t.shape()))
            .sum::<usize>()
        + kv.iter().map(|k| kv_section_len(k.n_tokens(), k.dim())).sum::<usize>()
}

fn put_f32s(out: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(
    kind: MessageKind,
    round: u32,
    client_id: u32,
    tensors: &BTreeMap<String, Tensor>,
    kv: &[&KVTokens],
) -> Vec<u8> {
    let total = encoded_len(tensors, kv);
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u16).to_le_bytes());
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&client_id.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    out.extend_from_slice(&(kv.len() as u32).to_le_bytes());
    out.extend_from_slice(&((total - HEADER_BYTES) as u64).to_le_bytes());
    out.resize(HEADER_BYTES, 0);
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    for k in kv {
        for v in [k.client_id, k.round, k.n_tokens() as u32, k.dim() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_f32s(&mut out, k.keys().data());
        put_f32s(&mut out, k.values().data());
    }
    debug_assert_eq!(out.len(), total);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated(self.pos))?;
        let s = self.bytes.get(self.pos..end).ok_or(WireError::Truncated(self.bytes.len()))?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, WireError> {
        let raw = self.take(n.checked_mul(4).ok_or(WireError::Truncated(self.pos))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, WireError> {
    Tensor::new(shape, data).map_err(|e| WireError::Malformed(e.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(WireError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let raw_kind = r.u16()?;
    let kind = MessageKind::from_u16(raw_kind).ok_or(WireError::UnknownKind(raw_kind))?;
    let round = r.u32()?;
    let client_id = r.u32()?;
    let n_tensors = r.u32()? as usize;
    let n_kv = r.u32()? as usize;
    let body = r.u64()? as usize;
    r.take(HEADER_BYTES - r.pos)?;
    if bytes.len() != HEADER_BYTES + body {
        return Err(WireError::Malformed(format!(
            "header declares {body} body bytes, found {}",
            bytes.len() - HEADER_BYTES
        )));
    }
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| WireError::Malformed(e.to_string()))?;
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let data = r.f32s(shape.iter().product())?;
        if tensors.insert(name.clone(), tensor(shape, data)?).is_some() {
            return Err(WireError::Malformed(format!("duplicate tensor {name}")));
        }
    }
    let mut kv = Vec::with_capacity(n_kv);
    for _ in 0..n_kv {
        let (cid, rnd) = (r.u32()?, r.u32()?);
        let (n, d) = (r.u32()? as usize, r.u32()? as usize);
        let keys = tensor(vec![n, d], r.f32s(n * d)?)?;
        let values = tensor(vec![n, d], r.f32s(n * d)?)?;
        kv.push(KVTokens::new(cid, rnd, keys, values).map_err(|e| WireError::Malformed(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(WireError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Frame {
        kind,
        round,
        client_id,
        tensors,
        kv,
    })
}
