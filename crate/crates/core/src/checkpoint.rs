//! Binary parameter container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, the parameter blocks as little-endian `f64` in header order, then
//! a SHA-256 digest of everything before it. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"VOLTCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    blocks: Vec<BlockSpec>,
}

/// A decoded checkpoint: model kind tag, free-form metadata, parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

pub fn encode(kind: &str, meta: &serde_json::Value, params: &ParamStore) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta: meta.clone(),
        blocks: params
            .iter()
            .map(|(name, t)| BlockSpec {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header is plain data");
    let mut out = Vec::with_capacity(20 + json.len() + params.element_count() * 8 + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format("checkpoint truncated"))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
        return Err(Error::format("checkpoint truncated"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut at = MAGIC.len();
    let version = u32::from_le_bytes(take(body, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "checkpoint format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(take(body, &mut at, 8)?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| Error::format("checkpoint truncated"))?;
    let header: Header = serde_json::from_slice(take(body, &mut at, hlen)?)
        .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    if header.format_version != version {
        return Err(Error::format("checkpoint header version disagrees with preamble"));
    }
    let mut params = ParamStore::new();
    for b in &header.blocks {
        let n: usize = b.shape.iter().product();
        let raw = take(body, &mut at, n * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(b.shape.clone(), values).map_err(|e| Error::format(format!("block `{}`: {e}", b.name)))?;
        params.add(b.name.clone(), t);
    }
    if at != body.len() {
        return Err(Error::format("checkpoint has trailing bytes or is truncated"));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::format("checkpoint checksum mismatch"));
    }
    Ok(Checkpoint {
        kind: header.kind,
        meta: header.meta,
        params,
    })
}

pub fn write(path: &Path, kind: &str, meta: &serde_json::Value, params: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(kind, meta, params)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Decodes a checkpoint and checks its kind tag.
pub fn read_kind(path: &Path, kind: &str) -> Result<Checkpoint> {
    let ck = read(path)?;
    if ck.kind != kind {
        return Err(Error::format(format!(
            "{}: expected a `{kind}` checkpoint, found `{}`",
            path.display(),
            ck.kind
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn sample() -> (serde_json::Value, ParamStore) {
        let mut rng = seeded_rng(3);
        let mut p = ParamStore::new();
        p.add_glorot("a", &[3, 4], &mut rng);
        p.add("b", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        (serde_json::json!({"x": 1, "name": "t"}), p)
    }

    #[test]
    fn byte_exact_round_trip() {
        let (meta, p) = sample();
        let bytes = encode("dat", &meta, &p);
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.kind, "dat");
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.params.names(), p.names());
        for (a, b) in ck.params.tensors().zip(p.tensors()) {
            let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(encode(&ck.kind, &ck.meta, &ck.params), bytes);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let (meta, p) = sample();
        let bytes = encode("dat", &meta, &p);
        for n in 0..bytes.len() {
            assert!(matches!(decode(&bytes[..n]), Err(Error::Format(_))), "prefix {n}");
        }
    }

    #[test]
    fn corruption_and_version() {
        let (meta, p) = sample();
        let mut bytes = encode("dat", &meta, &p);
        let last_block_byte = bytes.len() - DIGEST_LEN - 1;
        bytes[last_block_byte] ^= 1;
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");

        let mut bytes = encode("dat", &meta, &p);
        bytes[8] = 9;
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
