//! `AVIT1` weight files: magic, `u32` config block, `f32` tensors, CRC32.

use std::fs;
use std::path::Path;

use pollen_core::embed::{VitConfig, VitWeights};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"AVIT1";

/// Upper bound on any config field, to reject garbage before allocating.
const MAX_FIELD: u32 = 1 << 16;

pub fn encode_weights(w: &VitWeights) -> Vec<u8> {
    let c = &w.config;
    let mut out = Vec::with_capacity(64 + 4 * w.tensors().iter().map(|t| t.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    let mut fields = vec![c.image_size, c.patch_size, c.in_chans, c.hidden, c.depth, c.heads, c.mlp_hidden, c.proj_dims.len()];
    fields.extend(&c.proj_dims);
    for f in fields {
        out.extend_from_slice(&(f as u32).to_le_bytes());
    }
    for t in w.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_weights(path: &Path, bytes: &[u8]) -> Result<VitWeights> {
    let bad = |m: String| Error::format(path, m);
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not an AVIT1 weights file".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(bad(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut pos = MAGIC.len();
    let mut next = || -> Result<usize> {
        let b = body.get(pos..pos + 4).ok_or_else(|| bad("truncated config block".into()))?;
        pos += 4;
        let v = u32::from_le_bytes(b.try_into().expect("4 bytes"));
        if v > MAX_FIELD {
            return Err(bad(format!("config field {v} is implausibly large")));
        }
        Ok(v as usize)
    };
    let head = (0..8).map(|_| next()).collect::<Result<Vec<_>>>()?;
    let &[image_size, patch_size, in_chans, hidden, depth, heads, mlp_hidden, n_proj] = head.as_slice() else {
        unreachable!()
    };
    let proj_dims = (0..n_proj).map(|_| next()).collect::<Result<Vec<_>>>()?;
    let config = VitConfig { image_size, patch_size, in_chans, hidden, depth, heads, mlp_hidden, proj_dims };
    let mut w = VitWeights::zeros(config)?;
    let need: usize = w.tensors().iter().map(|t| 4 * t.len()).sum();
    let data = &body[MAGIC.len() + 4 * (8 + n_proj)..];
    if data.len() != need {
        return Err(bad(format!("tensor block is {} bytes, config implies {need}", data.len())));
    }
    let mut values = data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
    for t in w.tensors_mut() {
        t.iter_mut().for_each(|v| *v = values.next().expect("sized"));
    }
    Ok(w)
}

pub fn save_weights(w: &VitWeights, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(w)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<VitWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(path, &bytes)
}
