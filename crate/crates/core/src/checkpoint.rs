//! Binary checkpoints: model parameters plus optional optimizer moments.
//!
//! Layout: magic, `u32` version, `u64` header length, JSON header, raw
//! little-endian `f32` tensors, then a SHA-256 digest of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState, ParamLayout};
use crate::optim::OptimState;

pub const MAGIC: &[u8; 8] = b"CPMPCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    n_params: usize,
    optimizer: Option<OptimState>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub optimizer: Option<OptimState>,
}

fn push_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    buf.reserve(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(state: &ModelState, opt: Option<&OptimState>) -> Result<Vec<u8>> {
    let header = Header {
        config: state.config.clone(),
        step: state.step,
        n_params: state.params.len(),
        optimizer: opt.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(24 + json.len() + state.params.len() * 12 + DIGEST_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    push_f32s(&mut buf, &state.params);
    if let Some(o) = opt {
        if o.m.len() != state.params.len() || o.v.len() != state.params.len() {
            return Err(Error::State("optimizer moments do not match the parameter count".into()));
        }
        push_f32s(&mut buf, &o.m);
        push_f32s(&mut buf, &o.v);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Load("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Load("tensor size overflows".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
        return Err(Error::Load("checkpoint is truncated".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Load("not a checkpoint file (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Load(format!("checkpoint version {version}, expected {VERSION}")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Load("checksum mismatch (truncated or corrupt file)".into()));
    }
    let header_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::Load("header length overflows".into()))?;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Load(format!("bad header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| Error::Load(format!("bad model config: {e}")))?;
    let expected = ParamLayout::new(&header.config).total();
    if header.n_params != expected {
        return Err(Error::Load(format!(
            "header declares {} parameters, config implies {expected}",
            header.n_params
        )));
    }
    let params = r.f32s(header.n_params)?;
    let optimizer = match header.optimizer {
        Some(mut o) => {
            o.m = r.f32s(header.n_params)?;
            o.v = r.f32s(header.n_params)?;
            Some(o)
        }
        None => None,
    };
    if r.pos != body.len() {
        return Err(Error::Load(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint {
        state: ModelState {
            config: header.config,
            params,
            step: header.step,
        },
        optimizer,
    })
}

pub fn save_checkpoint(state: &ModelState, opt: Option<&OptimState>, path: &Path) -> Result<()> {
    let bytes = encode(state, opt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Load(msg) => Error::Load(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Hex SHA-256 of a file, used for lineage records.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 260,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            max_seq_len: 16,
            reward_head: true,
        }
    }

    fn fixture() -> (ModelState, OptimState) {
        let mut state = ModelState::init(tiny(), 3).unwrap();
        state.step = 17;
        state.params[5] = f32::MIN_POSITIVE / 2.0;
        let mut opt = OptimState::for_model(&state, 0.1);
        opt.step = 17;
        opt.m.iter_mut().enumerate().for_each(|(i, m)| *m = i as f32 * 1e-3);
        opt.v.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32).sqrt());
        (state, opt)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (state, opt) = fixture();
        let back = decode(&encode(&state, Some(&opt)).unwrap()).unwrap();
        assert_eq!(back.state.step, 17);
        let bits = |xs: &[f32]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.state.params), bits(&state.params));
        let o = back.optimizer.unwrap();
        assert_eq!(bits(&o.m), bits(&opt.m));
        assert_eq!(bits(&o.v), bits(&opt.v));
        assert_eq!(o.step, 17);
        let plain = decode(&encode(&state, None).unwrap()).unwrap();
        assert!(plain.optimizer.is_none());
    }

    #[test]
    fn damaged_files_are_load_errors() {
        let (state, opt) = fixture();
        let bytes = encode(&state, Some(&opt)).unwrap();
        for cut in [0, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Load(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Load(_))));
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(matches!(decode(&bad_version), Err(Error::Load(msg)) if msg.contains("version")));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (state, _) = fixture();
        save_checkpoint(&state, None, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().state, state);
        assert_eq!(file_digest(&path).unwrap().len(), 64);
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
