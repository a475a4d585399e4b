//! Parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "E2EMILCK"
//! version  u32      1
//! bn_mode  u8       0 = local, 1 = synced
//! count    u32      number of tensors
//! count × {
//!   name_len u32, name UTF-8 bytes,
//!   rank u8, dims u64 × rank,
//!   values f64 × Π dims, row-major
//! }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{BnMode, ModelParams, NnError};
use crate::autodiff::Tensor;

const MAGIC: &[u8; 8] = b"E2EMILCK";
const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match params.encoder.bn_mode {
        BnMode::Local => 0,
        BnMode::Synced => 1,
    });
    let named = params.named_tensors();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams, NnError> {
    let mut r = bytes;
    let err = |m: &str| NnError::Checkpoint(m.to_string());
    let mut take = |n: usize| -> Result<&[u8], NnError> {
        if r.len() < n {
            return Err(err("truncated checkpoint"));
        }
        let (head, tail) = r.split_at(n);
        r = tail;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(err("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4"));
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let bn_mode = match take(1)?[0] {
        0 => BnMode::Local,
        1 => BnMode::Synced,
        x => return Err(NnError::Checkpoint(format!("bad batch-norm mode {x}"))),
    };
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| err("tensor name is not UTF-8"))?
            .to_string();
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8")) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n.checked_mul(8).ok_or_else(|| err("tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        named.push((name, t));
    }
    drop(take);
    if !r.is_empty() {
        return Err(err("trailing bytes in checkpoint"));
    }
    ModelParams::from_named(named, bn_mode)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), NnError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ModelDims};

    #[test]
    fn roundtrip_is_bitwise() {
        let dims = ModelDims::new(6, vec![8, 5], 4)
            .with_attn(3)
            .with_batch_norm(Some(BnMode::Synced));
        let p = init_params(11, &dims).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        assert_eq!(back.checksum(), p.checksum());
        assert_eq!(back.dims(), dims);
    }

    #[test]
    fn rejects_corruption() {
        let p = init_params(1, &ModelDims::new(3, vec![], 2)).unwrap();
        let bytes = encode_checkpoint(&p);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(b"garbage").is_err());
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = init_params(2, &ModelDims::new(4, vec![3], 2)).unwrap();
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }
}
