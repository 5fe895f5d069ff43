//! Checkpoint file format.
//!
//! Layout, all little-endian:
//!   bytes 0..4    magic "GCM1"
//!   bytes 4..32   seven u32 config words: n_layers, n_heads, d_model,
//!                 d_head, d_mlp, vocab_size, max_seq_len
//!   bytes 32..    every weight block in declaration order as f32, row-major:
//!                 tok_embed [V x d_model], pos_embed [T_max x d_model],
//!                 then per layer: ln1_gain, ln1_bias, wq, bq, wk, bk, wv,
//!                 bv, wo, bo, ln2_gain, ln2_bias, w1 [d_model x d_mlp], b1,
//!                 w2 [d_mlp x d_model], b2, and finally lnf_gain, lnf_bias,
//!                 unembed [d_model x vocab_size].

use super::{ModelConfig, ModelParams};
use crate::error::{GcmError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GCM1";

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let c = &params.config;
    for v in [
        c.n_layers,
        c.n_heads,
        c.d_model,
        c.d_head,
        c.d_mlp,
        c.vocab_size,
        c.max_seq_len,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for block in params.blocks() {
        for &f in block {
            w.write_all(&f.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(GcmError::Validation(format!(
            "bad checkpoint magic {:?} (expected {:?})",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let mut word = [0u8; 4];
    let mut next = || -> Result<usize> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word) as usize)
    };
    let config = ModelConfig {
        n_layers: next()?,
        n_heads: next()?,
        d_model: next()?,
        d_head: next()?,
        d_mlp: next()?,
        vocab_size: next()?,
        max_seq_len: next()?,
    };
    config.validate()?;
    let mut params = ModelParams::zeros(config)?;
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let expected = params.n_params() * 4;
    if buf.len() != expected {
        return Err(GcmError::Validation(format!(
            "checkpoint payload is {} bytes, expected {}",
            buf.len(),
            expected
        )));
    }
    let mut off = 0;
    for block in params.blocks_mut() {
        for f in block.iter_mut() {
            *f = f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]);
            off += 4;
        }
    }
    params.validate_finite()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn roundtrip_is_exact() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 16,
            vocab_size: 11,
            max_seq_len: 12,
        };
        let p = ModelParams::random(cfg, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gcm");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gcm");
        std::fs::write(&path, b"NOPE1234").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 4,
            d_head: 4,
            d_mlp: 8,
            vocab_size: 5,
            max_seq_len: 6,
        };
        let p = ModelParams::random(cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gcm");
        save_checkpoint(&p, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
