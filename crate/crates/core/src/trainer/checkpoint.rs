//! Binary model checkpoints with a TOML sidecar.
//!
//! Layout, all integers and floats little-endian:
//! `"CRLM"`, `u32` version, `u32` layer count, then per layer
//! `u64 rows, u64 cols, u8 relu`, weights (row-major), bias; then
//! `u64 embed_dim, u64 class_count` and the classifier.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CrlError, Result};
use crate::numerics::{DenseTensor, Layer, ModelState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRLM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sidecar contents written next to the binary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub method: String,
    pub seed: u64,
    /// Effective configuration, serialized TOML.
    pub config: String,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

fn put_matrix(buf: &mut Vec<u8>, t: &DenseTensor) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes `model` to `path` and `meta` to the same path with a `.toml`
/// extension.
pub fn write_checkpoint(model: &ModelState, path: &Path, meta: &CheckpointMeta) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for l in &model.layers {
        buf.extend_from_slice(&(l.weight.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(l.weight.cols() as u64).to_le_bytes());
        buf.push(u8::from(l.relu));
        put_matrix(&mut buf, &l.weight);
        put_matrix(&mut buf, &l.bias);
    }
    buf.extend_from_slice(&(model.embed_dim as u64).to_le_bytes());
    buf.extend_from_slice(&(model.class_count as u64).to_le_bytes());
    put_matrix(&mut buf, &model.classifier);
    let text = toml::to_string(meta)
        .map_err(|e| CrlError::Config(format!("cannot serialize checkpoint metadata: {e}")))?;
    fs::write(path, buf)?;
    fs::write(sidecar(path), text)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CrlError::Corruption("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CrlError::Corruption("dimension overflow".into()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DenseTensor> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CrlError::Corruption("dimension overflow".into()))?;
        let data = self
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        DenseTensor::matrix(rows, cols, data).map_err(|e| CrlError::Corruption(e.to_string()))
    }
}

/// Reads a checkpoint and its sidecar.
pub fn read_checkpoint(path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(CrlError::Corruption("not a model checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CrlError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let rows = r.usize()?;
        let cols = r.usize()?;
        let relu = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(CrlError::Corruption(format!("bad activation flag {b}"))),
        };
        let weight = r.matrix(rows, cols)?;
        let bias = DenseTensor::vector(r.matrix(1, cols)?.into_data())
            .map_err(|e| CrlError::Corruption(e.to_string()))?;
        layers.push(Layer { weight, bias, relu });
    }
    let embed_dim = r.usize()?;
    let class_count = r.usize()?;
    let classifier = r.matrix(embed_dim, class_count)?;
    if r.pos != bytes.len() {
        return Err(CrlError::Corruption("trailing bytes in checkpoint".into()));
    }
    let model = ModelState {
        layers,
        classifier,
        class_count,
        embed_dim,
    };
    model
        .validate()
        .map_err(|e| CrlError::Corruption(e.to_string()))?;
    let text = fs::read_to_string(sidecar(path))?;
    let meta = toml::from_str(&text)
        .map_err(|e| CrlError::Corruption(format!("invalid checkpoint sidecar: {e}")))?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            step: 3,
            method: "fkd_ns_cr".into(),
            seed: 11,
            config: "k = 20\n".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ModelState::init(&Architecture::default(), 13, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.crlm");
        write_checkpoint(&m, &p, &meta()).unwrap();
        let (back, mb) = read_checkpoint(&p).unwrap();
        assert_eq!(mb, meta());
        for ((_, a), (_, b)) in m.params().iter().zip(back.params()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back, m);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ModelState::init(&Architecture::default(), 3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.crlm");
        write_checkpoint(&m, &p, &meta()).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(CrlError::Corruption(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(CrlError::Corruption(_))));
        let mut v = bytes;
        v[4] = 9;
        fs::write(&p, &v).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(CrlError::Version { found: 9, .. })));
    }
}
