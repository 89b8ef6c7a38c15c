//! Binary checkpoints: magic "IPNB", a format version, a caller-supplied
//! metadata digest, named raw-f32 tensor records, and a whole-file FNV-1a
//! trailer so any single corrupted byte is detected.

use std::path::Path;

use thiserror::Error;

use crate::hash::fnv1a;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"IPNB";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic; not a checkpoint file")]
    BadMagic,
    #[error("unsupported format version {0} (expected {VERSION})")]
    BadVersion(u32),
    #[error("digest mismatch; file corrupted")]
    DigestMismatch,
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint lacks tensor '{0}'")]
    MissingTensor(String),
    #[error("tensor '{name}' has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

/// One stored tensor: name, shape, raw f32 values.
pub type StoredTensor = (String, Vec<usize>, Vec<f32>);

/// Serializes tensors in the given order; byte-identical for identical
/// inputs.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    meta_digest: u64,
    tensors: &[(String, Tensor<T>)],
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&meta_digest.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = t.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in &shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.to_f32_vec() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = fnv1a(&buf);
    buf.extend_from_slice(&digest.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads and integrity-checks a checkpoint; returns the metadata digest and
/// the stored tensors in file order.
pub fn load_checkpoint(path: &Path) -> Result<(u64, Vec<StoredTensor>), CheckpointError> {
    let buf = std::fs::read(path)?;
    if buf.len() < 8 {
        return Err(CheckpointError::Truncated(buf.len()));
    }
    let (body, trailer) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(CheckpointError::DigestMismatch);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let meta = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Truncated(r.pos));
    }
    Ok((meta, tensors))
}

/// Copies stored values into live tensors by name, shape-checked. Tensors
/// absent from the file are an error; extra stored tensors are ignored.
pub fn apply_checkpoint<T: Scalar>(
    targets: &[(String, Tensor<T>)],
    stored: &[StoredTensor],
) -> Result<(), CheckpointError> {
    for (name, t) in targets {
        let (_, shape, data) = stored
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if *shape != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                got: shape.clone(),
                want: t.shape(),
            });
        }
        let cast = Tensor::<T>::from_f32(shape.clone(), data);
        t.set_data(cast.to_vec());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_tensors() -> Vec<(String, Tensor<f32>)> {
        vec![
            (
                "a.weight".to_string(),
                Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 7.5, -0.125]),
            ),
            ("b.bias".to_string(), Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4])),
        ]
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ipnb");
        let p2 = dir.path().join("b.ipnb");
        let tensors = sample_tensors();
        save_checkpoint(&p1, 42, &tensors).unwrap();
        let (meta, stored) = load_checkpoint(&p1).unwrap();
        assert_eq!(meta, 42);
        let reloaded: Vec<(String, Tensor<f32>)> = stored
            .iter()
            .map(|(n, s, d)| (n.clone(), Tensor::new(s.clone(), d.clone())))
            .collect();
        save_checkpoint(&p2, meta, &reloaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn every_single_byte_corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ipnb");
        save_checkpoint(&p, 7, &sample_tensors()).unwrap();
        let clean = std::fs::read(&p).unwrap();
        for pos in [0, 5, 13, 20, clean.len() / 2, clean.len() - 1] {
            let mut bad = clean.clone();
            bad[pos] ^= 0x01;
            std::fs::write(&p, &bad).unwrap();
            assert!(
                load_checkpoint(&p).is_err(),
                "corruption at byte {pos} went undetected"
            );
        }
    }

    #[test]
    fn version_and_magic_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ipnb");
        save_checkpoint(&p, 7, &sample_tensors()).unwrap();
        let mut raw = std::fs::read(&p).unwrap();
        // bump the version and re-seal the digest so only the version trips
        raw[4] = 9;
        let body_len = raw.len() - 8;
        let digest = crate::hash::fnv1a(&raw[..body_len]);
        raw[body_len..].copy_from_slice(&digest.to_le_bytes());
        std::fs::write(&p, &raw).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::BadVersion(9))
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ipnb");
        save_checkpoint(&p, 7, &sample_tensors()).unwrap();
        let raw = std::fs::read(&p).unwrap();
        std::fs::write(&p, &raw[..raw.len() - 9]).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }

    #[test]
    fn apply_checks_names_and_shapes() {
        let tensors = sample_tensors();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ipnb");
        save_checkpoint(&p, 7, &tensors).unwrap();
        let (_, stored) = load_checkpoint(&p).unwrap();
        let target = vec![(
            "a.weight".to_string(),
            Tensor::<f32>::zeros(vec![2, 3]),
        )];
        apply_checkpoint(&target, &stored).unwrap();
        assert_eq!(target[0].1.to_vec(), tensors[0].1.to_vec());
        let missing = vec![("z.w".to_string(), Tensor::<f32>::zeros(vec![1]))];
        assert!(matches!(
            apply_checkpoint(&missing, &stored),
            Err(CheckpointError::MissingTensor(_))
        ));
        let bad_shape = vec![("a.weight".to_string(), Tensor::<f32>::zeros(vec![3, 2]))];
        assert!(matches!(
            apply_checkpoint(&bad_shape, &stored),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }
}
