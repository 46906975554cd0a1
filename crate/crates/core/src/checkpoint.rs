//! Self-describing binary checkpoint container.
//!
//! Layout (little-endian):
//! `magic "S2RCKPT\0" | version u32 | kind str | meta-json str |
//!  tensor count u32 | tensors (name str, ndim u32, dims u64.., f64 bits..) |
//!  rng seed u64 | rng counter u64`
//!
//! f64 values are stored as raw bit patterns, so save/load round-trips are
//! bit-exact. Writes go through a temp file + rename.

use crate::autodiff::Arr;
use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"S2RCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("checkpoint kind {got:?}, expected {expected:?}")]
    WrongKind { got: String, expected: String },
    #[error("checkpoint meta: {0}")]
    Meta(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta_json: String,
    pub tensors: BTreeMap<String, Arr>,
    pub rng_seed: u64,
    pub rng_counter: u64,
}

impl Checkpoint {
    pub fn new<M: Serialize>(kind: &str, meta: &M, rng_seed: u64, rng_counter: u64) -> Self {
        Self {
            kind: kind.to_string(),
            meta_json: serde_json::to_string(meta).expect("meta serializes"),
            tensors: BTreeMap::new(),
            rng_seed,
            rng_counter,
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Arr) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn insert_all<'a>(&mut self, named: impl IntoIterator<Item = (String, &'a Arr)>) {
        for (name, t) in named {
            self.tensors.insert(name, t.clone());
        }
    }

    /// Store a flat f64 vector under a name.
    pub fn insert_vec(&mut self, name: &str, values: &[f64]) {
        self.insert(
            name,
            ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap(),
        );
    }

    pub fn tensor(&self, name: &str) -> Result<&Arr, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn vec(&self, name: &str) -> Result<Vec<f64>, CheckpointError> {
        Ok(self.tensor(name)?.iter().cloned().collect())
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M, CheckpointError> {
        Ok(serde_json::from_str(&self.meta_json)?)
    }

    pub fn expect_kind(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.kind != expected {
            return Err(CheckpointError::WrongKind {
                got: self.kind.clone(),
                expected: expected.to_string(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut buf, &self.kind);
        write_str(&mut buf, &self.meta_json);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_str(&mut buf, name);
            buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for d in t.shape() {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.iter() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        buf.extend_from_slice(&self.rng_seed.to_le_bytes());
        buf.extend_from_slice(&self.rng_counter.to_le_bytes());

        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };

        if cur.take(8)? != MAGIC.as_slice() {
            return Err(CheckpointError::BadMagic);
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let kind = cur.string()?;
        let meta_json = cur.string()?;
        let count = cur.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = cur.string()?;
            let ndim = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.u64()? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_bits(cur.u64()?));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| CheckpointError::Corrupt(format!("tensor {name}: {e}")))?;
            tensors.insert(name, arr);
        }
        let rng_seed = cur.u64()?;
        let rng_counter = cur.u64()?;
        Ok(Self {
            kind,
            meta_json,
            tensors,
            rng_seed,
            rng_counter,
        })
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-utf8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, fill_normal};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        let mut ck = Checkpoint::new("stage1", &serde_json::json!({"step": 7}), 42, 9);
        let mut rng = derive_rng(1, &[2]);
        let mut t = ArrayD::zeros(IxDyn(&[3, 4, 2]));
        fill_normal(&mut rng, t.as_slice_mut().unwrap());
        // Exercise awkward values explicitly.
        t.as_slice_mut().unwrap()[0] = f64::MIN_POSITIVE;
        t.as_slice_mut().unwrap()[1] = -0.0;
        ck.insert("unet.w", t.clone());
        ck.insert_vec("sched.beta", &[1e-4, 2e-4]);
        ck.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.kind, "stage1");
        assert_eq!(back.rng_seed, 42);
        assert_eq!(back.rng_counter, 9);
        let bt = back.tensor("unet.w").unwrap();
        assert_eq!(bt.shape(), t.shape());
        for (a, b) in t.iter().zip(bt.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.vec("sched.beta").unwrap(), vec![1e-4, 2e-4]);

        // Saved bytes are identical across saves (determinism).
        let path2 = dir.path().join("model2.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn bad_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::BadMagic)
        ));

        let ck = Checkpoint::new("x", &serde_json::json!({}), 0, 0);
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // version
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::BadVersion(_))
        ));
    }
}
