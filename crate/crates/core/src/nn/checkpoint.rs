//! Binary model checkpoints.
//!
//! Layout, little-endian: magic `CSVAECK1`, `u16` version, then a
//! length-prefixed UTF-8 config blob, the parameter store, the buffer store
//! and an optional Adam state. A store is a `u32` count followed by
//! `(name, u32 rank, u64 dims.., f64 values..)` records.

use std::io::{Read, Write};
use std::path::Path;

use super::adam::{AdamConfig, AdamState};
use super::{Tensor, TensorStore};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSVAECK1";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Serialized model and training configuration.
    pub config: String,
    pub params: TensorStore,
    pub buffers: TensorStore,
    pub adam: Option<AdamState>,
    pub epoch: u32,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn store(&mut self, store: &TensorStore) {
        self.u32(store.len() as u32);
        for (name, t) in store.iter() {
            self.str(name);
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            self.f64s(t.data());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Truncated { what: "checkpoint" })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or(Error::Truncated { what: "checkpoint" })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Malformed(format!("checkpoint string: {e}")))
    }
    fn store(&mut self) -> Result<TensorStore> {
        let count = self.u32()?;
        let mut store = TensorStore::new();
        for _ in 0..count {
            let name = self.str()?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("tensor {name} is too large")))?;
            store.add(name, Tensor::new(shape, self.f64s(n)?)?);
        }
        Ok(store)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.str(&self.config);
        w.u32(self.epoch);
        w.store(&self.params);
        w.store(&self.buffers);
        match &self.adam {
            None => w.u8(0),
            Some(adam) => {
                w.u8(1);
                let c = adam.config;
                w.f64s(&[c.lr, c.beta1, c.beta2, c.eps]);
                w.u64(adam.step);
                for (m, v) in adam.first_moment.iter().zip(&adam.second_moment) {
                    w.f64s(m);
                    w.f64s(v);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(CHECKPOINT_MAGIC.len()).map_err(|_| Error::BadMagic {
            expected: CHECKPOINT_MAGIC.to_vec(),
            found: bytes.to_vec(),
        })?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC.to_vec(),
                found: magic.to_vec(),
            });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let config = r.str()?;
        let epoch = r.u32()?;
        let params = r.store()?;
        let buffers = r.store()?;
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                let step = r.u64()?;
                let mut first_moment = Vec::with_capacity(params.len());
                let mut second_moment = Vec::with_capacity(params.len());
                for t in params.tensors() {
                    first_moment.push(r.f64s(t.len())?);
                    second_moment.push(r.f64s(t.len())?);
                }
                Some(AdamState {
                    config,
                    step,
                    first_moment,
                    second_moment,
                })
            }
            other => return Err(Error::Malformed(format!("optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            params,
            buffers,
            adam,
            epoch,
        })
    }

    /// Writes to a temporary sibling and renames, so an interrupted save
    /// never replaces a valid checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = TensorStore::new();
        params.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.25 - 1.0));
        params.add("a.bias", Tensor::filled(&[2], f64::MIN_POSITIVE));
        let mut buffers = TensorStore::new();
        buffers.add("bn.running_var", Tensor::filled(&[4], 1.5));
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.step = 7;
        adam.first_moment[0][4] = -3.0;
        adam.second_moment[1][1] = 9.0;
        Checkpoint {
            config: "variant = \"diagonal\"\n".into(),
            params,
            buffers,
            adam: Some(adam),
            epoch: 3,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
        let mut no_adam = ck;
        no_adam.adam = None;
        assert_eq!(Checkpoint::from_bytes(&no_adam.to_bytes()).unwrap(), no_adam);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::VersionMismatch { found: 9, .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Malformed(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
