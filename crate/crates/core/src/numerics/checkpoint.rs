//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//! `b"INIT1"`, version byte, tensor count, then per tensor: name length,
//! UTF-8 name, rank, dims, row-major `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"INIT1";
pub const FORMAT_VERSION: u8 = 1;

/// Ordered list of named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[FORMAT_VERSION])?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(format!("truncated or corrupt: {what}"));
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| corrupt("magic"))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version).map_err(|_| corrupt("version"))?;
        if version[0] != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", version[0])));
        }
        let read_u32 = |r: &mut dyn Read, what: &str| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| corrupt(what))?;
            Ok(u32::from_le_bytes(b))
        };
        let count = read_u32(r, "count")?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = read_u32(r, "name length")? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| corrupt("name"))?;
            let name = String::from_utf8(name).map_err(|_| corrupt("name utf-8"))?;
            let rank = read_u32(r, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r, "dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            r.read_exact(&mut raw).map_err(|_| corrupt("values"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ckpt.push(name, Tensor::new(shape, data)?);
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::new();
        c.push("w", Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap());
        let b = c.to_bytes();
        assert_eq!(&b[..5], b"INIT1");
        assert_eq!(b[5], 1);
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(b[14], b'w');
        assert_eq!(&b[15..19], &2u32.to_le_bytes());
        assert_eq!(&b[27..31], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 35);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        assert!(Checkpoint::from_bytes(b"INIT1\x02\0\0\0\0").is_err());
        let mut c = Checkpoint::new();
        c.push("w", Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(entries in prop::collection::vec(
            ("[a-z./_]{1,12}", prop::collection::vec(1usize..4, 0..4)), 0..5),
            seed in any::<u32>())
        {
            let mut c = Checkpoint::new();
            for (k, (name, shape)) in entries.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|i| (i as f32 + k as f32) * 0.37 - seed as f32 * 1e-6).collect();
                c.push(name.clone(), Tensor::new(shape.clone(), data).unwrap());
            }
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
