//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "UFCKPT\0\0"
//! version    u32      currently 1
//! count      u32      number of tensors
//! repeated `count` times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (ndim x u64)
//!   offset   u64      start of this tensor in the payload, in f64 units
//! total      u64      payload length in f64 units
//! payload    total x f64 (IEEE-754 binary64, little-endian)
//! ```
//!
//! Offsets must be contiguous and in declaration order; anything else is rejected.

use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"UFCKPT\0\0";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let layout = params.layout();
    let mut out = Vec::with_capacity(64 + layout.total() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(layout.entries().len() as u32).to_le_bytes());
    for e in layout.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for d in &e.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(e.offset as u64).to_le_bytes());
    }
    out.extend_from_slice(&(layout.total() as u64).to_le_bytes());
    for t in params.tensors() {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    let mut expected_offset = 0usize;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        if offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor {name} at offset {offset}, expected {expected_offset}"
            )));
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        expected_offset += len;
        entries.push((name, shape, len));
    }
    let total = r.u64()? as usize;
    if total != expected_offset {
        return Err(Error::Checkpoint(format!(
            "payload declares {total} values, layout needs {expected_offset}"
        )));
    }
    let mut params = ParamSet::new();
    for (name, shape, len) in entries {
        let raw = r.take(len * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(name, Tensor::new(shape, values)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    crate::util::write_atomic(path, &encode(params))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{Activation, MlpArch};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_fields_are_where_documented() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::new(vec![2], vec![1.0, -0.0]).unwrap())
            .unwrap();
        let bytes = encode(&p);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 8 + 4 + 4 + (4 + 1 + 4 + 8 + 8) + 8 + 16);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let arch = MlpArch::new(vec![3, 4, 2], Activation::Silu).unwrap();
        let bytes = encode(&arch.init(&mut ChaCha8Rng::seed_from_u64(1)));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let mut p = ParamSet::new();
            p.push("head", Tensor::new(vec![split], values[..split].to_vec()).unwrap()).unwrap();
            p.push("tail", Tensor::new(vec![1, values.len() - split], values[split..].to_vec()).unwrap()).unwrap();
            let bytes = encode(&p);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back), bytes);
            prop_assert_eq!(back.names(), p.names());
        }
    }
}
