//! A small binary container of named, typed n-d arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "GSEGARR1"
//! count    u32
//! entries  count × {
//!     name_len u32, name (UTF-8),
//!     dtype    u8   (0 = f64, 1 = f32, 2 = u8),
//!     ndim     u32, dims ndim × u64,
//!     data     product(dims) × sizeof(dtype) bytes
//! }
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GSEGARR1";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 0,
            ArrayData::F32(_) => 1,
            ArrayData::U8(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn f64(t: &Tensor) -> Self {
        Array {
            shape: t.shape().to_vec(),
            data: ArrayData::F64(t.data().to_vec()),
        }
    }

    /// Stores a tensor in single precision.
    pub fn f32(t: &Tensor) -> Self {
        Array {
            shape: t.shape().to_vec(),
            data: ArrayData::F32(t.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn bytes(bytes: &[u8]) -> Self {
        Array {
            shape: vec![bytes.len()],
            data: ArrayData::U8(bytes.to_vec()),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.data {
            ArrayData::F64(v) => v.clone(),
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::U8(_) => return Err(Error::invalid("byte array is not a tensor")),
        };
        Tensor::new(&self.shape, data)
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match &self.data {
            ArrayData::U8(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayFile {
    entries: Vec<(String, Array)>,
}

impl ArrayFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = array,
            None => self.entries.push((name, array)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing array {name}")))?
            .to_tensor()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, a) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(a.data.dtype());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Container {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let count = r.u32().ok_or_else(|| bad("truncated header"))?;
        let mut file = ArrayFile::new();
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(|| bad("truncated entry"))? as usize;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(|| bad("truncated name"))?)
                .map_err(|_| bad("name is not UTF-8"))?
                .to_string();
            let dtype = r.take(1).ok_or_else(|| bad("truncated entry"))?[0];
            let ndim = r.u32().ok_or_else(|| bad("truncated entry"))? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("truncated shape"))?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("shape overflows"))?;
            let data = match dtype {
                0 => ArrayData::F64(
                    r.take(n.checked_mul(8).ok_or_else(|| bad("shape overflows"))?)
                        .ok_or_else(|| bad("truncated data"))?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => ArrayData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| bad("shape overflows"))?)
                        .ok_or_else(|| bad("truncated data"))?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => ArrayData::U8(r.take(n).ok_or_else(|| bad("truncated data"))?.to_vec()),
                _ => return Err(bad("unknown dtype")),
            };
            debug_assert_eq!(data.len(), n);
            file.insert(name, Array { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips_bit_exactly(
            values in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            bytes in proptest::collection::vec(any::<u8>(), 0..16),
        ) {
            let mut f = ArrayFile::new();
            let t = Tensor::new(&[values.len()], values.clone()).unwrap();
            f.insert("x", Array::f64(&t));
            f.insert("meta", Array::bytes(&bytes));
            let back = ArrayFile::from_bytes(&f.to_bytes(), Path::new("mem")).unwrap();
            let got = back.get("x").unwrap();
            let ArrayData::F64(v) = &got.data else { panic!() };
            prop_assert!(v.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.get("meta").unwrap().as_bytes().unwrap(), &bytes[..]);
        }
    }

    #[test]
    fn rejects_corrupt_input() {
        let mut f = ArrayFile::new();
        f.insert("x", Array::f32(&Tensor::ones(&[2, 3])));
        let bytes = f.to_bytes();
        let p = Path::new("mem");
        assert!(ArrayFile::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(ArrayFile::from_bytes(b"NOTMAGIC\0\0\0\0", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ArrayFile::from_bytes(&extra, p).is_err());
    }
}
