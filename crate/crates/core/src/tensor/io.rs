//! Binary tensor formats. All integers and floats are little-endian.
//!
//! * Checkpoint: `"BEVP"`, version `u32`, parameter count `u32`, then per
//!   parameter: name length `u32`, UTF-8 name, ndim `u32`, dims `u32[ndim]`,
//!   `f32[prod(dims)]`.
//! * Tensor dump: `"TNSR"`, ndim `u32`, dims `u32[ndim]`, `f32[prod(dims)]`.

use std::io::{Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BEVP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DUMP_MAGIC: &[u8; 4] = b"TNSR";

/// A tensor record as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_shape_and_data(out: &mut Vec<u8>, shape: &[usize], data: &[f32]) {
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.origin, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn shape_and_data(&mut self) -> Result<(Vec<usize>, Vec<f32>)> {
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let bytes = self.take(count * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((shape, data))
    }
}

pub fn encode_checkpoint(records: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, records.len() as u32);
    for r in records {
        put_u32(&mut out, r.name.len() as u32);
        out.extend_from_slice(r.name.as_bytes());
        put_shape_and_data(&mut out, &r.shape, &r.data);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Vec<NamedArray>> {
    let mut c = Cursor {
        buf: bytes,
        pos: 0,
        origin,
    };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(origin, "missing BEVP magic"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format(origin, "parameter name is not UTF-8"))?
            .to_string();
        let (shape, data) = c.shape_and_data()?;
        out.push(NamedArray { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(origin, "trailing bytes after last parameter"));
    }
    Ok(out)
}

/// Writes the checkpoint through a temporary file so a crash never leaves a
/// half-written file in place.
pub fn write_checkpoint(path: &Path, records: &[NamedArray]) -> Result<()> {
    let tmp = path.with_extension("bevp.tmp");
    std::fs::write(&tmp, encode_checkpoint(records)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedArray>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DUMP_MAGIC);
    let data: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
    put_shape_and_data(&mut out, t.shape(), &data);
    out
}

pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<Tensor<f32>> {
    let mut c = Cursor {
        buf: bytes,
        pos: 0,
        origin,
    };
    if c.take(4)? != DUMP_MAGIC {
        return Err(Error::format(origin, "missing TNSR magic"));
    }
    let (shape, data) = c.shape_and_data()?;
    Tensor::from_vec(&shape, data)
}

pub fn dump_tensor<T: Scalar>(t: &Tensor<T>, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(&encode_tensor(t))
}

pub fn load_tensor(mut r: impl Read, origin: &Path) -> Result<Tensor<f32>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io(origin, e))?;
    decode_tensor(&buf, origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn checkpoint_layout_is_exact() {
        let recs = vec![NamedArray {
            name: "w".into(),
            shape: vec![2],
            data: vec![1.0, -2.0],
        }];
        let bytes = encode_checkpoint(&recs);
        let mut expect = b"BEVP".to_vec();
        for v in [1u32, 1, 1] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.push(b'w');
        for v in [1u32, 2] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("x.bevp");
        assert!(decode_checkpoint(b"NOPE\x01\0\0\0\0\0\0\0", p).is_err());
        let mut bytes = encode_checkpoint(&[NamedArray {
            name: "a".into(),
            shape: vec![3],
            data: vec![0.0; 3],
        }]);
        bytes.pop();
        assert!(decode_checkpoint(&bytes, p).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip(
            names in proptest::collection::vec("[a-z.]{1,12}", 1..4),
            dims in proptest::collection::vec(1usize..5, 1..4),
        ) {
            let n: usize = dims.iter().product();
            let recs: Vec<NamedArray> = names.iter().enumerate().map(|(i, name)| NamedArray {
                name: name.clone(),
                shape: dims.clone(),
                data: (0..n).map(|k| (k as f32) * 0.5 - i as f32).collect(),
            }).collect();
            let back = decode_checkpoint(&encode_checkpoint(&recs), Path::new("p")).unwrap();
            prop_assert_eq!(back, recs);
        }

        #[test]
        fn dump_round_trip(dims in proptest::collection::vec(1usize..4, 1..5)) {
            let n: usize = dims.iter().product();
            let t = Tensor::<f32>::from_vec(&dims, (0..n).map(|k| k as f32 - 3.25).collect()).unwrap();
            let back = decode_tensor(&encode_tensor(&t), Path::new("t")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.data(), t.data());
        }
    }
}
