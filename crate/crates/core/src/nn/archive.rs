//! `VOXT` tensor records and named-parameter archives.
//!
//! A tensor record is `VOXT`, a version byte (1), the rank as u32, one u32 per dim and then
//! the values as f64, all little-endian. An archive is a plain sequence of
//! `(u32 name length, UTF-8 name, tensor record)` entries with no header.

use std::fs;
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"VOXT";
pub const TENSOR_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f64>,
}

pub fn encode_tensor<T: Real>(tensor: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!(
                    "truncated {what}: expected {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode_at(cur: &mut Cursor<'_>) -> Result<Tensor<f64>> {
    let start = cur.pos;
    if cur.take(4, "tensor magic")? != TENSOR_MAGIC {
        return Err(Error::Format {
            offset: start,
            message: "bad tensor magic".into(),
        });
    }
    let version = cur.take(1, "tensor version")?[0];
    if version != TENSOR_VERSION {
        return Err(Error::Format {
            offset: start + 4,
            message: format!("unsupported tensor version {version}"),
        });
    }
    let rank = cur.u32("tensor rank")? as usize;
    if rank > 16 {
        return Err(Error::Format {
            offset: start + 5,
            message: format!("implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32("tensor dims")? as usize);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format {
            offset: start + 9,
            message: format!("shape {shape:?} overflows"),
        })?;
    let raw = cur.take(len, "tensor values")?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}

/// Decodes exactly one tensor record.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let t = decode_at(&mut cur)?;
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            message: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Ok(t)
}

pub fn write_tensor<T: Real>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    encode_tensor(tensor, &mut out);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    decode_tensor(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_archive<'a, T: Real>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(tensor, &mut out);
    }
    out
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let at = cur.pos;
        let n = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(n, "name")?)
            .map_err(|_| Error::Format {
                offset: at + 4,
                message: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let tensor = decode_at(&mut cur)?;
        out.push(NamedTensor { name, tensor });
    }
    Ok(out)
}

pub fn write_archive<'a, T: Real>(
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_archive(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let path = path.as_ref();
    decode_archive(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn record_layout() {
        let t = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut b = Vec::new();
        encode_tensor(&t, &mut b);
        assert_eq!(&b[..5], b"VOXT\x01");
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(b.len(), 13 + 16);
        assert_eq!(decode_tensor(&b).unwrap(), t);
        assert!(matches!(decode_tensor(&b[..20]), Err(Error::Format { .. })));
    }

    #[test]
    fn archive_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("params.voxt");
        let a = Tensor::from_fn(&[2, 3], |i| i as f64);
        let b = Tensor::from_fn(&[4], |i| -(i as f64));
        write_archive([("stem.kernel", &a), ("stem.bias", &b)], &p).unwrap();
        let back = read_archive(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].name, "stem.kernel");
        assert_eq!(back[0].tensor, a);
        assert_eq!(back[1].tensor, b);
    }

    proptest! {
        #[test]
        fn tensor_round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..4, 0..5),
            seed in any::<u64>(),
        ) {
            let t = Tensor::from_fn(&shape, |i| f64::from_bits(seed.rotate_left(i as u32) >> 2));
            let mut b = Vec::new();
            encode_tensor(&t, &mut b);
            let back = decode_tensor(&b).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
        }
    }
}
