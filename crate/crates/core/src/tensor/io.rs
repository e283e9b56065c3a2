//! `PVT1` binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PVT1"  u32 count
//! repeated count times:
//!   u16 name_len  name (UTF-8)  u8 rank  u32 extent × rank  f32 × product(extents)
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{Tensor, TensorError};
use crate::scalar::Real;

pub const TENSOR_MAGIC: &[u8; 4] = b"PVT1";

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("bad magic {0:?}, expected \"PVT1\"")]
    BadMagic([u8; 4]),
    #[error("unexpected end of tensor file")]
    Truncated,
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("tensor {name:?} declares {elements} elements, more than the remaining input allows")]
    Oversized { name: String, elements: u64 },
    #[error("tensor name {0:?} longer than 65535 bytes")]
    NameTooLong(String),
    #[error("tensor {name:?}: rank {rank} or an extent exceeds the format's limits")]
    ShapeTooLarge { name: String, rank: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for TensorFileError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TensorFileError::Truncated
        } else {
            TensorFileError::Io(e)
        }
    }
}

/// A named tensor as stored on disk (always 32-bit).
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>, TensorError> {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| T::of(v as f64)).collect())
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<(), TensorFileError> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| TensorFileError::NameTooLong(t.name.clone()))?;
        let too_large = || TensorFileError::ShapeTooLarge {
            name: t.name.clone(),
            rank: t.shape.len(),
        };
        let rank = u8::try_from(t.shape.len()).map_err(|_| too_large())?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[rank])?;
        for &e in &t.shape {
            w.write_all(&u32::try_from(e).map_err(|_| too_large())?.to_le_bytes())?;
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(TensorError::DataLength {
                shape: t.shape.clone(),
                len: t.data.len(),
            }
            .into());
        }
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Parses a complete `PVT1` buffer. Trailing bytes are ignored.
pub fn read_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>, TensorFileError> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorFileError::BadMagic(magic));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        if r.len() < name_len {
            return Err(TensorFileError::Truncated);
        }
        let (name, rest) = r.split_at(name_len);
        let name = std::str::from_utf8(name).map_err(|_| TensorFileError::BadName)?.to_owned();
        r = rest;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        let mut elements: u64 = 1;
        for _ in 0..rank[0] {
            let e = read_u32(&mut r)?;
            // every prefix product must fit, or later shape arithmetic overflows
            elements = match elements.checked_mul(e as u64) {
                Some(n) => n,
                None => {
                    return Err(TensorFileError::ShapeTooLarge {
                        name,
                        rank: rank[0] as usize,
                    })
                }
            };
            shape.push(e as usize);
        }
        if elements.saturating_mul(4) > r.len() as u64 {
            return Err(TensorFileError::Oversized { name, elements });
        }
        let n = elements as usize;
        let (raw, rest) = r.split_at(n * 4);
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        r = rest;
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

fn read_u32(r: &mut &[u8]) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut &[u8]) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_layout() {
        let t = NamedTensor {
            name: "w".into(),
            shape: vec![2],
            data: vec![1.0, -2.0],
        };
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[t]).unwrap();
        let mut expected = b"PVT1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u16.to_le_bytes());
        expected.push(b'w');
        expected.push(1);
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_tensors(b"PVT"), Err(TensorFileError::Truncated)));
        assert!(matches!(read_tensors(b"NOPE\0\0\0\0"), Err(TensorFileError::BadMagic(_))));
        // one tensor claiming 2^32-1 elements with no payload
        let mut buf = b"PVT1".to_vec();
        buf.extend(1u32.to_le_bytes());
        buf.extend(0u16.to_le_bytes());
        buf.push(1);
        buf.extend(u32::MAX.to_le_bytes());
        assert!(matches!(read_tensors(&buf), Err(TensorFileError::Oversized { .. })));
        // extents whose product overflows before a trailing zero
        let mut buf = b"PVT1".to_vec();
        buf.extend(1u32.to_le_bytes());
        buf.extend(0u16.to_le_bytes());
        buf.push(4);
        for e in [u32::MAX, u32::MAX, u32::MAX, 0] {
            buf.extend(e.to_le_bytes());
        }
        assert!(matches!(read_tensors(&buf), Err(TensorFileError::ShapeTooLarge { .. })));
    }

    #[test]
    fn scalar_tensor_has_one_element() {
        let t = NamedTensor {
            name: "s".into(),
            shape: vec![],
            data: vec![3.5],
        };
        let mut buf = Vec::new();
        write_tensors(&mut buf, std::slice::from_ref(&t)).unwrap();
        assert_eq!(read_tensors(&buf).unwrap(), vec![t]);
    }

    proptest! {
        #[test]
        fn round_trip(entries in prop::collection::vec(
            ("[a-z.0-9]{0,12}", prop::collection::vec(0usize..4, 0..4)), 0..5)
        ) {
            let tensors: Vec<NamedTensor> = entries
                .into_iter()
                .enumerate()
                .map(|(i, (name, shape))| {
                    let n = shape.iter().product::<usize>();
                    NamedTensor { name, shape, data: (0..n).map(|j| (i * 31 + j) as f32 * 0.25 - 3.0).collect() }
                })
                .collect();
            let mut buf = Vec::new();
            write_tensors(&mut buf, &tensors).unwrap();
            prop_assert_eq!(read_tensors(&buf).unwrap(), tensors);
        }
    }
}
