//! `LTNS` binary tensor files.
//!
//! Layout: magic `LTNS`, `u8` version (1), `u8` axis count, one little-endian
//! `u32` extent per axis, `u8` dtype code (0 = f32 LE, 1 = u8), then the
//! row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::domain::{KeepMaskSequence, LatentGrid};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LTNS";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U8(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() || shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("unsupported axis count {}", shape.len())));
        }
        if shape.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Format("axis extent exceeds u32".into()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!(
                "payload has {} elements, shape {shape:?} needs {n}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[self.data.code()])?;
        match &self.data {
            TensorData::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            TensorData::U8(v) => w.write_all(v)?,
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Format(format!("truncated while reading {what}")));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, expected LTNS".into()));
        }
        let version = take(1, "version")?[0];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let naxes = take(1, "axis count")?[0] as usize;
        if naxes == 0 {
            return Err(Error::Format("zero axes".into()));
        }
        let mut shape = Vec::with_capacity(naxes);
        for _ in 0..naxes {
            let b = take(4, "extent")?;
            shape.push(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize);
        }
        let code = take(1, "dtype")?[0];
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        let payload = cur;
        let data = match code {
            0 => {
                if payload.len() != n * 4 {
                    return Err(Error::Format(format!(
                        "payload length {} bytes does not match {n} f32 elements ({} bytes)",
                        payload.len(),
                        n * 4
                    )));
                }
                TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            1 => {
                if payload.len() != n {
                    return Err(Error::Format(format!(
                        "payload length {} bytes does not match {n} u8 elements",
                        payload.len()
                    )));
                }
                TensorData::U8(payload.to_vec())
            }
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        };
        Self::new(shape, data)
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_grid(grid: &LatentGrid) -> Self {
        Self {
            shape: grid.dims().to_vec(),
            data: TensorData::F32(grid.data().to_vec()),
        }
    }

    pub fn into_grid(self) -> Result<LatentGrid> {
        let dims: [usize; 4] = self
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::Format(format!("expected 4 axes (t,h,w,c), got {}", self.shape.len())))?;
        match self.data {
            TensorData::F32(v) => LatentGrid::new(dims, v),
            TensorData::U8(_) => Err(Error::Format("expected f32 payload for a latent grid".into())),
        }
    }

    pub fn from_mask(mask: &KeepMaskSequence) -> Self {
        Self {
            shape: mask.dims().to_vec(),
            data: TensorData::U8(mask.data().iter().map(|&b| b as u8).collect()),
        }
    }

    pub fn into_mask(self) -> Result<KeepMaskSequence> {
        let dims: [usize; 3] = self
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::Format(format!("expected 3 axes (t,hp,wp), got {}", self.shape.len())))?;
        match self.data {
            TensorData::U8(v) => {
                if let Some(bad) = v.iter().find(|&&b| b > 1) {
                    return Err(Error::Format(format!("mask byte {bad} is not 0 or 1")));
                }
                KeepMaskSequence::new(dims, v.into_iter().map(|b| b == 1).collect())
            }
            TensorData::F32(_) => Err(Error::Format("expected u8 payload for a mask".into())),
        }
    }

    /// Borrowed f32 payload, or a format error for other dtypes.
    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::Format("expected f32 payload".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], TensorData::F32(vec![1.0, -2.0])).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"LTNS");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(b[14], 0);
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 15 + 8);
        assert_eq!(Tensor::from_bytes(&b).unwrap(), t);
    }

    #[test]
    fn rejects_payload_length_mismatch() {
        let t = Tensor::new(vec![3], TensorData::F32(vec![1.0, 2.0, 3.0])).unwrap();
        let mut b = t.to_bytes();
        b.pop();
        let err = Tensor::from_bytes(&b).unwrap_err().to_string();
        assert!(err.contains("payload length"), "{err}");
        let mut b = t.to_bytes();
        b.push(0);
        assert!(Tensor::from_bytes(&b).is_err());
    }

    #[test]
    fn rejects_bad_magic_and_dtype() {
        let t = Tensor::new(vec![1], TensorData::U8(vec![1])).unwrap();
        let mut b = t.to_bytes();
        b[0] = b'X';
        assert!(Tensor::from_bytes(&b).is_err());
        let mut b = t.to_bytes();
        b[10] = 7;
        assert!(Tensor::from_bytes(&b).is_err());
    }

    #[test]
    fn mask_roundtrip() {
        let mut m = KeepMaskSequence::all_true([2, 2, 3]);
        m.set(1, 1, 2, false);
        let back = Tensor::from_bytes(&Tensor::from_mask(&m).to_bytes()).unwrap().into_mask().unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn grid_roundtrip() {
        let g = LatentGrid::from_fn([2, 2, 2, 3], |t, y, x, c| (t + 2 * y + 3 * x) as f32 - c as f32 * 0.5).unwrap();
        let back = Tensor::from_bytes(&Tensor::from_grid(&g).to_bytes()).unwrap().into_grid().unwrap();
        assert_eq!(back, g);
    }
}
