//! Binary point-cloud files.
//!
//! Layout, all little-endian:
//!
//! | field     | type          |
//! |-----------|---------------|
//! | magic     | `b"PTPC"`     |
//! | version   | u32, = 1      |
//! | flags     | u32; bit 0 = labels present |
//! | n         | u32           |
//! | c         | u32           |
//! | positions | n×3 f32       |
//! | features  | n×c f32       |
//! | labels    | n u32, only if flagged |
//!
//! Values are stored as f32, so a write/read cycle rounds 64-bit inputs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"PTPC";
pub const VERSION: u32 = 1;
pub const FLAG_LABELS: u32 = 1;

/// A decoded file.
#[derive(Clone, Debug, PartialEq)]
pub struct PtpcFile {
    pub cloud: PointCloud,
    pub labels: Option<Vec<u32>>,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} exceeds u32")))
}

pub fn encode(cloud: &PointCloud, labels: Option<&[u32]>) -> Result<Vec<u8>> {
    let (n, c) = (cloud.len(), cloud.channels());
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::shape("ptpc labels", &[l.len()], &[n]));
        }
    }
    let mut out = Vec::with_capacity(20 + 4 * n * (3 + c + 1));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if labels.is_some() { FLAG_LABELS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&to_u32(n, "n")?.to_le_bytes());
    out.extend_from_slice(&to_u32(c, "c")?.to_le_bytes());
    for p in &cloud.positions {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    for v in cloud.features.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for l in labels.into_iter().flatten() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated: need {len} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<PtpcFile> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected PTPC".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let flags = cur.u32()?;
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
    }
    let n = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    let pos = cur.f32s(n * 3)?;
    let positions = pos.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
    let features = Tensor::matrix(n, c, cur.f32s(n * c)?)?;
    let labels = if flags & FLAG_LABELS != 0 {
        Some(
            cur.take(n * 4)?
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        )
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(PtpcFile {
        cloud: PointCloud::new(positions, features)?,
        labels,
    })
}

pub fn write_ptpc(path: &Path, cloud: &PointCloud, labels: Option<&[u32]>) -> Result<()> {
    std::fs::write(path, encode(cloud, labels)?).map_err(|e| Error::io(path, e))
}

pub fn read_ptpc(path: &Path) -> Result<PtpcFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PointCloud {
        PointCloud::new(
            vec![[0.5, -1.0, 2.0], [0.25, 0.0, 8.0]],
            Tensor::matrix(2, 1, vec![1.5, -3.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn exact_byte_layout() {
        let bytes = encode(&sample(), Some(&[7, 9])).unwrap();
        assert_eq!(&bytes[..4], b"PTPC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 4 * (6 + 2 + 2));
        assert_eq!(&bytes[bytes.len() - 4..], &9u32.to_le_bytes());
    }

    #[test]
    fn round_trip_with_and_without_labels() {
        let c = sample();
        let f = decode(&encode(&c, None).unwrap()).unwrap();
        assert_eq!(f.cloud, c);
        assert_eq!(f.labels, None);
        let f = decode(&encode(&c, Some(&[1, 2])).unwrap()).unwrap();
        assert_eq!(f.labels, Some(vec![1, 2]));
    }

    #[test]
    fn storage_rounds_to_f32() {
        let c = PointCloud::new(vec![[0.1, 0.0, 0.0]], Tensor::zeros(&[1, 0])).unwrap();
        let back = decode(&encode(&c, None).unwrap()).unwrap();
        assert_eq!(back.cloud.positions[0][0], 0.1f32 as f64);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let good = encode(&sample(), None).unwrap();
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = good.clone();
        bad[8] = 2;
        assert!(decode(&bad).is_err());
        let mut bad = good;
        bad.push(0);
        assert!(decode(&bad).is_err());
        assert!(encode(&sample(), Some(&[1])).is_err());
    }
}
