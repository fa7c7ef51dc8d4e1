//! `SFPK` keypoint files.
//!
//! Little-endian: magic `SFPK`, version `u16`, count `u32`, then per
//! keypoint `level u8, x f32, y f32, score f32, dim u16, descriptor f32[dim]`.

use crate::error::{Error, Result};
use crate::extract::Keypoint;

pub const KEYPOINT_MAGIC: &[u8; 4] = b"SFPK";
pub const KEYPOINT_VERSION: u16 = 1;

pub fn encode_keypoints(keypoints: &[Keypoint]) -> Result<Vec<u8>> {
    let count = u32::try_from(keypoints.len()).map_err(|_| Error::InvalidInput("too many keypoints".into()))?;
    let mut out = Vec::with_capacity(10 + keypoints.iter().map(|k| 15 + 4 * k.descriptor.len()).sum::<usize>());
    out.extend_from_slice(KEYPOINT_MAGIC);
    out.extend_from_slice(&KEYPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for k in keypoints {
        let dim = u16::try_from(k.descriptor.len()).map_err(|_| Error::InvalidInput("descriptor too long".into()))?;
        out.push(k.level);
        out.extend_from_slice(&(k.pixel[0] as f32).to_le_bytes());
        out.extend_from_slice(&(k.pixel[1] as f32).to_le_bytes());
        out.extend_from_slice(&(k.score as f32).to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        for v in &k.descriptor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_keypoints(bytes: &[u8]) -> Result<Vec<Keypoint>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != KEYPOINT_MAGIC {
        return Err(Error::Corrupt("bad keypoint file magic".into()));
    }
    let version = r.u16()?;
    if version != KEYPOINT_VERSION {
        return Err(Error::Version { found: version, expected: KEYPOINT_VERSION });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let level = r.u8()?;
        let x = r.f32()? as f64;
        let y = r.f32()? as f64;
        let score = r.f32()? as f64;
        let dim = r.u16()? as usize;
        let descriptor = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        out.push(Keypoint { level, pixel: [x, y], score, descriptor });
    }
    r.finish()?;
    Ok(out)
}

/// Cursor over a little-endian byte buffer that reports truncation.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corrupt(format!("truncated input: need {n} bytes at offset {}, {} left", self.pos, self.bytes.len() - self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}
