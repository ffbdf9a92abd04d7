//! `TXB1` dataset files.
//!
//! ```text
//! "TXB1" | u16 version | u32 species | u32 samples | u32 dims[image, audio, sat, env]
//! per sample: u32 species_id | f32 lat | f32 lon | u8 audio_present
//!             | f32 image[..] | f32 audio[..] (if present) | f32 sat[..] | f32 env[..]
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use super::{Dataset, FeatureDims, MultimodalSample};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"TXB1";
pub const DATASET_VERSION: u16 = 1;

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let d = ds.dims;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.species_count as u32).to_le_bytes());
    out.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    for dim in [d.image, d.audio, d.sat, d.env] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    let floats = |out: &mut Vec<u8>, v: &[f32]| {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    for s in &ds.samples {
        out.extend_from_slice(&s.species_id.to_le_bytes());
        out.extend_from_slice(&s.lat.to_le_bytes());
        out.extend_from_slice(&s.lon.to_le_bytes());
        out.push(s.audio.is_some() as u8);
        floats(&mut out, &s.image);
        if let Some(a) = &s.audio {
            floats(&mut out, a);
        }
        floats(&mut out, &s.sat);
        floats(&mut out, &s.env);
    }
    out
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.pos, "length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(buf);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic, expected TXB1"));
    }
    let at = r.offset();
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let species_count = r.u32()? as usize;
    let n = r.u32()? as usize;
    let dims = FeatureDims {
        image: r.u32()? as usize,
        audio: r.u32()? as usize,
        sat: r.u32()? as usize,
        env: r.u32()? as usize,
    };
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let at = r.offset();
        let species_id = r.u32()?;
        if species_id as usize >= species_count {
            return Err(Error::format(at, format!("species id {species_id} >= {species_count}")));
        }
        let lat = r.f32()?;
        let lon = r.f32()?;
        let at = r.offset();
        let flag = r.u8()?;
        if flag > 1 {
            return Err(Error::format(at, format!("bad audio flag {flag}")));
        }
        let image = r.f32s(dims.image)?;
        let audio = if flag == 1 { Some(r.f32s(dims.audio)?) } else { None };
        let sat = r.f32s(dims.sat)?;
        let env = r.f32s(dims.env)?;
        samples.push(MultimodalSample {
            species_id,
            lat,
            lon,
            image,
            audio,
            sat,
            env,
        });
    }
    if !r.is_done() {
        return Err(Error::format(r.offset(), "trailing bytes after last record"));
    }
    Ok(Dataset {
        species_count,
        dims,
        samples,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}
