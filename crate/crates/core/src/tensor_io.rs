//! Flat binary tensor blobs.
//!
//! Layout (little-endian): magic `WDT1`, `u8` dtype code, `u8` ndim, `ndim`
//! `u32` dims, then the raw element data in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WDT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DTypeCode {
    U8 = 0,
    F32 = 1,
    F64 = 2,
}

impl DTypeCode {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(DTypeCode::U8),
            1 => Ok(DTypeCode::F32),
            2 => Ok(DTypeCode::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DTypeCode::U8 => 1,
            DTypeCode::F32 => 4,
            DTypeCode::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> DTypeCode {
        match self {
            TensorData::U8(_) => DTypeCode::U8,
            TensorData::F32(_) => DTypeCode::F32,
            TensorData::F64(_) => DTypeCode::F64,
        }
    }
}

/// A typed n-dimensional array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorBlob {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "blob shape {shape:?} holds {n} elements, data has {}",
                data.len()
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::shape("too many dimensions"));
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[self.data.code() as u8, self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match &self.data {
            TensorData::U8(v) => w.write_all(v)?,
            TensorData::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            TensorData::F64(v) => {
                let mut buf = Vec::with_capacity(v.len() * 8);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    /// Reads one blob. A truncated stream or a bad header is a format error.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let trunc = |e: std::io::Error| Error::Format(format!("truncated tensor blob: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut hdr = [0u8; 2];
        r.read_exact(&mut hdr).map_err(trunc)?;
        let code = DTypeCode::from_u8(hdr[0])?;
        let ndim = hdr[1] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut d = [0u8; 4];
            r.read_exact(&mut d).map_err(trunc)?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * code.size()];
        r.read_exact(&mut raw).map_err(trunc)?;
        let data = match code {
            DTypeCode::U8 => TensorData::U8(raw),
            DTypeCode::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DTypeCode::F64 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            ),
        };
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        self.write_to(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f =
            std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        let blob = Self::read_from(&mut f)?;
        let mut rest = [0u8; 1];
        if f.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::Format(format!(
                "trailing bytes after tensor in {}",
                path.display()
            )));
        }
        Ok(blob)
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(v) => Ok(v.into_iter().map(f32::from).collect()),
            TensorData::F64(_) => Err(Error::Format("expected f32 blob, found f64".into())),
        }
    }
}
