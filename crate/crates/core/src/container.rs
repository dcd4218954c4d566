//! `SEGT` binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..4    magic "SEGT"
//! 4       version (1)
//! 5       dtype: 0 = f32, 1 = u8, 2 = i32
//! 6       ndim
//! 7       padding (0)
//! 8..     ndim × u32 extents
//!         row-major payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

pub const MAGIC: &[u8; 4] = b"SEGT";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U8 = 1,
    I32 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U8 => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(DType::F32),
            1 => Ok(DType::U8),
            2 => Ok(DType::I32),
            other => Err(Error::Format(format!("unknown dtype byte {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::U8(_) => DType::U8,
            Payload::I32(_) => DType::I32,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::I32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    dims: Vec<u32>,
    payload: Payload,
}

impl TensorContainer {
    pub fn new(dims: Vec<u32>, payload: Payload) -> Result<Self> {
        if dims.len() > usize::from(u8::MAX) {
            return Err(Error::Format(format!("{} dimensions exceed the header limit", dims.len())));
        }
        let expected = dims.iter().map(|&d| d as usize).product::<usize>();
        if expected != payload.len() {
            return Err(Error::Format(format!(
                "extents {dims:?} need {expected} elements, payload has {}",
                payload.len()
            )));
        }
        Ok(Self { dims, payload })
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.payload.dtype();
        let mut out =
            Vec::with_capacity(HEADER_LEN + 4 * self.dims.len() + self.payload.len() * dtype.size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(dtype as u8);
        out.push(self.dims.len() as u8);
        out.push(0);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing SEGT magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_byte(bytes[5])?;
        let ndim = usize::from(bytes[6]);
        let body = &bytes[HEADER_LEN..];
        if body.len() < 4 * ndim {
            return Err(Error::Format("truncated extents".into()));
        }
        let dims: Vec<u32> = body[..4 * ndim]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::Format("extent product overflows".into()))?;
        let payload = &body[4 * ndim..];
        if Some(payload.len()) != count.checked_mul(dtype.size()) {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {} × {}",
                payload.len(),
                count,
                dtype.size()
            )));
        }
        let payload = match dtype {
            DType::F32 => Payload::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::U8 => Payload::U8(payload.to_vec()),
            DType::I32 => Payload::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
        };
        Self::new(dims, payload)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self.payload {
            Payload::F32(v) => Tensor::new(self.dims.iter().map(|&d| d as usize).collect(), v),
            other => Err(Error::Format(format!("expected f32 payload, found {:?}", other.dtype()))),
        }
    }

    pub fn into_label_map(self) -> Result<LabelMap> {
        match (self.dims.as_slice(), self.payload) {
            (&[h, w], Payload::U8(v)) => LabelMap::new(h as usize, w as usize, v),
            (dims, p) => Err(Error::Format(format!(
                "expected a 2-D u8 label map, found {:?} with dims {dims:?}",
                p.dtype()
            ))),
        }
    }
}

fn extents(dims: &[usize]) -> Result<Vec<u32>> {
    dims.iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32"))))
        .collect()
}

impl TryFrom<&Tensor> for TensorContainer {
    type Error = Error;

    fn try_from(t: &Tensor) -> Result<Self> {
        Self::new(extents(t.dims())?, Payload::F32(t.data().to_vec()))
    }
}

impl TryFrom<&LabelMap> for TensorContainer {
    type Error = Error;

    fn try_from(l: &LabelMap) -> Result<Self> {
        Self::new(extents(&[l.height(), l.width()])?, Payload::U8(l.data().to_vec()))
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    TensorContainer::try_from(t)?.write(path)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    TensorContainer::read(path)?.into_tensor()
}

pub fn write_labels(path: &Path, l: &LabelMap) -> Result<()> {
    TensorContainer::try_from(l)?.write(path)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    TensorContainer::read(path)?.into_label_map()
}
