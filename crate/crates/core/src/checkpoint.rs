//! Binary checkpoints: a header, the run configuration as TOML text, a step
//! counter and named little-endian parameter blobs.
//!
//! Layout: `MPGC`, u16 version, u8 precision (32 or 64), u64 step, u32
//! config length, config bytes, u32 record count, then per record: u32 name
//! length, name, u32 rank, u32 per dimension, values.

use std::path::Path;

use crate::numcore::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MPGC";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

impl Precision {
    pub fn bits(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(Error::Config(format!("precision must be 32 or 64, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub precision: Precision,
    pub step: u64,
    /// Serialized run configuration.
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint("length exceeds u32".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.precision.bits());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_len(&mut out, self.config.len())?;
        out.extend_from_slice(self.config.as_bytes());
        put_len(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.rank())?;
            for &d in t.shape() {
                put_len(&mut out, d)?;
            }
            match self.precision {
                Precision::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Precision::F32 => {
                    for &v in t.data() {
                        let narrow = v as f32;
                        if f64::from(narrow).to_bits() != v.to_bits() && !v.is_nan() {
                            return Err(Error::Checkpoint(format!(
                                "{name} holds values not representable in 32 bits"
                            )));
                        }
                        out.extend_from_slice(&narrow.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let precision = Precision::from_bits(u32::from(r.array::<1>()?[0]))
            .map_err(|_| Error::Checkpoint("bad precision byte".into()))?;
        let step = u64::from_le_bytes(r.array()?);
        let config = r.string()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = match precision {
                Precision::F64 => (0..len)
                    .map(|_| r.array::<8>().map(f64::from_le_bytes))
                    .collect::<Result<Vec<_>>>()?,
                Precision::F32 => (0..len)
                    .map(|_| r.array::<4>().map(|b| f64::from(f32::from_le_bytes(b))))
                    .collect::<Result<Vec<_>>>()?,
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            precision,
            step,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
