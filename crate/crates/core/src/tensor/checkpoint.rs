//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "NCKP"            4 bytes magic
//! version           u32
//! model kind        u8   (0 = deglow, 1 = dehaze)
//! feature width     u32
//! recurrences       u32
//! tied              u8   (1 = one parameter set shared by every recurrence)
//! parameter count   u32
//! per parameter:
//!   name length     u32, then UTF-8 name bytes
//!   rank            u32, then rank x u32 dims
//!   data            prod(dims) x f32
//! ```

use std::path::Path;

use super::{ParamStore, Shape, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    DeGlow,
    DeHaze,
}

/// Enough to rebuild the parameter layout before loading values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub kind: ModelKind,
    pub features: u32,
    pub recurrences: u32,
    pub tied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchDescriptor,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(arch: ArchDescriptor, store: &ParamStore) -> Self {
        Self {
            arch,
            tensors: store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Copies values into `store` by name; every stored parameter must be
    /// present with the same shape.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {} in checkpoint, {} in model",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(match self.arch.kind {
            ModelKind::DeGlow => 0,
            ModelKind::DeHaze => 1,
        });
        out.extend_from_slice(&self.arch.features.to_le_bytes());
        out.extend_from_slice(&self.arch.recurrences.to_le_bytes());
        out.push(self.arch.tied as u8);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.shape().dims();
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not an NCKP file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = match r.u8()? {
            0 => ModelKind::DeGlow,
            1 => ModelKind::DeHaze,
            k => return Err(Error::Checkpoint(format!("unknown model kind {k}"))),
        };
        let features = r.u32()?;
        let recurrences = r.u32()?;
        let tied = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Checkpoint(format!("bad tied flag {v}"))),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            if rank != 4 {
                return Err(Error::Checkpoint(format!(
                    "`{name}`: rank {rank}, expected 4"
                )));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let raw = r.take(shape.numel().checked_mul(4).ok_or_else(|| {
                Error::Checkpoint(format!("`{name}`: shape {shape} overflows"))
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            arch: ArchDescriptor {
                kind,
                features,
                recurrences,
                tied,
            },
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(reason) => Error::format(path, reason),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
