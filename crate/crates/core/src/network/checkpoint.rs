//! Binary checkpoint files.
//!
//! Little-endian throughout: magic, version u16, growth rate u16, max groups
//! u16, input extents 3 x u32, parameter count u32, then for each parameter
//! its name (u16 length + UTF-8), rank u8, extents u32 each and f32 values.

use std::path::Path;

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LAMN";
pub const CHECKPOINT_VERSION: u16 = 1;

impl<T: Scalar> Network<T> {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 4 * self.params.count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&to_u16(c.growth_rate, "growth rate")?.to_le_bytes());
        out.extend_from_slice(&to_u16(c.max_groups, "group count")?.to_le_bytes());
        for &e in &c.input_shape {
            out.extend_from_slice(&to_u32(e, "input extent")?.to_le_bytes());
        }
        out.extend_from_slice(&to_u32(self.params.names.len(), "parameter count")?.to_le_bytes());
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            out.extend_from_slice(&to_u16(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&to_u32(d, "extent")?.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let growth_rate = r.u16()? as usize;
        let max_groups = r.u16()? as usize;
        let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let config = NetworkConfig { growth_rate, max_groups, input_shape, seed: 0 };
        let count = r.u32()? as usize;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("parameter name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.filter(|&n| n <= r.remaining() / 4).ok_or_else(|| {
                Error::format(format!("parameter {name} extends past the end of the file"))
            })?;
            let raw = r.take(4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let t = Tensor::from_vec(dims, data).map_err(|e| Error::format(e.to_string()))?;
            names.push(name);
            tensors.push(t);
        }
        if r.remaining() != 0 {
            return Err(Error::format(format!("{} trailing bytes after parameters", r.remaining())));
        }
        Network::from_parts(config, names, tensors).map_err(|e| match e {
            Error::Format(_) => e,
            other => Error::format(other.to_string()),
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    /// Load a checkpoint; the file supplies the configuration.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }

    /// Load a checkpoint and require it to match `expected` (seed aside).
    pub fn load_checkpoint_matching(path: impl AsRef<Path>, expected: &NetworkConfig) -> Result<Self> {
        let mut net = Self::load_checkpoint(path)?;
        let c = &net.config;
        if c.growth_rate != expected.growth_rate
            || c.max_groups != expected.max_groups
            || c.input_shape != expected.input_shape
        {
            return Err(Error::format(format!(
                "checkpoint has g={} groups={} input={:?}, expected g={} groups={} input={:?}",
                c.growth_rate,
                c.max_groups,
                c.input_shape,
                expected.growth_rate,
                expected.max_groups,
                expected.input_shape
            )));
        }
        net.config.seed = expected.seed;
        Ok(net)
    }
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::format(format!("{what} {v} does not fit in u16")))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(format!("{what} {v} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
