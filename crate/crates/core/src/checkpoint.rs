//! Versioned binary checkpoints: configuration, step counter, parameters and
//! optimizer moments.
//!
//! Layout (little endian):
//!
//! ```text
//! "SSCK" | u32 version = 1 | u32 dtype | u64 step | u32 len, config text
//! u32 n_params, then per parameter: u32 len, name | u32 ndim | u64 dims.. | values
//! u64 optimizer step | first moments of every parameter | second moments
//! ```
//!
//! Randomness during training is keyed by `(seed, step)`, so the step counter
//! is the complete generator state.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub step: u64,
    pub store: ParamStore<T>,
    pub opt: AdamW<T>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated checkpoint: {what} needs {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn values<T: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let w = std::mem::size_of::<T>();
        let len = n
            .checked_mul(w)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what}: size overflow")))?;
        Ok(self.take(len, what)?.chunks_exact(w).map(T::from_le_chunk).collect())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::format(at as u64, format!("{what}: invalid UTF-8")))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: &Model, store: &ParamStore<T>, opt: &AdamW<T>, step: u64) -> Self {
        Self {
            config: model.config.clone(),
            step,
            store: store.clone(),
            opt: opt.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(T::DTYPE.code().to_le_bytes());
        out.extend(self.step.to_le_bytes());
        let cfg = self.config.to_text();
        out.extend((cfg.len() as u32).to_le_bytes());
        out.extend(cfg.as_bytes());
        out.extend((self.store.len() as u32).to_le_bytes());
        for id in self.store.ids() {
            let name = self.store.name(id);
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            let t = self.store.get(id);
            out.extend((t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            out.extend(T::to_le_bytes_vec(t.data()));
        }
        out.extend(self.opt.step.to_le_bytes());
        for m in self.opt.m.iter().chain(&self.opt.v) {
            out.extend(T::to_le_bytes_vec(m));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let dtype = r.u32("dtype")?;
        if dtype != T::DTYPE.code() {
            return Err(Error::format(
                8,
                format!("dtype code {dtype}, expected {}", T::DTYPE.code()),
            ));
        }
        let step = r.u64("step")?;
        let config = ModelConfig::parse(&r.string("config")?)?;
        let n = r.u32("parameter count")? as usize;
        let mut store = ParamStore::new(config.seed);
        for _ in 0..n {
            let name = r.string("parameter name")?;
            let ndim = r.u32("rank")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64("dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let at = r.pos as u64;
            let numel = numel.ok_or_else(|| Error::format(at, format!("{name}: shape overflow")))?;
            let data = r.values::<T>(numel, &name)?;
            store.add(name, Tensor::new(shape, data)?)?;
        }
        let mut opt = AdamW::new(config.optimizer(), &store);
        opt.step = r.u64("optimizer step")?;
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).numel()).collect();
        for (i, &s) in sizes.iter().enumerate() {
            opt.m[i] = r.values(s, "first moment")?;
        }
        for (i, &s) in sizes.iter().enumerate() {
            opt.v[i] = r.values(s, "second moment")?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos as u64,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Self {
            config,
            step,
            store,
            opt,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model and checks that the stored parameters match its layout.
    pub fn model(&self) -> Result<Model> {
        let (model, fresh) = Model::build::<T>(self.config.clone())?;
        if fresh.len() != self.store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model has {}",
                self.store.len(),
                fresh.len()
            )));
        }
        for id in fresh.ids() {
            let (a, b) = (fresh.get(id), self.store.get(id));
            if fresh.name(id) != self.store.name(id) || a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    self.store.name(id),
                    b.shape(),
                    fresh.name(id),
                    a.shape()
                )));
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut cfg = ModelConfig::desk();
        cfg.channels = 4;
        cfg.encoder_widths = vec![4, 4];
        cfg.unet_widths = [4, 4, 4];
        cfg.occ_channels = 2;
        let (model, store) = Model::build::<f32>(cfg).unwrap();
        let mut opt = AdamW::new(model.config.optimizer(), &store);
        opt.step = 3;
        opt.m[0][0] = 0.25;
        opt.v[1][0] = 1.5;
        Checkpoint::new(&model, &store, &opt, 7)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let b = c.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), b);
        back.model().unwrap();
    }

    #[test]
    fn damage_is_reported() {
        let b = sample().to_bytes();
        for cut in [3, 20, b.len() / 2, b.len() - 1] {
            let e = Checkpoint::<f32>::from_bytes(&b[..cut]).unwrap_err();
            assert!(e.is_format_error(), "{e}");
            assert!(e.to_string().contains(&cut.to_string()));
        }
        let mut v = b.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&v), Err(Error::Version { found: 9, .. })));
        assert!(Checkpoint::<f64>::from_bytes(&b).unwrap_err().is_format_error());
        let mut long = b.clone();
        long.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&long).unwrap_err().is_format_error());
    }
}
