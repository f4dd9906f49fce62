//! Binary checkpoint container.
//!
//! Layout, little-endian:
//!
//! ```text
//! "SKCK" u32 version
//! str meta                      JSON run description
//! u64 step
//! u64 n  { str name, tensor }               parameters
//! u64 n  { str name, f64 momentum, tensor mean, tensor var }   BatchNorm buffers
//! f64 lr f64 beta1 f64 beta2 f64 eps u64 steps
//! u64 n  { str name, u64 t, tensor m, tensor v }               Adam moments
//! ```
//!
//! Strings are a u32 byte length then UTF-8; tensors are a rank byte, u64
//! extents and f64 values. Decoding round-trips bit for bit.

use std::path::Path;

use crate::autodiff::RunningStats;
use crate::codec::{write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::Buffers;
use crate::optim::{AdamConfig, AdamState, Moments};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"SKCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub step: u64,
    pub params: ParamStore,
    pub buffers: Buffers,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.meta);
        w.u64(self.step);
        w.u64(self.params.len() as u64);
        for (name, t) in self.params.iter() {
            w.str(name);
            w.tensor(t);
        }
        w.u64(self.buffers.len() as u64);
        for (name, s) in &self.buffers {
            w.str(name);
            w.f64(s.momentum);
            w.u64(s.mean.len() as u64);
            for v in s.mean.iter().chain(&s.var) {
                w.f64(*v);
            }
        }
        let c = self.adam.config;
        for v in [c.lr, c.beta1, c.beta2, c.eps] {
            w.f64(v);
        }
        w.u64(self.adam.steps);
        w.u64(self.adam.moments.len() as u64);
        for (name, m) in &self.adam.moments {
            w.str(name);
            w.u64(m.t);
            w.tensor(&m.m);
            w.tensor(&m.v);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("checkpoint", bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let meta = r.str()?;
        let step = r.u64()?;
        let mut params = ParamStore::new();
        for _ in 0..r.count(13)? {
            let name = r.str()?;
            let t = r.tensor()?;
            if params.get(&name).is_some() {
                return Err(r.err(format!("duplicate parameter {name}")));
            }
            params.insert(name, t);
        }
        let mut buffers = Buffers::new();
        for _ in 0..r.count(20)? {
            let name = r.str()?;
            let momentum = r.f64()?;
            let c = r.count(16)?;
            let mean = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let var = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if buffers.insert(name.clone(), RunningStats { mean, var, momentum }).is_some() {
                return Err(r.err(format!("duplicate buffer {name}")));
            }
        }
        let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let mut adam = AdamState::new(config);
        adam.steps = r.u64()?;
        for _ in 0..r.count(30)? {
            let name = r.str()?;
            let t = r.u64()?;
            let m = r.tensor()?;
            let v = r.tensor()?;
            if m.shape() != v.shape() {
                return Err(r.err(format!("moment shapes differ for {name}")));
            }
            if adam.moments.insert(name.clone(), Moments { m, v, t }).is_some() {
                return Err(r.err(format!("duplicate moments for {name}")));
            }
        }
        r.finish()?;
        Ok(Checkpoint { meta, step, params, buffers, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
