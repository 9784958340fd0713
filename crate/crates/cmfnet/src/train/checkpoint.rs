//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "CMFN" · u32 version · u32 config-JSON length · config JSON ·
//!   u64 step · u64 adam step · 32-byte RNG seed · u128 RNG word position ·
//!   u32 tensor count · tensors · u32 optimizer-tensor count · tensors
//! where each tensor is: u32 name length · name · u32 rank · u32 dims ·
//! raw f32 data. Optimizer moments are stored as tensors named "m.<param>"
//! and "v.<param>". A save → load → save round trip is byte-identical.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::model::{CmfnetConfig, CmfnetParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CMFN";
const VERSION: u32 = 1;

type NamedArray = (String, Vec<usize>, Vec<f32>);

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: CmfnetConfig,
    pub step: u64,
    pub adam_t: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub params: Vec<NamedArray>,
    pub opt: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_state(
        config: &CmfnetConfig,
        params: &CmfnetParams<f32>,
        adam: &AdamState,
        rng: &ChaCha8Rng,
        step: u64,
    ) -> Self {
        let named = params.named();
        let mut opt = Vec::with_capacity(2 * named.len());
        for (i, (name, t)) in named.iter().enumerate() {
            opt.push((format!("m.{name}"), t.shape().to_vec(), adam.m[i].clone()));
            opt.push((format!("v.{name}"), t.shape().to_vec(), adam.v[i].clone()));
        }
        Checkpoint {
            config: config.clone(),
            step,
            adam_t: adam.t,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            params: named
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec(), t.data().to_vec()))
                .collect(),
            opt,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| Error::InvalidConfig(format!("config serialization: {e}")))?;
        buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(config_json.as_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.adam_t.to_le_bytes());
        buf.extend_from_slice(&self.rng_seed);
        buf.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        for group in [&self.params, &self.opt] {
            buf.extend_from_slice(&(group.len() as u32).to_le_bytes());
            for (name, shape, data) in group {
                buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
                buf.extend_from_slice(name.as_bytes());
                buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                for &d in shape {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { data: &data, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.err_at(0, "bad magic (not a checkpoint file)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err_at(4, &format!("unsupported version {version}")));
        }
        let config_len = r.u32("config length")? as usize;
        let config_at = r.pos;
        let config_bytes = r.take(config_len, "config JSON")?;
        let config: CmfnetConfig = serde_json::from_slice(config_bytes)
            .map_err(|e| Error::CheckpointParse { offset: config_at, what: format!("config JSON: {e}") })?;
        let step = r.u64("step")?;
        let adam_t = r.u64("adam step")?;
        let rng_seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
        let rng_word_pos = u128::from_le_bytes(r.take(16, "rng word position")?.try_into().unwrap());
        let mut groups: Vec<Vec<NamedArray>> = Vec::with_capacity(2);
        for what in ["parameter", "optimizer"] {
            let count = r.u32(&format!("{what} tensor count"))? as usize;
            let mut group = Vec::with_capacity(count);
            for i in 0..count {
                let name_len = r.u32(&format!("{what} tensor {i} name length"))? as usize;
                let name_at = r.pos;
                let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                    .map_err(|_| Error::CheckpointParse { offset: name_at, what: "tensor name is not UTF-8".into() })?;
                let rank = r.u32(&format!("rank of {name}"))? as usize;
                if rank > 4 {
                    return Err(r.err_at(r.pos - 4, &format!("rank {rank} of {name} exceeds 4")));
                }
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u32(&format!("dims of {name}"))? as usize);
                }
                let numel: usize = shape.iter().product();
                let raw = r.take(4 * numel, &format!("data of {name}"))?;
                let values = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                group.push((name, shape, values));
            }
            groups.push(group);
        }
        let opt = groups.pop().unwrap();
        let params = groups.pop().unwrap();
        if r.pos != data.len() {
            return Err(r.err_at(r.pos, "trailing bytes after checkpoint payload"));
        }
        Ok(Checkpoint { config, step, adam_t, rng_seed, rng_word_pos, params, opt })
    }

    /// Instantiate model parameters, verifying every name and shape against
    /// the embedded configuration.
    pub fn build_params(&self) -> Result<CmfnetParams<f32>> {
        let mut params = CmfnetParams::<f32>::zeros(&self.config)?;
        let mut it = self.params.iter();
        let mut status: Result<()> = Ok(());
        params.visit_mut(&mut |name, tensor| {
            if status.is_err() {
                return;
            }
            match it.next() {
                Some((got_name, shape, data)) if got_name == name && shape[..] == *tensor.shape() => {
                    *tensor = Tensor::param(shape, data.clone()).unwrap();
                }
                Some((got_name, _, _)) => {
                    status = Err(Error::CheckpointMismatch(format!("expected {name}, found {got_name}")));
                }
                None => status = Err(Error::CheckpointMismatch(name.to_string())),
            }
        });
        status?;
        if let Some((extra, _, _)) = it.next() {
            return Err(Error::CheckpointMismatch(format!("unexpected extra tensor {extra}")));
        }
        Ok(params)
    }

    /// Restore the optimizer moments (aligned to the parameter visit order).
    pub fn build_adam(&self, params: &CmfnetParams<f32>) -> Result<AdamState> {
        let mut adam = AdamState::new(params);
        adam.t = self.adam_t;
        let named = params.named();
        if self.opt.len() != 2 * named.len() {
            return Err(Error::CheckpointMismatch(format!(
                "optimizer state holds {} tensors for {} parameters",
                self.opt.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.iter().enumerate() {
            for (k, slot) in [(2 * i, 0), (2 * i + 1, 1)] {
                let (got, shape, data) = &self.opt[k];
                let want = if slot == 0 { format!("m.{name}") } else { format!("v.{name}") };
                if *got != want || shape[..] != *t.shape() {
                    return Err(Error::CheckpointMismatch(format!("expected {want}, found {got}")));
                }
                if slot == 0 {
                    adam.m[i] = data.clone();
                } else {
                    adam.v[i] = data.clone();
                }
            }
        }
        Ok(adam)
    }

    /// RNG restored to the exact stream position at save time.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, what: &str) -> Error {
        Error::CheckpointParse { offset, what: what.to_string() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.err_at(self.pos, &format!("truncated while reading {what}")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
