//! Versioned binary checkpoint container.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "TADC", u16 version (= 1)
//! u32 config_len, config JSON (ModelConfig)
//! u64 step, u64 epoch
//! u32 param_count
//!   per param: u32 name_len, name bytes, u8 ndim, u32 dims..., f64 values
//! u8 has_optimizer
//!   if 1: u64 adam_t, then per param: f64 m values, f64 v values
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};

const MAGIC: &[u8; 4] = b"TADC";
const VERSION: u16 = 1;

pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub epoch: u64,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    optimizer: Option<&Adam>,
    step: u64,
    epoch: u64,
) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.cfg)?;
    bytes.extend_from_slice(&(config.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&config);
    bytes.extend_from_slice(&step.to_le_bytes());
    bytes.extend_from_slice(&epoch.to_le_bytes());
    bytes.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, tensor) in model.store.iter() {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(tensor.shape().len() as u8);
        for d in tensor.shape() {
            bytes.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    match optimizer {
        Some(adam) => {
            bytes.push(1);
            bytes.extend_from_slice(&adam.t.to_le_bytes());
            for t in adam.m.iter().chain(adam.v.iter()) {
                for v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        None => bytes.push(0),
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.bytes.len(), "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingInput(format!(
            "checkpoint {}",
            path.display()
        )));
    }
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic (expected TADC)"));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::format(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let config_len = cur.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(config_len)?)?;
    let step = cur.u64()?;
    let epoch = cur.u64()?;
    let param_count = cur.u32()? as usize;
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::format(cur.pos, "parameter name not utf-8"))?;
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = cur.f64_vec(numel)?;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::format(cur.pos, format!("parameter {name}: {e}")))?;
        params.push((name, tensor));
    }
    let has_opt = cur.take(1)?[0];
    let optimizer = if has_opt == 1 {
        let t = cur.u64()?;
        let mut m = Vec::with_capacity(param_count);
        for (_, p) in &params {
            m.push(Tensor::new(p.shape().to_vec(), cur.f64_vec(p.numel())?).unwrap());
        }
        let mut v = Vec::with_capacity(param_count);
        for (_, p) in &params {
            v.push(Tensor::new(p.shape().to_vec(), cur.f64_vec(p.numel())?).unwrap());
        }
        Some(OptimizerState { t, m, v })
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos, "trailing bytes in checkpoint"));
    }
    Ok(Checkpoint {
        config,
        step,
        epoch,
        params,
        optimizer,
    })
}

/// Rebuild a model (and optionally its optimizer) from a checkpoint.
pub fn restore_model(ckpt: &Checkpoint, adam_cfg: AdamConfig) -> Result<(Model, Adam)> {
    let mut model = Model::new(ckpt.config.clone(), 0)?;
    if ckpt.params.len() != model.store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model wants {}",
            ckpt.params.len(),
            model.store.len()
        )));
    }
    for (name, tensor) in &ckpt.params {
        model.store.restore(name, tensor.clone())?;
    }
    let mut adam = Adam::new(&model.store, adam_cfg);
    if let Some(state) = &ckpt.optimizer {
        adam.t = state.t;
        adam.m = state.m.clone();
        adam.v = state.v.clone();
    }
    Ok((model, adam))
}
