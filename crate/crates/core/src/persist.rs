//! Checkpoint files.
//!
//! Layout (little-endian): magic `MMCK`, version u32, model-config TOML and
//! train-config TOML (u32 length + UTF-8 each), parameter count u32, then per
//! parameter its name, rank, dims and `f32` values; then the optimizer step
//! and update counter (u64), the first and second moments as `f32` in
//! parameter order, and the rng seed and stream (u64).

use std::io::{Read, Write};
use std::path::Path;

use crate::data::{get_f32s, get_u32, truncated};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{Adam, TrainConfig, Trainer};

const MAGIC: &[u8; 4] = b"MMCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: Vec<(String, Tensor)>,
    pub adam_step: u64,
    pub update: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub rng_seed: u64,
    pub rng_stream: u64,
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn put_u32(w: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(w: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f32s(w: &mut Vec<u8>, t: &Tensor) {
    for &x in t.data() {
        w.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

fn toml_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("checkpoint config: {e}"))
}

impl Checkpoint {
    /// Snapshot of a model with fresh optimizer state.
    pub fn from_model(model: &Model, train_config: &TrainConfig) -> Self {
        let adam = Adam::new(train_config.adam.clone(), &model.store);
        Self::build(model, train_config, &adam, 0)
    }

    pub fn from_trainer(trainer: &Trainer) -> Self {
        Self::build(&trainer.model, &trainer.config, &trainer.optimizer, trainer.update)
    }

    fn build(model: &Model, train_config: &TrainConfig, adam: &Adam, update: u64) -> Self {
        Self {
            model_config: model.config.clone(),
            train_config: train_config.clone(),
            params: model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            adam_step: adam.step,
            update,
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
            rng_seed: train_config.seed,
            rng_stream: 0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION as usize)?;
        put_str(&mut w, &toml::to_string(&self.model_config).map_err(toml_err)?)?;
        put_str(&mut w, &toml::to_string(&self.train_config).map_err(toml_err)?)?;
        put_u32(&mut w, self.params.len())?;
        for (name, t) in &self.params {
            put_str(&mut w, name)?;
            put_u32(&mut w, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut w, d)?;
            }
            put_f32s(&mut w, t);
        }
        w.extend_from_slice(&self.adam_step.to_le_bytes());
        w.extend_from_slice(&self.update.to_le_bytes());
        if self.adam_m.len() != self.params.len() || self.adam_v.len() != self.params.len() {
            return Err(Error::Format("optimizer moments do not match the parameters".into()));
        }
        for (m, (_, p)) in self.adam_m.iter().zip(&self.params) {
            if m.shape() != p.shape() {
                return Err(Error::shape("checkpoint moments", m.shape(), p.shape()));
            }
            put_f32s(&mut w, m);
        }
        for (v, (_, p)) in self.adam_v.iter().zip(&self.params) {
            if v.shape() != p.shape() {
                return Err(Error::shape("checkpoint moments", v.shape(), p.shape()));
            }
            put_f32s(&mut w, v);
        }
        w.extend_from_slice(&self.rng_seed.to_le_bytes());
        w.extend_from_slice(&self.rng_stream.to_le_bytes());
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let r = &mut &bytes[..];
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("not a checkpoint (magic {magic:?})")));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let model_config: ModelConfig = toml::from_str(&get_str(r)?).map_err(toml_err)?;
        let train_config: TrainConfig = toml::from_str(&get_str(r)?).map_err(toml_err)?;
        let n = get_u32(r)? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = get_str(r)?;
            let rank = get_u32(r)? as usize;
            let shape = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            params.push((name, Tensor::new(shape, get_f32s(r, numel)?)?));
        }
        let adam_step = get_u64(r)?;
        let update = get_u64(r)?;
        let moments = |r: &mut &[u8]| -> Result<Vec<Tensor>> {
            params
                .iter()
                .map(|(_, p)| Tensor::new(p.shape().to_vec(), get_f32s(r, p.numel())?))
                .collect()
        };
        let adam_m = moments(r)?;
        let adam_v = moments(r)?;
        let rng_seed = get_u64(r)?;
        let rng_stream = get_u64(r)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Self {
            model_config,
            train_config,
            params,
            adam_step,
            update,
            adam_m,
            adam_v,
            rng_seed,
            rng_stream,
        })
    }

    /// Model and train configs as TOML, in file order.
    pub fn config_text(&self) -> Result<String> {
        let model = toml::to_string(&self.model_config).map_err(toml_err)?;
        let train = toml::to_string(&self.train_config).map_err(toml_err)?;
        Ok(format!("{model}\n{train}"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Errors unless the stored model config equals `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model_config != expected {
            return Err(Error::Config(format!(
                "checkpoint model config differs from the provided one\ncheckpoint:\n{}\nprovided:\n{}",
                toml::to_string(&self.model_config).unwrap_or_default(),
                toml::to_string(expected).unwrap_or_default()
            )));
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_config.clone(), 0)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            model.store.set_value(id, value.clone())?;
        }
        Ok(model)
    }

    /// Restores a trainer; `config` replaces the stored train config.
    pub fn to_trainer(&self, config: TrainConfig) -> Result<Trainer> {
        let model = self.to_model()?;
        let mut adam = Adam::new(config.adam.clone(), &model.store);
        adam.step = self.adam_step;
        let order: Vec<usize> = model
            .store
            .iter()
            .map(|(_, p)| self.params.iter().position(|(n, _)| n == &p.name).expect("matched above"))
            .collect();
        adam.m = order.iter().map(|&i| self.adam_m[i].clone()).collect();
        adam.v = order.iter().map(|&i| self.adam_v[i].clone()).collect();
        Trainer::resume(model, config, adam, self.update)
    }
}
