//! Single-file checkpoints: magic, format version, a JSON header and a
//! little-endian f32 payload whose SHA-256 is recorded in the header.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Vocab;
use crate::model::{Generator, Model, ModelConfig};
use crate::nn::{Adam, ParamStore};
use crate::trainer::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"SGEDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub step: u64,
    pub adam_g_step: u64,
    pub adam_d_step: u64,
    pub last_val_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub seed: u64,
    pub training: Option<TrainingState>,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

struct Writer {
    tensors: Vec<TensorEntry>,
    payload: Vec<f32>,
}

impl Writer {
    fn push(&mut self, name: String, t: &Tensor) -> Result<()> {
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        self.tensors.push(TensorEntry {
            name,
            shape: t.dims().to_vec(),
            offset: self.payload.len(),
        });
        self.payload.extend(data);
        Ok(())
    }

    fn params(&mut self, prefix: &str, ps: &ParamStore) -> Result<()> {
        for (name, var) in ps.iter() {
            self.push(format!("{prefix}/{name}"), var.as_tensor())?;
        }
        Ok(())
    }

    fn adam(&mut self, prefix: &str, adam: &Adam) -> Result<()> {
        for (name, (m, v)) in adam.moments() {
            self.push(format!("{prefix}.m/{name}"), m)?;
            self.push(format!("{prefix}.v/{name}"), v)?;
        }
        Ok(())
    }
}

fn write_file(path: &Path, mut header: Header, payload: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(payload.len() * 4);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    header.payload_sha256 = hex_digest(&bytes);
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&bytes)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Checkpoint {
    pub header: Header,
    payload: Vec<f32>,
}

impl Checkpoint {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Integrity("file is truncated".into());
        if bytes.len() < 20 {
            return Err(truncated());
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(truncated)?;
        if body.len() < hlen {
            return Err(truncated());
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
        let raw = &body[hlen..];
        let expected: usize = header
            .tensors
            .iter()
            .map(|t| t.offset + t.shape.iter().product::<usize>())
            .max()
            .unwrap_or(0);
        if raw.len() != expected * 4 {
            return Err(Error::Integrity(format!(
                "payload has {} bytes, header describes {}",
                raw.len(),
                expected * 4
            )));
        }
        if hex_digest(raw) != header.payload_sha256 {
            return Err(Error::Integrity("payload checksum mismatch".into()));
        }
        let payload = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { header, payload })
    }

    fn entry(&self, name: &str) -> Result<(&TensorEntry, &[f32])> {
        let e = self
            .header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Shape(format!("checkpoint has no tensor {name}")))?;
        let n: usize = e.shape.iter().product();
        Ok((e, &self.payload[e.offset..e.offset + n]))
    }

    fn restore(&self, prefix: &str, ps: &ParamStore) -> Result<()> {
        let stored = self.header.tensors.iter().filter(|t| t.name.starts_with(&format!("{prefix}/"))).count();
        if stored != ps.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {stored} {prefix} tensors, model has {}",
                ps.len()
            )));
        }
        for (name, _) in ps.iter() {
            let (e, data) = self.entry(&format!("{prefix}/{name}"))?;
            ps.assign(name, &e.shape, data)?;
        }
        Ok(())
    }

    fn restore_adam(&self, prefix: &str, adam: &mut Adam, dtype: DType) -> Result<()> {
        let names: Vec<String> = adam.moments().map(|(n, _)| n.clone()).collect();
        for name in names {
            let load = |kind: &str| -> Result<Tensor> {
                let (e, data) = self.entry(&format!("{prefix}.{kind}/{name}"))?;
                Ok(Tensor::from_slice(data, e.shape.as_slice(), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
            };
            adam.set_moment(&name, load("m")?, load("v")?)?;
        }
        Ok(())
    }

    /// Rebuild the full model. The vocabulary of the caller, when given,
    /// must match the stored one.
    pub fn model(&self, dtype: DType) -> Result<Model> {
        let model = Model::new(self.header.model.clone(), self.header.seed, dtype)?;
        self.restore("g", &model.gen_params)?;
        self.restore("d", &model.disc_params)?;
        Ok(model)
    }
}

fn header(model: &Model, vocab: &Vocab, seed: u64, training: Option<TrainingState>) -> Result<Header> {
    if vocab.sizes() != model.cfg.vocab {
        return Err(Error::Shape("vocabulary does not match the model".into()));
    }
    Ok(Header {
        model: model.cfg.clone(),
        vocab: vocab.clone(),
        seed,
        training,
        tensors: Vec::new(),
        payload_sha256: String::new(),
    })
}

/// Weights only.
pub fn save_model(path: impl AsRef<Path>, model: &Model, vocab: &Vocab, seed: u64) -> Result<()> {
    let mut w = Writer {
        tensors: Vec::new(),
        payload: Vec::new(),
    };
    w.params("g", &model.gen_params)?;
    w.params("d", &model.disc_params)?;
    let mut h = header(model, vocab, seed, None)?;
    h.tensors = w.tensors;
    write_file(path.as_ref(), h, &w.payload)
}

/// Weights plus everything needed to continue training.
pub fn save_trainer(path: impl AsRef<Path>, t: &Trainer) -> Result<()> {
    let mut w = Writer {
        tensors: Vec::new(),
        payload: Vec::new(),
    };
    w.params("g", &t.model.gen_params)?;
    w.params("d", &t.model.disc_params)?;
    w.adam("adam_g", &t.adam_g)?;
    w.adam("adam_d", &t.adam_d)?;
    let state = TrainingState {
        config: t.cfg.clone(),
        step: t.step,
        adam_g_step: t.adam_g.step,
        adam_d_step: t.adam_d.step,
        last_val_mae: t.last_val_mae,
    };
    let mut h = header(&t.model, &t.vocab, t.cfg.seed, Some(state))?;
    h.tensors = w.tensors;
    write_file(path.as_ref(), h, &w.payload)
}

pub fn load_trainer(path: impl AsRef<Path>) -> Result<Trainer> {
    let ck = Checkpoint::read(path)?;
    let state = ck
        .header
        .training
        .clone()
        .ok_or_else(|| Error::Config("checkpoint has no training state".into()))?;
    let mut t = Trainer::with_model_config(state.config.clone(), ck.header.model.clone(), ck.header.vocab.clone(), DType::F32)?;
    ck.restore("g", &t.model.gen_params)?;
    ck.restore("d", &t.model.disc_params)?;
    ck.restore_adam("adam_g", &mut t.adam_g, DType::F32)?;
    ck.restore_adam("adam_d", &mut t.adam_d, DType::F32)?;
    t.adam_g.step = state.adam_g_step;
    t.adam_d.step = state.adam_d_step;
    t.step = state.step;
    t.last_val_mae = state.last_val_mae;
    Ok(t)
}

/// Generator and vocabulary for inference. With `expected` set, a
/// checkpoint trained on another vocabulary is rejected.
pub fn load_generator(path: impl AsRef<Path>, expected: Option<&Vocab>) -> Result<(Generator, Vocab)> {
    let ck = Checkpoint::read(path)?;
    if let Some(v) = expected {
        if *v != ck.header.vocab {
            return Err(Error::Shape(format!(
                "checkpoint vocabulary has {} objects and {} predicates, expected {} and {}",
                ck.header.vocab.objects.len(),
                ck.header.vocab.predicates.len(),
                v.objects.len(),
                v.predicates.len()
            )));
        }
    }
    let model = ck.model(DType::F32)?;
    Ok((model.generator, ck.header.vocab))
}
