//! Single-file model archive: a JSON header array followed by one raw array
//! per parameter (and optimizer moment) in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{ContainerError, DType, RawArray};
use crate::expert::{ExpertError, Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ExpertError),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("{0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, CheckpointError> {
        let bad = |m: &str| CheckpointError::Mismatch(format!("rng state: {m}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed is not hex"))?
            .try_into()
            .map_err(|_| bad("seed is not 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: u32,
    config: ModelConfig,
    step: u64,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    rng: Option<RngState>,
    meta: serde_json::Value,
}

/// Everything needed to resume training or run a frozen policy.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Option<AdamW<T>>,
    pub step: u64,
    pub rng: Option<RngState>,
    /// Free-form metadata (training config, action scaling, ...).
    pub meta: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Model<T>) -> Self {
        Self {
            model,
            optimizer: None,
            step: 0,
            rng: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let params = &self.model.params;
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            dtype: T::DTYPE_CODE,
            config: self.model.cfg.clone(),
            step: self.step,
            tensors: params
                .iter()
                .map(|(_, n, m)| TensorEntry {
                    name: n.to_string(),
                    shape: [m.rows, m.cols],
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.cfg.clone(),
                step: o.step,
            }),
            rng: self.rng.clone(),
            meta: self.meta.clone(),
        };
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(ContainerError::from)?);
            RawArray::from_bytes(serde_json::to_vec(&header)?).write_to(&mut w)?;
            for (_, _, m) in params.iter() {
                RawArray::from_mat(m).write_to(&mut w)?;
            }
            if let Some(o) = &self.optimizer {
                for m in o.m.iter().chain(&o.v) {
                    RawArray::from_mat(m).write_to(&mut w)?;
                }
            }
            w.flush().map_err(ContainerError::from)?;
        }
        std::fs::rename(&tmp, path).map_err(ContainerError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path).map_err(ContainerError::from)?);
        let head = RawArray::read_from(&mut r)?;
        if head.dtype != DType::U8 {
            return Err(CheckpointError::Mismatch(
                "first array is not a JSON header".into(),
            ));
        }
        let header: Header = serde_json::from_slice(&head.bytes)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        if header.dtype != T::DTYPE_CODE {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint dtype {} differs from requested {}",
                header.dtype,
                T::DTYPE_CODE
            )));
        }
        let mut model = Model::<T>::new(header.config.clone())?;
        if header.tensors.len() != model.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} tensors stored, model has {}",
                header.tensors.len(),
                model.params.len()
            )));
        }
        for t in &header.tensors {
            let m = RawArray::read_from(&mut r)?.to_mat::<T>()?;
            let id = model
                .params
                .id(&t.name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor {}", t.name)))?;
            if model.params.get(id).shape() != (t.shape[0], t.shape[1])
                || m.shape() != (t.shape[0], t.shape[1])
            {
                return Err(CheckpointError::Mismatch(format!("shape of {}", t.name)));
            }
            *model.params.get_mut(id) = m;
        }
        let optimizer = match header.optimizer {
            Some(oh) => {
                let mut o = AdamW::new(&model.params, oh.config);
                o.step = oh.step;
                for slot in o.m.iter_mut().chain(o.v.iter_mut()) {
                    let m = RawArray::read_from(&mut r)?.to_mat::<T>()?;
                    if m.shape() != slot.shape() {
                        return Err(CheckpointError::Mismatch("optimizer moment shape".into()));
                    }
                    *slot = m;
                }
                Some(o)
            }
            None => None,
        };
        Ok(Self {
            model,
            optimizer,
            step: header.step,
            rng: header.rng,
            meta: header.meta,
        })
    }
}
