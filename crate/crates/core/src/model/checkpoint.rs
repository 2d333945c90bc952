//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "LPFCKPT\0" | version u32 | dtype u8
//! config text (u32 length + UTF-8 key = value lines)
//! epoch u64
//! rng: seed [32 bytes] | stream u64 | word position u128
//! parameter count u32, then per parameter: name (u32 length + UTF-8),
//!     rank u32, extents u64 × rank, payload
//! velocity count u32 (0 or the parameter count), then per velocity:
//!     rank u32, extents, payload
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{LaplacianFormer, ModelConfig};
use crate::config::KeyValues;
use crate::data::tensor_file::{encode_tensor_body, put_string, Reader};
use crate::error::{Error, Result};
use crate::numerics::{DType, Float, Tensor};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"LPFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Float = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Optimizer momentum buffers in parameter order; empty when absent.
    pub velocities: Vec<Tensor<T>>,
    pub epoch: u64,
    pub rng: RngState,
}

impl<T: Float> Checkpoint<T> {
    pub fn from_model(model: &LaplacianFormer<T>) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
            velocities: Vec::new(),
            epoch: 0,
            rng: RngState::default(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(T::DTYPE.code());
        put_string(&mut buf, &self.config.to_kv().to_string());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.rng.seed);
        buf.extend_from_slice(&self.rng.stream.to_le_bytes());
        buf.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_string(&mut buf, name);
            encode_tensor_body(&mut buf, t);
        }
        buf.extend_from_slice(&(self.velocities.len() as u32).to_le_bytes());
        for v in &self.velocities {
            encode_tensor_body(&mut buf, v);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let code = r.u8()?;
        if DType::from_code(code) != Some(T::DTYPE) {
            return Err(Error::Format(format!("checkpoint dtype code {code}, expected {}", T::DTYPE.code())));
        }
        let config = ModelConfig::from_kv(&KeyValues::parse(&r.string()?)?)?;
        let epoch = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng = RngState {
            seed,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let t = r.tensor_body()?;
            params.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
        }
        let nv = r.u32()? as usize;
        if nv != 0 && nv != n {
            return Err(Error::Format(format!("{nv} velocity buffers for {n} parameters")));
        }
        let mut velocities = Vec::with_capacity(nv);
        for id in params.ids().take(nv) {
            let v: Tensor<T> = r.tensor_body()?;
            if v.shape() != params.get(id).shape() {
                return Err(Error::ParamShape {
                    name: format!("{} (velocity)", params.name(id)),
                    expected: params.get(id).shape().to_vec(),
                    found: v.shape().to_vec(),
                });
            }
            velocities.push(v);
        }
        r.finish()?;
        Ok(Self {
            config,
            params,
            velocities,
            epoch,
            rng,
        })
    }

    /// Writes through a temporary file and a rename, so an existing
    /// checkpoint at `path` is never left half-written.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// A model built from the stored config and parameters.
    pub fn build_model(&self) -> Result<LaplacianFormer<T>> {
        let mut model = LaplacianFormer::new(self.config.clone(), 0)?;
        model.assign_params(&self.params)?;
        Ok(model)
    }
}

impl<T: Float> LaplacianFormer<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::from_model(self).save(path)
    }

    /// Loads parameters from `path` into this model. Nothing is modified
    /// unless every parameter matches by name and shape.
    pub fn load_params(&mut self, path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
        let ckpt = Checkpoint::load(path)?;
        self.assign_params(&ckpt.params)?;
        Ok(ckpt)
    }
}
