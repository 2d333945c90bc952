//! Run configuration: model keys plus data, optimizer and loss settings.

use std::path::{Path, PathBuf};

use lapformer_core::config::KeyValues;
use lapformer_core::data::DatasetManifest;
use lapformer_core::model::{Ablation, ModelConfig};
use lapformer_core::training::{LossConfig, SgdConfig, TrainConfig};
use lapformer_core::{Error, Result};

const RUN_KEYS: [&str; 14] = [
    "data",
    "manifest",
    "out",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "gamma",
    "dice_eps",
    "seed",
    "checkpoint_every",
    "hd95",
    "probe_samples",
];

const MODEL_KEYS: [&str; 10] = [
    "height",
    "width",
    "in_channels",
    "channels",
    "multipliers",
    "encoder_depths",
    "decoder_depths",
    "heads",
    "sigmas",
    "num_classes",
];

/// Where samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// A directory written by `gen-data`.
    Dir(PathBuf),
    /// A manifest file; samples are generated in memory.
    Manifest(PathBuf),
    /// The default generator settings.
    Default,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub out: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub probe_samples: usize,
    /// The merged key/value view, written into the output directory.
    pub snapshot: KeyValues,
}

fn known(key: &str) -> bool {
    RUN_KEYS.contains(&key)
        || MODEL_KEYS.contains(&key)
        || Ablation::FLAGS.contains(&key)
        || key.strip_prefix("sigmas.stage").is_some_and(|s| matches!(s, "1" | "2" | "3" | "4"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(kv, base)
    }

    /// Relative `data`, `manifest` and `out` paths resolve against `base`.
    pub fn from_kv(kv: KeyValues, base: &Path) -> Result<Self> {
        if let Some(bad) = kv.keys().find(|k| !known(k)) {
            return Err(Error::Config(format!("unknown key `{bad}`")));
        }
        let model = ModelConfig::from_kv(&kv)?;
        let d = TrainConfig::default();
        let sgd = SgdConfig {
            lr: kv.parse_or("lr", d.sgd.lr)?,
            momentum: kv.parse_or("momentum", d.sgd.momentum)?,
            weight_decay: kv.parse_or("weight_decay", d.sgd.weight_decay)?,
        };
        let loss = LossConfig::new(
            kv.parse_or("gamma", d.loss.gamma)?,
            kv.parse_or("dice_eps", d.loss.dice_eps)?,
        )?;
        let train = TrainConfig {
            epochs: kv.parse_or("epochs", d.epochs)?,
            batch_size: kv.parse_or("batch_size", d.batch_size)?,
            loss,
            sgd,
            seed: kv.parse_or("seed", d.seed)?,
            hd95: kv.parse_or("hd95", false)?,
        };
        if train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let resolve = |k: &str| kv.get(k).map(|p| base.join(p));
        let data = match (resolve("data"), resolve("manifest")) {
            (Some(_), Some(_)) => return Err(Error::Config("set only one of `data` and `manifest`".into())),
            (Some(d), None) => DataSource::Dir(d),
            (None, Some(m)) => DataSource::Manifest(m),
            (None, None) => DataSource::Default,
        };
        Ok(Self {
            model,
            train,
            data,
            out: resolve("out"),
            checkpoint_every: kv.parse_or("checkpoint_every", 1)?,
            probe_samples: kv.parse_or("probe_samples", 8)?,
            snapshot: kv,
        })
    }

    /// Applies a command-line override and keeps the snapshot in sync.
    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let mut kv = self.snapshot.clone();
        kv.set(key, value.to_string());
        let out = self.out.clone();
        let data = self.data.clone();
        let mut next = Self::from_kv(kv, Path::new(""))?;
        if key != "out" {
            next.out = out;
        }
        if key != "data" && key != "manifest" {
            next.data = data;
        }
        *self = next;
        Ok(())
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        match &self.data {
            DataSource::Manifest(p) => DatasetManifest::from_kv(&KeyValues::load(p)?),
            _ => Ok(DatasetManifest::default()),
        }
    }
}
