use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{one_hot, record_loss, LossConfig};
use super::metrics::{confusion_metrics, dsc_metric, hausdorff_labels};
use super::optim::{OptimizerState, SgdConfig};
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, LaplacianFormer, RngState};
use crate::numerics::{Float, Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    /// Seeds the shuffling stream.
    pub seed: u64,
    /// Report the 95th-percentile Hausdorff distance instead of the maximum.
    pub hd95: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            loss: LossConfig::default(),
            sgd: SgdConfig::default(),
            seed: 0,
            hd95: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalMetrics {
    pub loss: f64,
    pub dice: f64,
    pub hd: f64,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
}

/// One line of the metrics log: mean training loss of the epoch and the
/// evaluation metrics measured after it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub loss: f64,
    pub eval: EvalMetrics,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        let e = &self.eval;
        format!(
            "{{\"epoch\":{},\"loss\":{},\"dice\":{},\"hd\":{},\"se\":{},\"sp\":{},\"acc\":{}}}",
            self.epoch, self.loss, e.dice, e.hd, e.se, e.sp, e.acc
        )
    }
}

/// Owns a model, its optimizer state and the shuffling RNG.
#[derive(Debug, Clone)]
pub struct Trainer<T: Float = f32> {
    pub model: LaplacianFormer<T>,
    pub optimizer: OptimizerState<T>,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    epoch: u64,
}

impl<T: Float> Trainer<T> {
    pub fn new(model: LaplacianFormer<T>, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(Self {
            optimizer: OptimizerState::new(config.sgd, model.params()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            epoch: 0,
        })
    }

    /// Resumes from a checkpoint, restoring velocities, epoch and RNG.
    pub fn resume(ckpt: &Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        let model = ckpt.build_model()?;
        let optimizer = OptimizerState::with_velocities(config.sgd, model.params(), ckpt.velocities.clone())?;
        Ok(Self {
            model,
            optimizer,
            config,
            rng: ckpt.rng.restore(),
            epoch: ckpt.epoch,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.model.config().clone(),
            params: self.model.params().clone(),
            velocities: self.optimizer.velocities.clone(),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
        }
    }

    fn prepare(&self, s: &SampleRecord) -> Result<(Tensor<T>, Tensor<T>)> {
        let cfg = self.model.config();
        if s.image.shape() != [cfg.height, cfg.width, cfg.in_channels] {
            return Err(Error::dim(format!(
                "sample image {:?} does not match the model input {}x{}x{}",
                s.image.shape(),
                cfg.height,
                cfg.width,
                cfg.in_channels
            )));
        }
        let img = s.image.cast::<T>().reshape(&[cfg.height * cfg.width, cfg.in_channels])?;
        let target = one_hot(&s.labels(), cfg.num_classes)?;
        Ok((img, target))
    }

    /// Loss and per-parameter gradients for one sample.
    pub fn sample_gradients(&self, s: &SampleRecord) -> Result<(f64, Vec<Vec<T>>)> {
        let (img, target) = self.prepare(s)?;
        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g, true)?;
        let x = g.constant(img)?;
        let fwd = self.model.record(&mut g, &p, x)?;
        let loss = record_loss(&mut g, fwd.logits, &target, &self.config.loss)?;
        let lv = g.value(loss).item()?.f64();
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {lv}")));
        }
        let mut grads = g.backward(loss)?;
        let out = p
            .vars()
            .iter()
            .zip(self.model.params().iter())
            .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect();
        Ok((lv, out))
    }

    /// One pass over `data` in a freshly shuffled order; returns the mean
    /// sample loss. Gradients of a batch are summed in sample order in
    /// double precision and averaged before the update.
    pub fn train_epoch(&mut self, data: &[SampleRecord]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut acc: Vec<Vec<f64>> = self.model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        for batch in order.chunks(self.config.batch_size) {
            for a in &mut acc {
                a.fill(0.0);
            }
            for &i in batch {
                let (l, grads) = self.sample_gradients(&data[i])?;
                total += l;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (av, gv) in a.iter_mut().zip(g) {
                        *av += gv.f64();
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let mean: Vec<Vec<T>> = acc.iter().map(|a| a.iter().map(|&v| T::of(v * inv)).collect()).collect();
            self.optimizer.step(self.model.params_mut(), &mean)?;
        }
        self.epoch += 1;
        Ok(total / data.len() as f64)
    }

    /// Arg-max class per pixel.
    pub fn predict(&self, image: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.model.forward(&image.cast::<T>())?;
        Ok(argmax_rows(&logits))
    }

    pub fn evaluate(&self, data: &[SampleRecord]) -> Result<EvalMetrics> {
        evaluate(&self.model, data, &self.config.loss, self.config.hd95)
    }

    /// Trains for the configured number of epochs, evaluating on `eval`
    /// after each one and handing every record to `on_epoch`.
    pub fn fit(
        &mut self,
        train: &[SampleRecord],
        eval: &[SampleRecord],
        mut on_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        while (self.epoch as usize) < self.config.epochs {
            let loss = self.train_epoch(train)?;
            let eval = if eval.is_empty() { EvalMetrics::default() } else { self.evaluate(eval)? };
            let rec = EpochRecord {
                epoch: self.epoch,
                loss,
                eval,
            };
            on_epoch(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

fn argmax_rows<T: Float>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.last_dim();
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean loss and segmentation metrics of `model` over `data`.
pub fn evaluate<T: Float>(model: &LaplacianFormer<T>, data: &[SampleRecord], loss: &LossConfig, hd95: bool) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let cfg = model.config();
    let k = cfg.num_classes;
    let mut m = EvalMetrics::default();
    for s in data {
        let logits = model.forward(&s.image.cast::<T>())?;
        let gt = s.labels();
        let target = one_hot::<T>(&gt, k)?;
        let flat = logits.reshape(&[cfg.height * cfg.width, k])?;
        m.loss += super::loss::combined_loss(&flat, &target, loss)?;
        let pred = argmax_rows(&logits);
        m.dice += dsc_metric(&pred, &gt, k)?.mean;
        m.hd += hausdorff_labels(&pred, &gt, k, cfg.height, cfg.width, hd95)?;
        let c = confusion_metrics(&pred, &gt)?;
        m.se += c.se;
        m.sp += c.sp;
        m.acc += c.acc;
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        loss: m.loss / n,
        dice: m.dice / n,
        hd: m.hd / n,
        se: m.se / n,
        sp: m.sp / n,
        acc: m.acc / n,
    })
}
