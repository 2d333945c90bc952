//! SGD with momentum and L2 weight decay.

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Float = f32> {
    pub config: SgdConfig,
    pub velocities: Vec<Tensor<T>>,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(config: SgdConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            velocities: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Restores saved buffers after checking their shapes.
    pub fn with_velocities(config: SgdConfig, params: &ParamStore<T>, velocities: Vec<Tensor<T>>) -> Result<Self> {
        if velocities.is_empty() {
            return Ok(Self::new(config, params));
        }
        check_shapes(params, velocities.iter().map(Tensor::shape))?;
        Ok(Self { config, velocities })
    }

    /// `g ← g + wd·p`, `v ← μ·v + g`, `p ← p − lr·v` for every parameter.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() || self.velocities.len() != params.len() {
            return Err(Error::dim(format!(
                "sgd_step: {} parameters, {} gradients, {} velocities",
                params.len(),
                grads.len(),
                self.velocities.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        for (id, g) in ids.iter().zip(grads) {
            if g.len() != params.get(*id).numel() {
                return Err(Error::ParamShape {
                    name: params.name(*id).to_string(),
                    expected: params.get(*id).shape().to_vec(),
                    found: vec![g.len()],
                });
            }
        }
        let (lr, mu, wd) = (T::of(self.config.lr), T::of(self.config.momentum), T::of(self.config.weight_decay));
        for ((p, v), g) in params.tensors_mut().zip(&mut self.velocities).zip(grads) {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
                let gt = gv + wd * *pv;
                *vv = mu * *vv + gt;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

fn check_shapes<'a, T: Float>(params: &ParamStore<T>, shapes: impl Iterator<Item = &'a [usize]>) -> Result<()> {
    let shapes: Vec<_> = shapes.collect();
    if shapes.len() != params.len() {
        return Err(Error::dim(format!("{} buffers for {} parameters", shapes.len(), params.len())));
    }
    for (id, s) in params.ids().zip(shapes) {
        if params.get(id).shape() != s {
            return Err(Error::ParamShape {
                name: params.name(id).to_string(),
                expected: params.get(id).shape().to_vec(),
                found: s.to_vec(),
            });
        }
    }
    Ok(())
}

/// One update of `params` in place.
pub fn sgd_step<T: Float>(params: &mut ParamStore<T>, grads: &[Vec<T>], state: &mut OptimizerState<T>) -> Result<()> {
    state.step(params, grads)
}
