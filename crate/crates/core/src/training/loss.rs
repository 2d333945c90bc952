//! Segmentation losses: soft dice, cross-entropy and their `γ` blend.

use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the dice term; cross-entropy gets `1 − gamma`.
    pub gamma: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.6,
            dice_eps: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn new(gamma: f64, dice_eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if !(dice_eps >= 0.0 && dice_eps.is_finite()) {
            return Err(Error::Config(format!("dice eps must be non-negative, got {dice_eps}")));
        }
        Ok(Self { gamma, dice_eps })
    }

    /// `γ·dice + (1 − γ)·ce`.
    pub fn combine(&self, dice: f64, ce: f64) -> f64 {
        self.gamma * dice + (1.0 - self.gamma) * ce
    }
}

/// One-hot encoding of class ids as rows of width `k`.
pub fn one_hot<T: Float>(labels: &[usize], k: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::dim(format!("class id {bad} out of range for {k} classes")));
    }
    let mut data = vec![T::zero(); labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        data[i * k + l] = T::one();
    }
    Tensor::new(&[labels.len(), k], data)
}

fn flat<T: Float>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if a.shape() != b.shape() || a.rank() == 0 {
        return Err(Error::dim(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let k = a.last_dim();
    let n = a.numel() / k;
    Ok((a.reshape(&[n, k])?, b.reshape(&[n, k])?))
}

fn eval_scalar<T: Float>(x: Tensor<T>, f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(x)?;
    let out = f(&mut g, v)?;
    Ok(g.value(out).item()?.f64())
}

/// Soft dice loss averaged over classes; the class axis is last.
pub fn dice_loss<T: Float>(probs: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<f64> {
    let (p, t) = flat("dice_loss", probs, target)?;
    eval_scalar(p, |g, v| g.dice_loss(v, &t, eps))
}

/// Mean over pixels of `−log softmax(logits)` at the target class.
pub fn ce_loss<T: Float>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let (l, t) = flat("ce_loss", logits, target)?;
    eval_scalar(l, |g, v| g.cross_entropy(v, &t))
}

pub fn combined_loss<T: Float>(logits: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    let (l, t) = flat("combined_loss", logits, target)?;
    eval_scalar(l, |g, v| record_loss(g, v, &t, cfg))
}

/// Records the combined loss for `n×k` logits and one-hot targets.
pub fn record_loss<T: Float>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    if cfg.gamma > 0.0 {
        let probs = g.softmax(logits, 1)?;
        let d = g.dice_loss(probs, target, cfg.dice_eps)?;
        terms.push(g.scale(d, T::of(cfg.gamma))?);
    }
    if cfg.gamma < 1.0 {
        let ce = g.cross_entropy(logits, target)?;
        terms.push(g.scale(ce, T::of(1.0 - cfg.gamma))?);
    }
    g.add_all(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.combine(0.5, 1.0), 0.6 * 0.5 + 0.4 * 1.0);
        assert!(LossConfig::new(1.5, 1e-5).is_err());
        assert!(LossConfig::new(0.5, -1.0).is_err());
    }

    #[test]
    fn one_hot_rows() {
        let t = one_hot::<f32>(&[1, 0, 2], 3).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(one_hot::<f32>(&[3], 3).is_err());
    }
}
