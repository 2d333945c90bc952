use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares the tape gradient of a scalar function with central differences
/// at step `h` over every coordinate of `x`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Float,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let r = grad_check_with(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, None, 0)?;
    Ok(r.max_rel_error)
}

/// Multi-input variant. When `max_coords` is set, that many coordinates are
/// sampled (seeded) across all inputs instead of checking every one.
pub fn grad_check_with<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheck>
where
    T: Float,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = vals
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item()?.f64();
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite loss during gradient check".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match grads.get(v) {
            Some(gr) => gr.iter().map(|x| x.f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let coords: Vec<usize> = match max_coords {
        Some(m) if m < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = sample(&mut rng, total, m).into_vec();
            c.sort_unstable();
            c
        }
        _ => (0..total).collect(),
    };

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for &flat in &coords {
        let (which, idx) = locate(inputs, flat);
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = T::of(orig.f64() + h);
        let plus = eval(&work)?;
        work[which].data_mut()[idx] = T::of(orig.f64() - h);
        let minus = eval(&work)?;
        work[which].data_mut()[idx] = orig;
        // use the perturbation actually representable at this precision
        let step = T::of(orig.f64() + h).f64() - T::of(orig.f64() - h).f64();
        let numeric = (plus - minus) / step;
        let a = analytic[which][idx];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        checked: coords.len(),
    })
}

fn locate<T: Float>(inputs: &[Tensor<T>], mut flat: usize) -> (usize, usize) {
    for (i, t) in inputs.iter().enumerate() {
        if flat < t.numel() {
            return (i, flat);
        }
        flat -= t.numel();
    }
    unreachable!("coordinate out of range")
}
