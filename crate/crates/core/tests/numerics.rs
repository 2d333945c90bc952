mod common;

use common::{rng, to_mat};
use lapformer_core::numerics::{
    depthwise_conv2d, gelu, grad_check, grad_check_with, layer_norm, matmul, softmax_axis, ConvGeometry,
};
use lapformer_core::training::{one_hot, record_loss, LossConfig};
use lapformer_core::{Error, Float, Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

const STEP_F32: f64 = 5e-3;
const STEP_F64: f64 = 1e-5;
const TOL_F32: f64 = 1e-3;
const TOL_F64: f64 = 1e-5;
const INSTANCES: u64 = 100;

type OpFn<T> = Box<dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>>;

/// A differentiable op with the input shapes it is checked on.
struct Case<T: Float> {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    f: OpFn<T>,
}

fn case<T: Float>(
    name: &'static str,
    shapes: &[&[usize]],
    f: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var> + 'static,
) -> Case<T> {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

fn cases<T: Float + 'static>() -> Vec<Case<T>> {
    let taps: Vec<T> = [0.1, 0.2, 0.4, 0.2, 0.1].iter().map(|&v| T::of(v)).collect();
    let geom = ConvGeometry {
        h: 5,
        w: 6,
        c: 2,
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        case("transpose", &[&[3, 4]], |g, v| g.transpose(v[0])),
        case("linear", &[&[3, 4], &[4, 5], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        case("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1])),
        case("scale", &[&[3, 4]], |g, v| g.scale(v[0], T::of(-1.7))),
        case("add_all", &[&[2, 3], &[2, 3], &[2, 3]], |g, v| g.add_all(v)),
        case("add_bias", &[&[3, 4], &[4]], |g, v| g.add_bias(v[0], v[1])),
        case("mul_channels", &[&[3, 4], &[4]], |g, v| g.mul_channels(v[0], v[1])),
        case("blend2", &[&[3, 4], &[3, 4], &[2, 4], &[4]], |g, v| g.blend2(v[0], v[1], v[2], v[3])),
        case("gelu", &[&[3, 4]], |g, v| g.gelu(v[0])),
        case("softmax_axis0", &[&[3, 4]], |g, v| g.softmax(v[0], 0)),
        case("softmax_axis1", &[&[3, 4]], |g, v| g.softmax(v[0], 1)),
        case("softmax_heads", &[&[3, 6]], |g, v| g.softmax_heads(v[0], 2)),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |g, v| g.layer_norm(v[0], v[1], v[2], T::of(1e-6))),
        case("depthwise_conv2d", &[&[12, 2], &[3, 3, 2]], |g, v| g.depthwise_conv2d(v[0], v[1], 3, 4)),
        case("separable_blur", &[&[20, 2]], move |g, v| g.separable_blur(v[0], 4, 5, &taps)),
        case("im2col", &[&[30, 2]], move |g, v| g.im2col(v[0], geom)),
        case("space_to_depth", &[&[16, 3]], |g, v| g.space_to_depth(v[0], 4, 4, 2)),
        case("depth_to_space", &[&[4, 12]], |g, v| g.depth_to_space(v[0], 2, 2, 2)),
        case("concat_cols", &[&[3, 2], &[3, 4]], |g, v| g.concat_cols(v[0], v[1])),
        case("reshape", &[&[3, 4]], |g, v| g.reshape(v[0], &[2, 6])),
        case("kron_project", &[&[3, 6], &[2, 2], &[3, 3]], |g, v| g.kron_project(v[0], v[1], v[2])),
        case("head_context", &[&[5, 4], &[5, 4]], |g, v| g.head_context(v[0], v[1], 2)),
        case("head_apply", &[&[5, 4], &[2, 2, 2]], |g, v| g.head_apply(v[0], v[1], 2)),
        case("self_attention", &[&[5, 4], &[5, 4], &[5, 4]], |g, v| g.self_attention(v[0], v[1], v[2], 2)),
        case("mean_all", &[&[3, 4]], |g, v| g.mean_all(v[0])),
        case("cross_entropy", &[&[4, 3]], |g, v| {
            let t = one_hot(&[0, 2, 1, 2], 3)?;
            g.cross_entropy(v[0], &t)
        }),
        case("dice_loss", &[&[4, 3]], |g, v| {
            let t = one_hot(&[0, 2, 1, 2], 3)?;
            let p = g.softmax(v[0], 1)?;
            g.dice_loss(p, &t, 1e-5)
        }),
    ]
}

fn worst_error<T: Float + 'static>(step: f64) -> Vec<(&'static str, f64)> {
    cases::<T>()
        .into_iter()
        .enumerate()
        .map(|(k, c)| {
            let mut worst = 0.0f64;
            for seed in 0..INSTANCES {
                let mut r = rng(1000 * k as u64 + seed);
                let inputs: Vec<Tensor<T>> = c.shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
                let proj = 77 + seed;
                let res = grad_check_with(
                    |g, v| {
                        let y = (c.f)(g, v)?;
                        common::projected(g, y, proj)
                    },
                    &inputs,
                    step,
                    None,
                    0,
                )
                .unwrap();
                worst = worst.max(res.max_rel_error);
            }
            (c.name, worst)
        })
        .collect()
}

#[test]
fn every_op_passes_gradient_check_in_f64() {
    for (name, err) in worst_error::<f64>(STEP_F64) {
        assert!(err < TOL_F64, "{name}: {err:e}");
    }
}

#[test]
fn every_op_passes_gradient_check_in_f32() {
    for (name, err) in worst_error::<f32>(STEP_F32) {
        assert!(err < TOL_F32, "{name}: {err:e}");
    }
}

#[test]
fn grad_check_reference_functions() {
    let x = Tensor::<f64>::from_f64(&[3], &[0.3, -1.0, 2.0]).unwrap();
    let e = grad_check(|g, v| g.sum_all(v), &x, STEP_F64).unwrap();
    assert!(e < 1e-10);

    let x = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let v = g.param(x.clone()).unwrap();
    let sq = g.mul(v, v).unwrap();
    let s = g.sum_all(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(v).unwrap(), &[2.0, 4.0]);
    let e = grad_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            g.sum_all(sq)
        },
        &x,
        STEP_F64,
    )
    .unwrap();
    assert!(e < 1e-6);
}

#[test]
fn non_finite_function_is_a_numerical_error() {
    let x = Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap();
    let err = grad_check(|g, v| {
        let big = g.scale(v, 1.0)?;
        let inf = g.constant(Tensor::scalar(f64::INFINITY))?;
        let s = g.sum_all(big)?;
        g.add(s, inf)
    }, &x, STEP_F64)
    .unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
}

#[test]
fn one_layer_model_loss_gradient_in_f32() {
    // linear → gelu → linear head under the combined loss
    let mut r = rng(5);
    let x = Tensor::<f32>::randn(&[6, 4], 1.0, &mut r);
    let w1 = Tensor::<f32>::randn(&[4, 8], 0.5, &mut r);
    let w2 = Tensor::<f32>::randn(&[8, 3], 0.5, &mut r);
    let target = one_hot::<f32>(&[0, 1, 2, 2, 1, 0], 3).unwrap();
    let cfg = LossConfig::default();
    let res = grad_check_with(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.gelu(h)?;
            let logits = g.matmul(h, v[2])?;
            record_loss(g, logits, &target, &cfg)
        },
        &[x, w1, w2],
        STEP_F32,
        None,
        0,
    )
    .unwrap();
    assert!(res.max_rel_error < TOL_F32, "{:e}", res.max_rel_error);
}

#[test]
fn eager_ops_match_naive_oracles() {
    let mut r = rng(9);
    for _ in 0..50 {
        let (n, k, m) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        let a = Tensor::<f64>::randn(&[n, k], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[k, m], 1.0, &mut r);
        let got = to_mat(&matmul(&a, &b).unwrap());
        assert!(common::max_abs(&got, &common::mat_mul(&to_mat(&a), &to_mat(&b))) < 1e-12);

        let d = r.random_range(1..6);
        let x = Tensor::<f64>::randn(&[n, d], 2.0, &mut r);
        let gain: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = layer_norm(
            &x,
            &Tensor::from_f64(&[d], &gain).unwrap(),
            &Tensor::from_f64(&[d], &bias).unwrap(),
            1e-6,
        )
        .unwrap();
        let want = common::layer_norm(&to_mat(&x), &gain, &bias, 1e-6);
        assert!(common::max_abs(&to_mat(&got), &want) < 1e-9);

        let sm = softmax_axis(&x, 1).unwrap();
        let want: Vec<Vec<f64>> = to_mat(&x).iter().map(|row| common::softmax(row)).collect();
        assert!(common::max_abs(&to_mat(&sm), &want) < 1e-12);

        let g = gelu(&x);
        let want: Vec<Vec<f64>> = to_mat(&x).iter().map(|row| row.iter().map(|&v| common::gelu(v)).collect()).collect();
        assert!(common::max_abs(&to_mat(&g), &want) < 1e-12);
    }
}

#[test]
fn depthwise_matches_naive_mirror_oracle() {
    let mut r = rng(12);
    for _ in 0..30 {
        let (h, w, c) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..4));
        let x = Tensor::<f64>::randn(&[h, w, c], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[3, 3, c], 1.0, &mut r);
        let got = depthwise_conv2d(&x, &k).unwrap();
        let kk: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|a| (0..3).map(|b| (0..c).map(|ch| k.at(&[a, b, ch])).collect()).collect())
            .collect();
        let want = common::depthwise3(&to_mat(&x.reshape(&[h * w, c]).unwrap()), h, w, &kk);
        assert!(common::max_abs(&to_mat(&got.reshape(&[h * w, c]).unwrap()), &want) < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut r = rng(3);
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::randn(&[6, 4], 1.0, &mut r)).unwrap();
        let w = g.param(Tensor::randn(&[4, 4], 1.0, &mut r)).unwrap();
        let y = g.matmul(x, w).unwrap();
        let y = g.softmax_heads(y, 2).unwrap();
        let y = g.self_attention(y, y, y, 2).unwrap();
        let s = g.mean_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(y).data().to_vec(), grads.get(x).unwrap().to_vec(), grads.get(w).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    assert!(matches!(g.softmax(a, 2), Err(Error::Dimension(_))));
    let k = g.constant(Tensor::zeros(&[2, 2, 3])).unwrap();
    assert!(matches!(g.depthwise_conv2d(a, k, 1, 2), Err(Error::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_columns_and_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
    ) {
        let x = Tensor::<f64>::randn(&[rows, cols], scale, &mut rng(seed));
        for axis in 0..2 {
            let s = softmax_axis(&x, axis).unwrap();
            prop_assert!(s.data().iter().all(|&p| p > 0.0 || scale > 20.0));
            prop_assert!(s.data().iter().all(|&p| p <= 1.0));
            let m = to_mat(&s);
            let sums: Vec<f64> = if axis == 1 {
                m.iter().map(|r| r.iter().sum()).collect()
            } else {
                (0..cols).map(|j| m.iter().map(|r| r[j]).sum()).collect()
            };
            for v in sums {
                prop_assert!((v - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_matmul_is_bitwise(n in 1usize..6, m in 1usize..6, seed in any::<u64>()) {
        let a = Tensor::<f32>::randn(&[n, m], 100.0, &mut rng(seed));
        let out = matmul(&Tensor::eye(n), &a).unwrap();
        prop_assert_eq!(out.data(), a.data());
    }

    #[test]
    fn layer_norm_rows_are_standardized(n in 1usize..5, d in 2usize..9, seed in any::<u64>()) {
        let x = Tensor::<f64>::randn(&[n, d], 3.0, &mut rng(seed));
        let y = layer_norm(&x, &Tensor::ones(&[d]), &Tensor::zeros(&[d]), 1e-6).unwrap();
        for (row, src) in to_mat(&y).iter().zip(to_mat(&x)) {
            let stats = |r: &[f64]| {
                let mean = r.iter().sum::<f64>() / d as f64;
                (mean, r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64)
            };
            let (mean, var) = stats(row);
            let (_, src_var) = stats(&src);
            prop_assert!(mean.abs() < 1e-9);
            // the eps guard shrinks the variance to s²/(s² + eps)
            prop_assert!((var - src_var / (src_var + 1e-6)).abs() < 1e-9);
        }
    }
}
