mod common;

use common::{rng, to_mat, Mat};
use lapformer_core::blocks::{BlockParams, MixFfnParams, PatchEmbedParams, PatchExpandParams, PatchMergeParams};
use lapformer_core::params::{ParamBuilder, ParamStore};
use lapformer_core::{AttentionKind, Error, Float, GaussianSpec, Tensor};
use proptest::prelude::*;

fn store_with<T: Float, P>(seed: u64, init: impl FnOnce(&mut ParamBuilder<'_, T>) -> P) -> (ParamStore<T>, P) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let p = init(&mut ParamBuilder::new(&mut store, &mut r));
    (store, p)
}

/// Overwrites every parameter whose name contains `part`.
fn fill<T: Float>(store: &mut ParamStore<T>, part: &str, f: impl Fn(&[usize]) -> Tensor<T>) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).contains(part)).collect();
    assert!(!ids.is_empty(), "no parameter matches {part}");
    for id in ids {
        let t = f(store.get(id).shape());
        *store.get_mut(id) = t;
    }
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        *t = Tensor::randn(t.shape(), 0.7, &mut r);
    }
}

fn layer(kind: AttentionKind, h: usize, w: usize, c: usize, heads: usize, spec: &GaussianSpec, seed: u64) -> (ParamStore<f64>, BlockParams) {
    store_with(seed, |pb| BlockParams::init(&mut pb.sub("layer"), kind, h, w, c, heads, spec, true).unwrap())
}

fn run_layer(store: &ParamStore<f64>, b: &BlockParams, x: &Tensor<f64>, spec: &GaussianSpec) -> Tensor<f64> {
    store.evaluate(x, |g, p, xv| b.forward(g, p, xv, spec)).unwrap()
}

fn get(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    store.get(store.find(name).unwrap_or_else(|| panic!("{name}"))).clone()
}

fn mix_ffn_oracle(x: &Mat, h: usize, w: usize, store: &ParamStore<f64>, prefix: &str) -> Mat {
    let fc1 = to_mat(&get(store, &format!("{prefix}.fc1.w")));
    let b1 = get(store, &format!("{prefix}.fc1.b")).to_f64_vec();
    let dw = get(store, &format!("{prefix}.dw"));
    let dwb = get(store, &format!("{prefix}.dw_bias")).to_f64_vec();
    let fc2 = to_mat(&get(store, &format!("{prefix}.fc2.w")));
    let b2 = get(store, &format!("{prefix}.fc2.b")).to_f64_vec();
    let hid = b1.len();
    let k: Vec<Vec<Vec<f64>>> = (0..3).map(|a| (0..3).map(|b| (0..hid).map(|c| dw.at(&[a, b, c])).collect()).collect()).collect();
    let y = common::add_row(&common::mat_mul(x, &fc1), &b1);
    let y = common::add_row(&common::depthwise3(&y, h, w, &k), &dwb);
    let y: Mat = y.iter().map(|r| r.iter().map(|&v| common::gelu(v)).collect()).collect();
    common::add_row(&common::mat_mul(&y, &fc2), &b2)
}

#[test]
fn patch_embed_geometry() {
    let (store, e) = store_with::<f32, _>(1, |pb| PatchEmbedParams::init(pb, 1, 16).unwrap());
    let img = Tensor::<f32>::uniform(&[64 * 64, 1], 0.0, 1.0, &mut rng(2));
    let out = store.evaluate(&img, |g, p, x| e.forward(g, p, x, 64, 64)).unwrap();
    assert_eq!(out.shape(), &[256, 16]);

    let (store, e) = store_with::<f32, _>(1, |pb| PatchEmbedParams::init(pb, 3, 96).unwrap());
    let img = Tensor::<f32>::zeros(&[224 * 224, 3]);
    let out = store.evaluate(&img, |g, p, x| e.forward(g, p, x, 224, 224)).unwrap();
    assert_eq!(out.shape(), &[3136, 96]);

    let err = store.evaluate(&Tensor::zeros(&[30 * 32, 3]), |g, p, x| e.forward(g, p, x, 30, 32));
    assert!(matches!(err, Err(Error::Dimension(_))));
}

#[test]
fn zero_image_embeds_to_the_norm_bias() {
    let (mut store, e) = store_with::<f64, _>(3, |pb| PatchEmbedParams::init(pb, 1, 8).unwrap());
    let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
    *store.get_mut(e.ln.bias) = Tensor::from_f64(&[8], &bias).unwrap();
    let out = store.evaluate(&Tensor::zeros(&[32 * 32, 1]), |g, p, x| e.forward(g, p, x, 32, 32)).unwrap();
    for row in to_mat(&out) {
        assert_eq!(row, bias);
    }
}

#[test]
fn patch_merge_geometry_and_symmetry() {
    let (store, m) = store_with::<f32, _>(4, |pb| PatchMergeParams::init(pb, 16, 32).unwrap());
    let x = Tensor::<f32>::randn(&[256, 16], 1.0, &mut rng(5));
    assert_eq!(store.evaluate(&x, |g, p, v| m.forward(g, p, v, 16, 16)).unwrap().shape(), &[64, 32]);

    // the 2C → 5C transition
    let (store, m) = store_with::<f32, _>(6, |pb| PatchMergeParams::init(pb, 32, 80).unwrap());
    let x = Tensor::<f32>::randn(&[64, 32], 1.0, &mut rng(7));
    assert_eq!(store.evaluate(&x, |g, p, v| m.forward(g, p, v, 8, 8)).unwrap().shape(), &[16, 80]);

    let token: Vec<f32> = (0..32).map(|i| (i as f32).sin()).collect();
    let same = Tensor::<f32>::from_fn(&[64, 32], |i| token[i % 32]);
    let out = to_mat(&store.evaluate(&same, |g, p, v| m.forward(g, p, v, 8, 8)).unwrap());
    assert!(out.iter().all(|r| r == &out[0]));

    let odd = store.evaluate(&Tensor::zeros(&[15 * 32, 32]), |g, p, v| m.forward(g, p, v, 3, 5));
    assert!(matches!(odd, Err(Error::Dimension(_))));
}

#[test]
fn patch_expand_geometry_and_symmetry() {
    let (store, e) = store_with::<f32, _>(8, |pb| PatchExpandParams::init(pb, 128, 80, 2).unwrap());
    let x = Tensor::<f32>::randn(&[4, 128], 1.0, &mut rng(9));
    assert_eq!(store.evaluate(&x, |g, p, v| e.forward(g, p, v, 2, 2)).unwrap().shape(), &[16, 80]);

    let (store, e) = store_with::<f32, _>(10, |pb| PatchExpandParams::init(pb, 16, 16, 4).unwrap());
    let x = Tensor::<f32>::randn(&[256, 16], 1.0, &mut rng(11));
    assert_eq!(store.evaluate(&x, |g, p, v| e.forward(g, p, v, 16, 16)).unwrap().shape(), &[4096, 16]);

    // expand after merge keeps all-equal tokens equal
    let (mut store, (m, e)) = store_with::<f64, _>(12, |pb| {
        (
            PatchMergeParams::init(&mut pb.sub("merge"), 4, 8).unwrap(),
            PatchExpandParams::init(&mut pb.sub("expand"), 8, 4, 2).unwrap(),
        )
    });
    randomize(&mut store, 13);
    let same = Tensor::<f64>::from_fn(&[16, 4], |i| [0.2, -1.0, 0.5, 3.0][i % 4]);
    let out = store
        .evaluate(&same, |g, p, v| {
            let y = m.forward(g, p, v, 4, 4)?;
            e.forward(g, p, y, 2, 2)
        })
        .unwrap();
    // equal up to the position inside each 2×2 block
    let rows = to_mat(&out);
    assert_eq!(rows.len(), 16);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(rows[i * 4 + j], rows[(i % 2) * 4 + j % 2]);
        }
    }
}

#[test]
fn mix_ffn_matches_stepwise_oracle() {
    let (mut store, f) = store_with::<f64, _>(14, |pb| MixFfnParams::init(&mut pb.sub("ffn"), 2).unwrap());
    randomize(&mut store, 15);
    let x = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng(16));
    let got = store.evaluate(&x, |g, p, v| f.forward(g, p, v, 2, 2)).unwrap();
    let want = mix_ffn_oracle(&to_mat(&x), 2, 2, &store, "ffn");
    assert!(common::max_abs(&to_mat(&got), &want) < 1e-6);
}

#[test]
fn mix_ffn_degenerate_weights() {
    let (mut store, f) = store_with::<f64, _>(17, |pb| MixFfnParams::init(&mut pb.sub("ffn"), 3).unwrap());
    randomize(&mut store, 18);
    let x = Tensor::<f64>::randn(&[12, 3], 1.0, &mut rng(19));

    // delta kernel: a plain two-layer MLP
    *store.get_mut(f.dw) = Tensor::from_fn(&[3, 3, 12], |i| if i / 12 == 4 { 1.0 } else { 0.0 });
    let got = to_mat(&store.evaluate(&x, |g, p, v| f.forward(g, p, v, 3, 4)).unwrap());
    let y = common::add_row(&common::mat_mul(&to_mat(&x), &to_mat(&get(&store, "ffn.fc1.w"))), &get(&store, "ffn.fc1.b").to_f64_vec());
    let y = common::add_row(&y, &get(&store, "ffn.dw_bias").to_f64_vec());
    let y: Mat = y.iter().map(|r| r.iter().map(|&v| common::gelu(v)).collect()).collect();
    let want = common::add_row(&common::mat_mul(&y, &to_mat(&get(&store, "ffn.fc2.w"))), &get(&store, "ffn.fc2.b").to_f64_vec());
    assert!(common::max_abs(&got, &want) < 1e-12);

    for t in store.tensors_mut() {
        *t = Tensor::zeros(t.shape());
    }
    let out = store.evaluate(&x, |g, p, v| f.forward(g, p, v, 3, 4)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_matches_five_op_composition() {
    let spec = GaussianSpec::new(vec![1.0, 2.0]).unwrap();
    let (mut store, b) = layer(AttentionKind::EfficientFrequency, 2, 2, 4, 2, &spec, 20);
    randomize(&mut store, 21);
    let x = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng(22));
    let got = run_layer(&store, &b, &x, &spec);

    let xm = to_mat(&x);
    let ln = |m: &Mat, name: &str| {
        common::layer_norm(m, &get(&store, &format!("layer.{name}.gain")).to_f64_vec(), &get(&store, &format!("layer.{name}.bias")).to_f64_vec(), 1e-6)
    };
    let n1 = ln(&xm, "ln1");
    let q = common::mat_mul(&n1, &to_mat(&get(&store, "layer.attn.wq")));
    let k = common::mat_mul(&n1, &to_mat(&get(&store, "layer.attn.wk")));
    let v = common::mat_mul(&n1, &to_mat(&get(&store, "layer.attn.wv")));
    let e = common::efficient(&q, &k, &v, 2);
    let levels: Vec<(Mat, Mat)> = (0..=spec.levels())
        .map(|l| (to_mat(&get(&store, &format!("layer.attn.level{l}.wk"))), to_mat(&get(&store, &format!("layer.attn.level{l}.wv")))))
        .collect();
    let f = common::frequency(&n1, 2, 2, spec.sigmas(), &to_mat(&get(&store, "layer.attn.wq")), &levels, 2);
    let fw = to_mat(&get(&store, "layer.attn.fusion.w"));
    let fb = get(&store, "layer.attn.fusion.b").to_f64_vec();
    let att: Mat = e.iter().zip(&f).map(|(er, fr)| (0..4).map(|c| fw[0][c] * er[c] + fw[1][c] * fr[c] + fb[c]).collect()).collect();
    let kron = common::kron(&to_mat(&get(&store, "layer.attn.des.a")), &to_mat(&get(&store, "layer.attn.des.b")));
    let y = common::add(&common::add(&xm, &att), &common::mat_mul(&xm, &kron));
    let want = common::add(&y, &mix_ffn_oracle(&ln(&y, "ln2"), 2, 2, &store, "layer.ffn"));
    assert!(common::max_abs(&to_mat(&got), &want) < 1e-5);
}

#[test]
fn layer_shortcut_identities() {
    let spec = GaussianSpec::default();
    let (mut store, b) = layer(AttentionKind::EfficientFrequency, 3, 3, 4, 2, &spec, 23);
    randomize(&mut store, 24);
    let x = Tensor::<f64>::randn(&[9, 4], 1.0, &mut rng(25));
    for part in ["attn.w", "attn.level", "attn.fusion", "attn.des", "ffn."] {
        fill(&mut store, part, Tensor::zeros);
    }
    assert_eq!(run_layer(&store, &b, &x, &spec).data(), x.data());

    fill(&mut store, "attn.des", |s| Tensor::eye(s[0]));
    let out = run_layer(&store, &b, &x, &spec);
    let twice = x.map(|v| 2.0 * v);
    assert!(out.max_abs_diff(&twice).unwrap() < 1e-12);
}

#[test]
fn layer_without_shortcut_paths_is_residual_plus_blend() {
    let spec = GaussianSpec::new(vec![1.0]).unwrap();
    let (mut store, b) = layer(AttentionKind::EfficientFrequency, 2, 3, 4, 1, &spec, 26);
    randomize(&mut store, 27);
    fill(&mut store, "attn.fusion.b", Tensor::zeros);
    fill(&mut store, "attn.des", Tensor::zeros);
    fill(&mut store, "ffn.", Tensor::zeros);
    let x = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng(28));
    let got = run_layer(&store, &b, &x, &spec);

    let att = store
        .evaluate(&x, |g, p, v| {
            let n = b.ln1.forward(g, p, v)?;
            let e = {
                let qn = b.attention.query(g, p, n)?;
                b.attention.efficient_branch(g, p, n, qn)?
            };
            let f = b.attention.frequency_attention(g, p, n, 2, 3, &spec)?;
            let fusion = b.attention.fusion.as_ref().unwrap();
            let we = g.constant(Tensor::from_fn(&[4], |c| store.get(fusion.w).data()[c]))?;
            let wf = g.constant(Tensor::from_fn(&[4], |c| store.get(fusion.w).data()[4 + c]))?;
            let e = g.mul_channels(e, we)?;
            let f = g.mul_channels(f, wf)?;
            let s = g.add(e, f)?;
            g.add(v, s)
        })
        .unwrap();
    assert!(got.max_abs_diff(&att).unwrap() < 1e-12);
}

#[test]
fn layer_starts_near_identity() {
    let spec = GaussianSpec::default();
    for (i, kind) in [AttentionKind::EfficientFrequency, AttentionKind::Efficient, AttentionKind::DotProduct]
        .into_iter()
        .enumerate()
    {
        let (store, b) = layer(kind, 4, 4, 16, 2, &spec, 30 + i as u64);
        let x = Tensor::<f64>::randn(&[16, 16], 1.0, &mut rng(40 + i as u64));
        // every token scaled to unit norm
        let mut x = x;
        for row in x.data_mut().chunks_mut(16) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let out = run_layer(&store, &b, &x, &spec);
        let rel = out.max_abs_diff(&x).unwrap();
        let diff: f64 = out.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(diff / x.norm() < 0.5, "{kind:?}: {diff} (max {rel})");
    }
}

#[test]
fn layer_rejects_wrong_grid() {
    let spec = GaussianSpec::default();
    let (store, b) = layer(AttentionKind::Efficient, 2, 2, 4, 1, &spec, 50);
    let err = store.evaluate(&Tensor::zeros(&[6, 4]), |g, p, v| b.forward(g, p, v, &spec));
    assert!(matches!(err, Err(Error::Dimension(_))));
}

#[test]
fn layer_gradient_in_f32() {
    let spec = GaussianSpec::new(vec![0.8, 1.6]).unwrap();
    let (store, b) = store_with::<f32, _>(51, |pb| {
        BlockParams::init(pb, AttentionKind::EfficientFrequency, 3, 3, 4, 2, &spec, true).unwrap()
    });
    let x = Tensor::<f32>::randn(&[9, 4], 1.0, &mut rng(52));
    let res = common::param_grad_check(&store, &[x], 5e-3, 200, 53, |g, xs, p| {
        let y = b.forward(g, p, xs[0], &spec)?;
        common::projected(g, y, 54)
    })
    .unwrap();
    assert!(res.max_rel_error < 1e-3, "{:e}", res.max_rel_error);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn layers_preserve_shape(h in 1usize..5, w in 1usize..5, heads in 1usize..3, dk in 1usize..4, kind in 0usize..3, seed in any::<u64>()) {
        let kind = [AttentionKind::EfficientFrequency, AttentionKind::Efficient, AttentionKind::DotProduct][kind];
        let c = heads * dk;
        let spec = GaussianSpec::default();
        let (store, b) = layer(kind, h, w, c, heads, &spec, seed);
        let x = Tensor::<f64>::randn(&[h * w, c], 1.0, &mut rng(seed));
        let out = run_layer(&store, &b, &x, &spec);
        prop_assert_eq!(out.shape(), x.shape());
        prop_assert!(out.is_finite());
    }
}
