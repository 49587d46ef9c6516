//! Criterion-level checks shared by the focused tests and the acceptance
//! report. Each returns the measured worst-case quantity; callers compare it
//! against the threshold.

use fskd_core::autodiff::{Graph, Var};
use fskd_core::decoder::{
    dscm_block, forward_graph, init_params, prepare_inputs, BoundParams, DecoderConfig,
    DecoderParams, Fusion,
};
use fskd_core::extraction::{
    build_vision_correlations, mask_support_features, QuerySample, SupportSample, TextEmbedding,
    LAYER_COUNT,
};
use fskd_core::ops::{cp4d_conv, dw4d_conv};
use fskd_core::Tensor;
use rand::Rng;

use super::*;

const STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

/// `(op name, worst relative error)` for every differentiable tape op.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(21);
    let mut t = |dims: &[usize]| random_tensor::<f64>(&mut r, dims);
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = vec![
        (
            "relu",
            vec![t(&[3, 4])],
            Box::new(|g, v| {
                let y = g.relu(v[0]);
                weighted_sum(g, y, 1)
            }),
        ),
        (
            "add",
            vec![t(&[2, 3]), t(&[2, 3])],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1]).unwrap();
                weighted_sum(g, y, 2)
            }),
        ),
        (
            "mul",
            vec![t(&[2, 3]), t(&[2, 3])],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1]).unwrap();
                weighted_sum(g, y, 3)
            }),
        ),
        (
            "cp4d_conv stride 1",
            vec![
                t(&[2, 3, 3, 3, 3]),
                t(&[3, 2, 3, 3]),
                t(&[3, 2, 3, 3]),
                t(&[3]),
            ],
            Box::new(|g, v| {
                let y = g.cp4d_conv(v[0], v[1], v[2], v[3], 1).unwrap();
                weighted_sum(g, y, 4)
            }),
        ),
        (
            "cp4d_conv stride 2",
            vec![
                t(&[2, 3, 2, 5, 4]),
                t(&[2, 2, 3, 3]),
                t(&[2, 2, 3, 3]),
                t(&[2]),
            ],
            Box::new(|g, v| {
                let y = g.cp4d_conv(v[0], v[1], v[2], v[3], 2).unwrap();
                weighted_sum(g, y, 5)
            }),
        ),
        (
            "dw4d_conv",
            vec![t(&[3, 3, 3, 2, 3]), t(&[3, 3, 3]), t(&[3, 3, 3])],
            Box::new(|g, v| {
                let y = g.dw4d_conv(v[0], v[1], v[2]).unwrap();
                weighted_sum(g, y, 6)
            }),
        ),
        (
            "pw4d_conv",
            vec![t(&[3, 2, 2, 2, 2]), t(&[4, 3]), t(&[4])],
            Box::new(|g, v| {
                let y = g.pw4d_conv(v[0], v[1], v[2]).unwrap();
                weighted_sum(g, y, 7)
            }),
        ),
        (
            "group_norm",
            vec![t(&[4, 2, 3, 2, 2]), t(&[4]), t(&[4])],
            Box::new(|g, v| {
                let y = g.group_norm(v[0], v[1], v[2], 2).unwrap();
                weighted_sum(g, y, 8)
            }),
        ),
        (
            "conv2d 3x3",
            vec![t(&[2, 4, 5]), t(&[3, 2, 3, 3]), t(&[3])],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], v[2]).unwrap();
                weighted_sum(g, y, 9)
            }),
        ),
        (
            "conv2d 1x1",
            vec![t(&[2, 3, 3]), t(&[3, 2, 1, 1]), t(&[3])],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], v[2]).unwrap();
                weighted_sum(g, y, 10)
            }),
        ),
        (
            "bilinear_resize up",
            vec![t(&[2, 3, 4])],
            Box::new(|g, v| {
                let y = g.bilinear_resize(v[0], 7, 5).unwrap();
                weighted_sum(g, y, 11)
            }),
        ),
        (
            "bilinear_resize down",
            vec![t(&[1, 8, 6])],
            Box::new(|g, v| {
                let y = g.bilinear_resize(v[0], 3, 4).unwrap();
                weighted_sum(g, y, 12)
            }),
        ),
        (
            "avg_over_support_dims",
            vec![t(&[2, 2, 2, 3, 3])],
            Box::new(|g, v| {
                let y = g.avg_over_support_dims(v[0]).unwrap();
                weighted_sum(g, y, 13)
            }),
        ),
        (
            "cosine_similarity_map",
            vec![t(&[4, 5]), t(&[3, 5])],
            Box::new(|g, v| {
                let y = g.cosine_similarity_map(v[0], v[1]).unwrap();
                weighted_sum(g, y, 14)
            }),
        ),
        (
            "softmax_cross_entropy",
            vec![t(&[2, 3, 4])],
            Box::new(|g, v| {
                let target = Tensor::from_fn(&[3, 4], |i| (i % 3 == 0) as u8 as f64);
                g.softmax_cross_entropy(v[0], target).unwrap()
            }),
        ),
        (
            "concat",
            vec![t(&[1, 2, 2]), t(&[2, 2, 2])],
            Box::new(|g, v| {
                let y = g.concat(&[v[0], v[1]]).unwrap();
                weighted_sum(g, y, 15)
            }),
        ),
        (
            "mean",
            vec![t(&[3, 3])],
            Box::new(|g, v| {
                let y = g.relu(v[0]);
                let m = g.mean(y);
                let s = g.mul(m, m).unwrap();
                g.sum(s)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, leaves, build)| (name, gradcheck(&leaves, &*build, STEP, GRAD_FLOOR)))
        .collect()
}

/// A tiny episode: 4×4 feature grids, 16×16 masks, VL features and text.
pub fn tiny_episode(seed: u64) -> (QuerySample<f64>, SupportSample<f64>, TextEmbedding<f64>) {
    let mut r = rng(seed);
    let (h, c, cvl) = (4, 6, 5);
    let query = QuerySample::new(
        random_stack(&mut r, h, h, c),
        Some(random_tensor(&mut r, &[h, h, cvl])),
        random_mask(&mut r, 16, 16),
    )
    .unwrap();
    let support = SupportSample::new(
        random_stack(&mut r, h, h, c),
        random_mask(&mut r, 16, 16),
        Some(random_tensor(&mut r, &[h, h, cvl])),
        0,
    )
    .unwrap();
    let text = TextEmbedding::new(random_tensor(&mut r, &[cvl]), 0, "thing").unwrap();
    (query, support, text)
}

pub fn tiny_config(fusion: Fusion) -> DecoderConfig {
    DecoderConfig {
        d: 4,
        gn_groups: 2,
        num_dscm: 2,
        dscm_repeats: 2,
        support_stride: 2,
        fusion,
        m: 1,
        use_text: true,
    }
}

fn episode_loss(
    params: &DecoderParams<f64>,
    cfg: &DecoderConfig,
    seed: u64,
    out: (usize, usize),
) -> (Graph<f64>, BoundParams, Var) {
    let (q, s, text) = tiny_episode(seed);
    let inputs = prepare_inputs(&q, &s, Some(&text), cfg).unwrap();
    let target = fskd_core::episodic::nearest_resize(&q.gt_mask, out.0, out.1).unwrap();
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, params);
    let logits = forward_graph(&mut g, &inputs, &p, cfg, out).unwrap();
    let loss = g.softmax_cross_entropy(logits, target).unwrap();
    (g, p, loss)
}

/// Worst relative error of the cross-entropy loss gradient w.r.t. every
/// decoder parameter, on the tiny grid (h = w = 4, h' = w' = 2).
pub fn end_to_end_gradient_error(fusion: Fusion, out: (usize, usize)) -> f64 {
    let cfg = tiny_config(fusion);
    let mut params = init_params::<f64>(&cfg, 3).unwrap();
    // Nonzero biases and affine terms so their gradients are exercised away
    // from the initialization's symmetric point.
    let mut r = rng(4);
    for p in params.iter_mut() {
        if p.name.ends_with("bias") || p.name.ends_with("beta") {
            p.tensor
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = r.random_range(-0.2..0.2));
        }
    }
    let (g, bound, loss) = episode_loss(&params, &cfg, 9, out);
    let grads = g.backward(loss).unwrap();
    let eval = |p: &DecoderParams<f64>| {
        let (g, _, loss) = episode_loss(p, &cfg, 9, out);
        g.value(loss).values()[0]
    };
    let mut worst: f64 = 0.0;
    for (name, var) in bound.iter() {
        let analytic = grads.get(var).unwrap().values().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().tensor.values_mut()[k] += STEP;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().tensor.values_mut()[k] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Worst absolute error of f32 cp4d against the dense-kernel oracle over
/// `instances` random problems with every dim ≤ 5.
pub fn cp4d_oracle_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..instances {
        let ci = r.random_range(1..=4);
        let co = r.random_range(1..=4);
        let d: Vec<usize> = (0..4).map(|_| r.random_range(1..=5)).collect();
        let stride = 1 + case % 2;
        let input = random_tensor::<f64>(&mut r, &[ci, d[0], d[1], d[2], d[3]]);
        let wq = random_tensor::<f64>(&mut r, &[co, ci, 3, 3]);
        let ws = random_tensor::<f64>(&mut r, &[co, ci, 3, 3]);
        let bias = random_tensor::<f64>(&mut r, &[co]);
        let want = dense_pivot_conv4d(&input, &wq, &ws, Some(&bias), stride, 1);
        let got = cp4d_conv(
            &input.cast::<f32>(),
            &wq.cast(),
            &ws.cast(),
            &bias.cast(),
            stride,
        )
        .unwrap();
        assert_eq!(got.dims(), want.dims());
        worst = worst.max(got.cast::<f64>().max_abs_diff(&want));
    }
    worst
}

/// Worst absolute difference between dw4d and cp4d with block-diagonal
/// kernels, both in f32.
pub fn dw4d_block_diagonal_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let c = r.random_range(1..=4);
        let d: Vec<usize> = (0..4).map(|_| r.random_range(1..=5)).collect();
        let input = random_tensor::<f32>(&mut r, &[c, d[0], d[1], d[2], d[3]]);
        let wq = random_tensor::<f32>(&mut r, &[c, 3, 3]);
        let ws = random_tensor::<f32>(&mut r, &[c, 3, 3]);
        let mut dq = Tensor::<f32>::zeros(&[c, c, 3, 3]);
        let mut ds = Tensor::<f32>::zeros(&[c, c, 3, 3]);
        for k in 0..c {
            for t in 0..9 {
                dq.values_mut()[(k * c + k) * 9 + t] = wq.values()[k * 9 + t];
                ds.values_mut()[(k * c + k) * 9 + t] = ws.values()[k * 9 + t];
            }
        }
        let dw = dw4d_conv(&input, &wq, &ws).unwrap();
        let dense = cp4d_conv(&input, &dq, &ds, &Tensor::zeros(&[c]), 1).unwrap();
        worst = worst.max(dw.max_abs_diff(&dense) as f64);
    }
    worst
}

/// Worst absolute error of the masked cosine correlations against scalar loops on
/// random 2×2 grids, in f64.
pub fn correlation_oracle_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let c = r.random_range(1..=8);
        let query = random_stack(&mut r, 2, 2, c);
        let support = random_stack(&mut r, 2, 2, c);
        let mask = random_mask(&mut r, 8, 8);
        let m = 1 + trial % LAYER_COUNT;
        let masked = mask_support_features(&support, &mask).unwrap();
        let got = build_vision_correlations(&query, &masked, m).unwrap();
        let want = scalar_correlations(&query, &support, &mask, m);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            for (a, b) in g.values().iter().zip(w) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Whether every DSCM block is bit-exactly the identity once its internal
/// parameters are zeroed, on a random encoder-shaped input.
pub fn residual_identity_holds(seed: u64) -> bool {
    let cfg = DecoderConfig {
        d: 8,
        gn_groups: 4,
        ..DecoderConfig::default()
    };
    let mut params = init_params::<f64>(&cfg, seed).unwrap();
    zero_dscm(&mut params, &cfg);
    let x = random_tensor::<f64>(&mut rng(seed), &[8, 3, 4, 2, 2]);
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, &params);
    let xv = g.constant(x.clone());
    (0..cfg.num_dscm).all(|b| {
        let y = dscm_block(&mut g, xv, &p, &cfg, b).unwrap();
        g.value(y)
            .values()
            .iter()
            .zip(x.values())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    })
}
