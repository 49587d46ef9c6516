//! Brute-force reference implementations and fixtures shared by the
//! integration tests. Everything here is deliberately naive.

#![allow(dead_code)]

use std::path::Path;

use fskd_core::autodiff::{Graph, Var};
use fskd_core::decoder::{DecoderConfig, DecoderParams};
use fskd_core::extraction::{FeatureStack, LAYER_COUNT};
use fskd_core::store::{generate_synthetic, SyntheticConfig, SyntheticSet};
use fskd_core::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar>(rng: &mut impl Rng, dims: &[usize]) -> Tensor<T> {
    let n = dims.iter().product();
    let v = (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
    Tensor::new(dims.to_vec(), v).unwrap()
}

/// Center-pivot 4D convolution through a materialized 3×3×3×3 kernel:
/// `K[o,i,a,b,c,d] = wq[o,i,a,b]·[c=d=1] + ws[o,i,c,d]·[a=b=1]`, applied by
/// direct summation with zero padding 1 and the stride on the support dims.
pub fn dense_pivot_conv4d(
    input: &Tensor<f64>,
    wq: &Tensor<f64>,
    ws: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    groups: usize,
) -> Tensor<f64> {
    let [ci, h, w, hs, wsz] = input.dims().try_into().unwrap();
    let co = wq.dims()[0];
    let cig = ci / groups;
    let cog = co / groups;
    let mut kernel = vec![0.0; co * cig * 81];
    let kidx = |o: usize, i: usize, a: usize, b: usize, c: usize, d: usize| {
        ((((o * cig + i) * 3 + a) * 3 + b) * 3 + c) * 3 + d
    };
    for o in 0..co {
        for i in 0..cig {
            for a in 0..3 {
                for b in 0..3 {
                    kernel[kidx(o, i, a, b, 1, 1)] += wq.values()[((o * cig + i) * 3 + a) * 3 + b];
                    kernel[kidx(o, i, 1, 1, a, b)] += ws.values()[((o * cig + i) * 3 + a) * 3 + b];
                }
            }
        }
    }
    let (ho, wo) = (hs.div_ceil(stride), wsz.div_ceil(stride));
    let at = |i: usize, y: isize, x: isize, ys: isize, xs: isize| -> f64 {
        if y < 0
            || x < 0
            || ys < 0
            || xs < 0
            || y >= h as isize
            || x >= w as isize
            || ys >= hs as isize
            || xs >= wsz as isize
        {
            0.0
        } else {
            input.values()
                [(((i * h + y as usize) * w + x as usize) * hs + ys as usize) * wsz + xs as usize]
        }
    };
    let mut out = Vec::with_capacity(co * h * w * ho * wo);
    for o in 0..co {
        let g = o / cog;
        for y in 0..h {
            for x in 0..w {
                for ys in 0..ho {
                    for xs in 0..wo {
                        let mut acc = bias.map_or(0.0, |b| b.values()[o]);
                        for i in 0..cig {
                            for a in 0..3 {
                                for b in 0..3 {
                                    for c in 0..3 {
                                        for d in 0..3 {
                                            acc += kernel[kidx(o, i, a, b, c, d)]
                                                * at(
                                                    g * cig + i,
                                                    y as isize + a as isize - 1,
                                                    x as isize + b as isize - 1,
                                                    (ys * stride) as isize + c as isize - 1,
                                                    (xs * stride) as isize + d as isize - 1,
                                                );
                                        }
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, h, w, ho, wo], out).unwrap()
}

/// `max(0, cos(a, b))` by scalar loops; zero-norm inputs give 0.
pub fn scalar_relu_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).max(0.0)
}

/// Align-corners-false bilinear resize of one plane, written independently of
/// the library kernel.
pub fn bilinear_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let v = src[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                + src[y0 * w + x1] * (1.0 - fy) * fx
                + src[y1 * w + x0] * fy * (1.0 - fx)
                + src[y1 * w + x1] * fy * fx;
            out.push(v);
        }
    }
    out
}

/// The masked cosine correlation tensor by scalar loops:
/// `C[l][y,x,ys,xs] = ReLU(cos(q_l[y,x], s_l[ys,xs] · m[ys,xs]))`, with the
/// mask bilinearly resized to the support grid.
pub fn scalar_correlations(
    query: &FeatureStack<f64>,
    support: &FeatureStack<f64>,
    mask: &Tensor<f64>,
    m: usize,
) -> Vec<Vec<f64>> {
    let (h, w, c) = query.grid();
    let (hs, ws, _) = support.grid();
    let soft = bilinear_plane(mask.values(), mask.dims()[0], mask.dims()[1], hs, ws);
    (m..=LAYER_COUNT)
        .map(|block| {
            let q = query.layer(block).values();
            let s = support.layer(block).values();
            let mut out = Vec::with_capacity(h * w * hs * ws);
            for p in 0..h * w {
                for r in 0..hs * ws {
                    let sv: Vec<f64> = s[r * c..(r + 1) * c].iter().map(|v| v * soft[r]).collect();
                    out.push(scalar_relu_cos(&q[p * c..(p + 1) * c], &sv));
                }
            }
            out
        })
        .collect()
}

pub fn random_stack(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> FeatureStack<f64> {
    let layers = (0..LAYER_COUNT)
        .map(|_| random_tensor(rng, &[h, w, c]))
        .collect();
    FeatureStack::new(layers, "test").unwrap()
}

/// A random binary mask with at least one foreground pixel.
pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> Tensor<f64> {
    let mut v: Vec<f64> = (0..h * w)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    let k = rng.random_range(0..h * w);
    v[k] = 1.0;
    Tensor::new(vec![h, w], v).unwrap()
}

/// Central finite-difference check of `loss(leaves)` against reverse-mode
/// gradients. Returns the worst relative error over all leaf entries, where
/// the relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradcheck(
    leaves: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    step: f64,
    floor: f64,
) -> f64 {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).values()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap().values().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let mut plus = leaves.to_vec();
            plus[li].values_mut()[k] += step;
            let mut minus = leaves.to_vec();
            minus[li].values_mut()[k] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Weighted sum `Σ r·x` with fixed random weights, so every output entry
/// carries a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let dims = g.value(x).dims().to_vec();
    let r = random_tensor::<f64>(&mut rng(seed), &dims);
    let r = g.constant(r);
    let prod = g.mul(x, r).unwrap();
    g.sum(prod)
}

/// Every DSCM-internal parameter set to zero.
pub fn zero_dscm(params: &mut DecoderParams<f64>, cfg: &DecoderConfig) {
    for p in params.iter_mut() {
        if p.name.starts_with("dscm.") && cfg.num_dscm > 0 {
            p.tensor.values_mut().fill(0.0);
        }
    }
}

pub fn synthetic(dir: &Path, cfg: &SyntheticConfig) -> SyntheticSet {
    generate_synthetic(dir.join("manifest.json"), cfg).unwrap()
}

pub mod suites;
