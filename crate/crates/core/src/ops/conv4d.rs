//! Center-pivot 4D convolution over `[c, h, w, hs, ws]` volumes.
//!
//! A 3×3×3×3 kernel that is nonzero only where the query offset or the
//! support offset sits at the kernel center splits into two 2D convolutions:
//! one sliding over the query plane `(h, w)` at a fixed support position, one
//! sliding over the support plane `(hs, ws)` at a fixed query position. Both
//! use zero padding 1. An optional stride subsamples the support dims only.
//!
//! The grouped form covers both the dense pivot convolution (`groups = 1`)
//! and the depth-wise variant (`groups = channels`).

use std::borrow::Cow;

use super::{axpy, dot};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Support-dim extent after a stride-`stride`, pad-1, 3-wide window.
pub fn pivot_output_extent(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv4dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub hs: usize,
    pub ws: usize,
}

impl Conv4dSpec {
    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn hs_out(&self) -> usize {
        pivot_output_extent(self.hs, self.stride)
    }

    pub fn ws_out(&self) -> usize {
        pivot_output_extent(self.ws, self.stride)
    }

    fn support_out(&self) -> usize {
        self.hs_out() * self.ws_out()
    }

    pub fn output_dims(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.h,
            self.w,
            self.hs_out(),
            self.ws_out(),
        ]
    }

    fn validate<T: Scalar>(
        input: &Tensor<T>,
        wq: &Tensor<T>,
        ws: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::config(format!(
                "support stride must be 1 or 2, got {stride}"
            )));
        }
        input.expect_ndim("conv4d input", 5)?;
        wq.expect_ndim("conv4d query kernel", 4)?;
        let d = input.dims();
        let (ci, co) = (d[0], wq.dims()[0]);
        if groups == 0 || ci % groups != 0 || co % groups != 0 {
            return Err(Error::shape(format!(
                "conv4d: {groups} groups do not divide {ci} input / {co} output channels"
            )));
        }
        let kernel = [co, ci / groups, 3, 3];
        wq.expect_dims("conv4d query kernel", &kernel)?;
        ws.expect_dims("conv4d support kernel", &kernel)?;
        if let Some(b) = bias {
            b.expect_dims("conv4d bias", &[co])?;
        }
        Ok(Self {
            in_channels: ci,
            out_channels: co,
            groups,
            stride,
            h: d[1],
            w: d[2],
            hs: d[3],
            ws: d[4],
        })
    }
}

/// Dense center-pivot 4D convolution.
///
/// `Out[o,x,x'] = bias[o] + Σ wq[o,i,p]·In[i,x+p,S(x')] + Σ ws[o,i,p']·In[i,x,S(x')+p']`,
/// where `S` maps a strided support coordinate back to the input grid. At the
/// joint kernel center both taps contribute.
pub fn cp4d_conv<T: Scalar>(
    input: &Tensor<T>,
    wq: &Tensor<T>,
    ws: &Tensor<T>,
    bias: &Tensor<T>,
    support_stride: usize,
) -> Result<Tensor<T>> {
    conv4d_forward(input, wq, ws, Some(bias), support_stride, 1)
}

/// Depth-wise center-pivot 4D convolution: channel `k` of the output sees only
/// channel `k` of the input. Kernels are `[c, 3, 3]`; stride 1, no bias.
pub fn dw4d_conv<T: Scalar>(
    input: &Tensor<T>,
    wq: &Tensor<T>,
    ws: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (wq, ws) = depthwise_kernels(input, wq, ws)?;
    conv4d_forward(input, &wq, &ws, None, 1, input.dims()[0])
}

fn depthwise_kernels<T: Scalar>(
    input: &Tensor<T>,
    wq: &Tensor<T>,
    ws: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    input.expect_ndim("dw4d input", 5)?;
    let c = input.dims()[0];
    wq.expect_dims("dw4d query kernel", &[c, 3, 3])?;
    ws.expect_dims("dw4d support kernel", &[c, 3, 3])?;
    Ok((
        wq.clone().reshape(&[c, 1, 3, 3])?,
        ws.clone().reshape(&[c, 1, 3, 3])?,
    ))
}

/// Grouped center-pivot 4D convolution; kernels are `[co, ci/groups, 3, 3]`.
pub fn conv4d_forward<T: Scalar>(
    input: &Tensor<T>,
    wq: &Tensor<T>,
    ws: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let spec = Conv4dSpec::validate(input, wq, ws, bias, stride, groups)?;
    let (h, w) = (spec.h, spec.w);
    let so = spec.support_out();
    let (cig, cog) = (spec.in_per_group(), spec.out_per_group());
    let sub = subsample_support(input.values(), &spec);
    let (wq, ws) = (wq.values(), ws.values());

    let mut out = vec![T::zero(); spec.out_channels * h * w * so];
    let mut patches = vec![T::zero(); spec.in_channels * 9 * so];
    for y in 0..h {
        for x in 0..w {
            support_patches(input.values(), &spec, y, x, &mut patches);
            for o in 0..spec.out_channels {
                let g = o / cog;
                let row = &mut out[((o * h + y) * w + x) * so..][..so];
                if let Some(b) = bias {
                    row.fill(b.values()[o]);
                }
                for il in 0..cig {
                    let i = g * cig + il;
                    let kbase = (o * cig + il) * 9;
                    for dy in 0..3 {
                        let Some(yy) = shifted(y, dy, h) else {
                            continue;
                        };
                        for dx in 0..3 {
                            let Some(xx) = shifted(x, dx, w) else {
                                continue;
                            };
                            let src = &sub[((i * h + yy) * w + xx) * so..][..so];
                            axpy(row, wq[kbase + dy * 3 + dx], src);
                        }
                    }
                    for k in 0..9 {
                        axpy(row, ws[kbase + k], &patches[(i * 9 + k) * so..][..so]);
                    }
                }
            }
        }
    }
    Tensor::new(spec.output_dims().to_vec(), out)
}

pub struct Conv4dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub wq: Tensor<T>,
    pub ws: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of [`conv4d_forward`]. The input gradient is only formed when
/// `need_input` is set; correlation volumes are constants and skip it.
#[allow(clippy::too_many_arguments)]
pub fn conv4d_backward<T: Scalar>(
    input: &Tensor<T>,
    wq: &Tensor<T>,
    ws: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    groups: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<Conv4dGrads<T>> {
    let spec = Conv4dSpec::validate(input, wq, ws, None, stride, groups)?;
    grad_out.expect_dims("conv4d grad", &spec.output_dims())?;
    let (h, w) = (spec.h, spec.w);
    let so = spec.support_out();
    let (ci, cig, cog) = (spec.in_channels, spec.in_per_group(), spec.out_per_group());
    let sub = subsample_support(input.values(), &spec);
    let go = grad_out.values();
    let (wqv, wsv) = (wq.values(), ws.values());

    let mut g_wq = vec![T::zero(); wqv.len()];
    let mut g_ws = vec![T::zero(); wsv.len()];
    let mut g_bias = vec![T::zero(); spec.out_channels];
    let mut g_sub = if need_input {
        vec![T::zero(); sub.len()]
    } else {
        Vec::new()
    };
    let mut g_in = if need_input {
        vec![T::zero(); input.len()]
    } else {
        Vec::new()
    };
    let mut patches = vec![T::zero(); ci * 9 * so];
    let mut g_patches = vec![T::zero(); if need_input { ci * 9 * so } else { 0 }];

    for y in 0..h {
        for x in 0..w {
            support_patches(input.values(), &spec, y, x, &mut patches);
            g_patches.fill(T::zero());
            for o in 0..spec.out_channels {
                let g = o / cog;
                let grow = &go[((o * h + y) * w + x) * so..][..so];
                if has_bias {
                    g_bias[o] += grow.iter().copied().sum::<T>();
                }
                for il in 0..cig {
                    let i = g * cig + il;
                    let kbase = (o * cig + il) * 9;
                    for dy in 0..3 {
                        let Some(yy) = shifted(y, dy, h) else {
                            continue;
                        };
                        for dx in 0..3 {
                            let Some(xx) = shifted(x, dx, w) else {
                                continue;
                            };
                            let at = ((i * h + yy) * w + xx) * so;
                            let k = kbase + dy * 3 + dx;
                            g_wq[k] += dot(grow, &sub[at..at + so]);
                            if need_input {
                                axpy(&mut g_sub[at..at + so], wqv[k], grow);
                            }
                        }
                    }
                    for k in 0..9 {
                        let at = (i * 9 + k) * so;
                        g_ws[kbase + k] += dot(grow, &patches[at..at + so]);
                        if need_input {
                            axpy(&mut g_patches[at..at + so], wsv[kbase + k], grow);
                        }
                    }
                }
            }
            if need_input {
                scatter_support_patches(&mut g_in, &spec, y, x, &g_patches);
            }
        }
    }

    let input_grad = if need_input {
        scatter_subsampled(&mut g_in, &g_sub, &spec);
        Some(Tensor::new(input.dims().to_vec(), g_in)?)
    } else {
        None
    };
    Ok(Conv4dGrads {
        input: input_grad,
        wq: Tensor::new(wq.dims().to_vec(), g_wq)?,
        ws: Tensor::new(ws.dims().to_vec(), g_ws)?,
        bias: if has_bias {
            Some(Tensor::new(vec![spec.out_channels], g_bias)?)
        } else {
            None
        },
    })
}

/// `pos + offset - 1` if it stays inside `[0, extent)`.
#[inline]
fn shifted(pos: usize, offset: usize, extent: usize) -> Option<usize> {
    let p = (pos + offset).checked_sub(1)?;
    (p < extent).then_some(p)
}

/// Input restricted to the strided support positions, `[ci, h, w, hs', ws']`.
fn subsample_support<'a, T: Scalar>(input: &'a [T], spec: &Conv4dSpec) -> Cow<'a, [T]> {
    if spec.stride == 1 {
        return Cow::Borrowed(input);
    }
    let (hso, wso) = (spec.hs_out(), spec.ws_out());
    let planes = spec.in_channels * spec.h * spec.w;
    let mut out = Vec::with_capacity(planes * hso * wso);
    for plane in input.chunks_exact(spec.hs * spec.ws) {
        for ys in 0..hso {
            let row = &plane[ys * spec.stride * spec.ws..];
            out.extend((0..wso).map(|xs| row[xs * spec.stride]));
        }
    }
    Cow::Owned(out)
}

fn scatter_subsampled<T: Scalar>(g_in: &mut [T], g_sub: &[T], spec: &Conv4dSpec) {
    let (hso, wso) = (spec.hs_out(), spec.ws_out());
    let plane_in = spec.hs * spec.ws;
    for (p, gplane) in g_sub.chunks_exact(hso * wso).enumerate() {
        let dst = &mut g_in[p * plane_in..(p + 1) * plane_in];
        for ys in 0..hso {
            for xs in 0..wso {
                dst[ys * spec.stride * spec.ws + xs * spec.stride] += gplane[ys * wso + xs];
            }
        }
    }
}

/// Fills `patches[(i*9 + k)*S' + s']` with the support-plane value under tap
/// `k` for output support position `s'`, at query position `(y, x)`.
fn support_patches<T: Scalar>(
    input: &[T],
    spec: &Conv4dSpec,
    y: usize,
    x: usize,
    patches: &mut [T],
) {
    let (hso, wso) = (spec.hs_out(), spec.ws_out());
    let so = hso * wso;
    let plane_len = spec.hs * spec.ws;
    for i in 0..spec.in_channels {
        let plane = &input[((i * spec.h + y) * spec.w + x) * plane_len..][..plane_len];
        for dy in 0..3 {
            for dx in 0..3 {
                let dst = &mut patches[(i * 9 + dy * 3 + dx) * so..][..so];
                for ys in 0..hso {
                    let drow = &mut dst[ys * wso..(ys + 1) * wso];
                    match shifted(ys * spec.stride, dy, spec.hs) {
                        None => drow.fill(T::zero()),
                        Some(sy) => {
                            let srow = &plane[sy * spec.ws..(sy + 1) * spec.ws];
                            for (xs, d) in drow.iter_mut().enumerate() {
                                *d = match shifted(xs * spec.stride, dx, spec.ws) {
                                    Some(sx) => srow[sx],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`support_patches`].
fn scatter_support_patches<T: Scalar>(
    g_in: &mut [T],
    spec: &Conv4dSpec,
    y: usize,
    x: usize,
    g_patches: &[T],
) {
    let (hso, wso) = (spec.hs_out(), spec.ws_out());
    let so = hso * wso;
    let plane_len = spec.hs * spec.ws;
    for i in 0..spec.in_channels {
        let plane = &mut g_in[((i * spec.h + y) * spec.w + x) * plane_len..][..plane_len];
        for dy in 0..3 {
            for dx in 0..3 {
                let src = &g_patches[(i * 9 + dy * 3 + dx) * so..][..so];
                for ys in 0..hso {
                    let Some(sy) = shifted(ys * spec.stride, dy, spec.hs) else {
                        continue;
                    };
                    for xs in 0..wso {
                        if let Some(sx) = shifted(xs * spec.stride, dx, spec.ws) {
                            plane[sy * spec.ws + sx] += src[ys * wso + xs];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: &[usize]) -> Tensor<f32> {
        Tensor::from_fn(dims, |i| ((i * 7919) % 23) as f32 / 23.0 - 0.4)
    }

    #[test]
    fn zero_kernels_give_bias() {
        let input = ramp(&[2, 3, 3, 4, 4]);
        let zeros = Tensor::zeros(&[3, 2, 3, 3]);
        let bias = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = cp4d_conv(&input, &zeros, &zeros, &bias, 2).unwrap();
        assert_eq!(out.dims(), &[3, 3, 3, 2, 2]);
        for o in 0..3 {
            let ch = out.slice_outer(o).unwrap();
            assert!(ch.values().iter().all(|&v| v == bias.values()[o]));
        }
    }

    #[test]
    fn center_query_tap_is_identity() {
        let input = ramp(&[1, 4, 3, 5, 2]);
        let mut wq = Tensor::zeros(&[1, 1, 3, 3]);
        wq.set(&[0, 0, 1, 1], 1.0);
        let out = cp4d_conv(
            &input,
            &wq,
            &Tensor::zeros(&[1, 1, 3, 3]),
            &Tensor::zeros(&[1]),
            1,
        )
        .unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn center_support_tap_is_identity() {
        let input = ramp(&[1, 2, 2, 3, 3]);
        let mut ws = Tensor::zeros(&[1, 3, 3]);
        ws.set(&[0, 1, 1], 1.0);
        let out = dw4d_conv(&input, &Tensor::zeros(&[1, 3, 3]), &ws).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn stride_extent_rounds_up() {
        assert_eq!(pivot_output_extent(30, 2), 15);
        assert_eq!(pivot_output_extent(5, 2), 3);
        assert_eq!(pivot_output_extent(5, 1), 5);
    }

    #[test]
    fn rejects_bad_stride_and_shapes() {
        let input = ramp(&[2, 2, 2, 2, 2]);
        let k = Tensor::zeros(&[1, 2, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            cp4d_conv(&input, &k, &k, &b, 3),
            Err(Error::Config(_))
        ));
        let bad = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            cp4d_conv(&input, &bad, &bad, &b, 1),
            Err(Error::Shape(_))
        ));
        let dwk = Tensor::zeros(&[3, 3, 3]);
        assert!(matches!(
            dw4d_conv(&input, &dwk, &dwk),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn depthwise_isolates_channels() {
        let mut input = ramp(&[3, 3, 3, 3, 3]);
        let per = 81;
        input.values_mut()[per..2 * per].fill(0.0);
        let wq = ramp(&[3, 3, 3]);
        let ws = ramp(&[3, 3, 3]).map(|v| v * 2.0);
        let out = dw4d_conv(&input, &wq, &ws).unwrap();
        assert!(out.values()[per..2 * per].iter().all(|&v| v == 0.0));
    }
}
