use super::{axpy, dot};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct Geometry {
    ci: usize,
    co: usize,
    k: usize,
    h: usize,
    w: usize,
}

fn check<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Geometry> {
    input.expect_ndim("conv2d input", 3)?;
    weight.expect_ndim("conv2d weight", 4)?;
    let wd = weight.dims();
    let (co, ci, k) = (wd[0], wd[1], wd[2]);
    if k != wd[3] || (k != 1 && k != 3) {
        return Err(Error::shape(format!(
            "conv2d supports 1x1 and 3x3 kernels, got {wd:?}"
        )));
    }
    if input.dims()[0] != ci {
        return Err(Error::shape(format!(
            "conv2d: weight expects {ci} channels, input has {}",
            input.dims()[0]
        )));
    }
    bias.expect_dims("conv2d bias", &[co])?;
    Ok(Geometry {
        ci,
        co,
        k,
        h: input.dims()[1],
        w: input.dims()[2],
    })
}

/// Offset range of a shifted row: for tap `d` with padding `pad`, output
/// column `x` reads input column `x + d - pad`.
#[inline]
fn valid_span(d: usize, pad: usize, len: usize) -> (usize, usize, usize) {
    // (first output index, first input index, count)
    if d < pad {
        let s = pad - d;
        (s, 0, len.saturating_sub(s))
    } else {
        let s = d - pad;
        (0, s, len.saturating_sub(s))
    }
}

/// Stride-1 "same" convolution over `[c, H, W]` with a 1×1 or 3×3 kernel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = check(input, weight, bias)?;
    let (h, w, k) = (g.h, g.w, g.k);
    let pad = k / 2;
    let (x, wv) = (input.values(), weight.values());
    let mut out = vec![T::zero(); g.co * h * w];
    for o in 0..g.co {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        plane.fill(bias.values()[o]);
        for i in 0..g.ci {
            let src = &x[i * h * w..(i + 1) * h * w];
            for dy in 0..k {
                let (oy, iy, ny) = valid_span(dy, pad, h);
                for dx in 0..k {
                    let (ox, ix, nx) = valid_span(dx, pad, w);
                    let wt = wv[((o * g.ci + i) * k + dy) * k + dx];
                    for r in 0..ny {
                        let d = (oy + r) * w + ox;
                        let s = (iy + r) * w + ix;
                        axpy(&mut plane[d..d + nx], wt, &src[s..s + nx]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.co, h, w], out)
}

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let g = check(input, weight, bias)?;
    let (h, w, k) = (g.h, g.w, g.k);
    grad_out.expect_dims("conv2d grad", &[g.co, h, w])?;
    let pad = k / 2;
    let (x, wv, go) = (input.values(), weight.values(), grad_out.values());
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wv.len()];
    let mut gb = vec![T::zero(); g.co];
    for o in 0..g.co {
        let gplane = &go[o * h * w..(o + 1) * h * w];
        gb[o] = gplane.iter().copied().sum();
        for i in 0..g.ci {
            let src = &x[i * h * w..(i + 1) * h * w];
            let gsrc = &mut gx[i * h * w..(i + 1) * h * w];
            for dy in 0..k {
                let (oy, iy, ny) = valid_span(dy, pad, h);
                for dx in 0..k {
                    let (ox, ix, nx) = valid_span(dx, pad, w);
                    let widx = ((o * g.ci + i) * k + dy) * k + dx;
                    let wt = wv[widx];
                    let mut acc = T::zero();
                    for r in 0..ny {
                        let d = (oy + r) * w + ox;
                        let s = (iy + r) * w + ix;
                        acc += dot(&gplane[d..d + nx], &src[s..s + nx]);
                        axpy(&mut gsrc[s..s + nx], wt, &gplane[d..d + nx]);
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::new(input.dims().to_vec(), gx)?,
        weight: Tensor::new(weight.dims().to_vec(), gw)?,
        bias: Tensor::new(vec![g.co], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_in_window_with_ones_kernel() {
        let x = Tensor::<f32>::full(&[1, 3, 3], 1.0);
        let out = conv2d(&x, &Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.values(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn one_by_one_mixes_channels() {
        let x = Tensor::<f32>::from_fn(&[2, 2, 2], |i| i as f32);
        let w = Tensor::new(vec![1, 2, 1, 1], vec![2.0, -1.0]).unwrap();
        let out = conv2d(&x, &w, &Tensor::full(&[1], 0.5)).unwrap();
        assert_eq!(out.values(), &[-3.5, -2.5, -1.5, -0.5]);
    }

    #[test]
    fn rejects_even_kernels() {
        let x = Tensor::<f32>::zeros(&[1, 3, 3]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1])).is_err());
    }
}
