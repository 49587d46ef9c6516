use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Source taps along one axis with `align_corners = false`: sample `d` reads
/// `(d + 0.5) * in/out - 0.5`, clamped below at 0 and at the last index.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn split_dims(dims: &[usize]) -> Result<(usize, usize, usize)> {
    if dims.len() < 2 {
        return Err(Error::shape(format!(
            "bilinear resize needs ≥2 dims, got {dims:?}"
        )));
    }
    let n = dims.len();
    Ok((dims[..n - 2].iter().product(), dims[n - 2], dims[n - 1]))
}

/// Bilinear resize of the last two dims (align-corners false).
pub fn bilinear_resize<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear resize to an empty grid"));
    }
    let (planes, h, w) = split_dims(input.dims())?;
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for plane in input.values().chunks_exact(h * w) {
        for &(y0, y1, ly) in &ty {
            let ly = T::of(ly);
            let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, lx) in &tx {
                let lx = T::of(lx);
                let top = r0[x0] + (r0[x1] - r0[x0]) * lx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * lx;
                out.push(top + (bot - top) * ly);
            }
        }
    }
    let mut dims = input.dims().to_vec();
    let n = dims.len();
    dims[n - 2] = out_h;
    dims[n - 1] = out_w;
    Tensor::new(dims, out)
}

pub fn bilinear_resize_backward<T: Scalar>(
    input_dims: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (planes, h, w) = split_dims(input_dims)?;
    let (gplanes, oh, ow) = split_dims(grad_out.dims())?;
    if gplanes != planes {
        return Err(Error::shape("bilinear resize grad: leading dims differ"));
    }
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut gx = vec![T::zero(); planes * h * w];
    for (gplane, dst) in grad_out
        .values()
        .chunks_exact(oh * ow)
        .zip(gx.chunks_exact_mut(h * w))
    {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let g = gplane[oy * ow + ox];
                let (gt, gbot) = (g * (T::one() - ly), g * ly);
                dst[y0 * w + x0] += gt * (T::one() - lx);
                dst[y0 * w + x1] += gt * lx;
                dst[y1 * w + x0] += gbot * (T::one() - lx);
                dst[y1 * w + x1] += gbot * lx;
            }
        }
    }
    Tensor::new(input_dims.to_vec(), gx)
}
