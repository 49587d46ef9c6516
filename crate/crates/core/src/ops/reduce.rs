use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn split(dims: &[usize]) -> Result<(usize, usize)> {
    if dims.len() < 3 {
        return Err(Error::shape(format!(
            "support pooling needs ≥3 dims, got {dims:?}"
        )));
    }
    let n = dims.len();
    Ok((dims[..n - 2].iter().product(), dims[n - 2] * dims[n - 1]))
}

/// Arithmetic mean over the last two dims: `[.., hs, ws] -> [..]`.
pub fn avg_over_support_dims<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, plane) = split(input.dims())?;
    let n = T::of(plane as f64);
    let values = input
        .values()
        .chunks_exact(plane)
        .map(|c| c.iter().copied().sum::<T>() / n)
        .collect();
    Tensor::new(input.dims()[..input.ndim() - 2].to_vec(), values)
}

pub fn avg_over_support_dims_backward<T: Scalar>(
    input_dims: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (outer, plane) = split(input_dims)?;
    grad_out.expect_dims("support pooling grad", &input_dims[..input_dims.len() - 2])?;
    let n = T::of(plane as f64);
    let mut gx = Vec::with_capacity(outer * plane);
    for &g in grad_out.values() {
        gx.extend(std::iter::repeat_n(g / n, plane));
    }
    Tensor::new(input_dims.to_vec(), gx)
}
