use super::{axpy, dot};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    if input.ndim() < 2 {
        return Err(Error::shape(format!(
            "pw4d input needs a channel axis, got {:?}",
            input.dims()
        )));
    }
    weight.expect_ndim("pw4d weight", 2)?;
    let (co, ci) = (weight.dims()[0], weight.dims()[1]);
    if input.dims()[0] != ci {
        return Err(Error::shape(format!(
            "pw4d: weight expects {ci} input channels, input has {}",
            input.dims()[0]
        )));
    }
    bias.expect_dims("pw4d bias", &[co])?;
    Ok((co, ci, input.len() / ci))
}

/// Point-wise channel mixing: at every position, `out = weight · in + bias`.
/// Works for any trailing spatial shape.
pub fn pw4d_conv<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (co, ci, n) = check(input, weight, bias)?;
    let (x, wv) = (input.values(), weight.values());
    let mut out = vec![T::zero(); co * n];
    for (o, row) in out.chunks_exact_mut(n).enumerate() {
        row.fill(bias.values()[o]);
        for i in 0..ci {
            axpy(row, wv[o * ci + i], &x[i * n..(i + 1) * n]);
        }
    }
    let mut dims = input.dims().to_vec();
    dims[0] = co;
    Tensor::new(dims, out)
}

pub struct PointwiseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn pw4d_conv_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<PointwiseGrads<T>> {
    let (co, ci, n) = check(input, weight, bias)?;
    if grad_out.len() != co * n || grad_out.dims()[0] != co {
        return Err(Error::shape(format!(
            "pw4d grad has dims {:?}",
            grad_out.dims()
        )));
    }
    let (x, wv, g) = (input.values(), weight.values(), grad_out.values());
    let mut gx = vec![T::zero(); ci * n];
    let mut gw = vec![T::zero(); co * ci];
    let mut gb = vec![T::zero(); co];
    for o in 0..co {
        let grow = &g[o * n..(o + 1) * n];
        gb[o] = grow.iter().copied().sum();
        for i in 0..ci {
            gw[o * ci + i] = dot(grow, &x[i * n..(i + 1) * n]);
            axpy(&mut gx[i * n..(i + 1) * n], wv[o * ci + i], grow);
        }
    }
    Ok(PointwiseGrads {
        input: Tensor::new(input.dims().to_vec(), gx)?,
        weight: Tensor::new(vec![co, ci], gw)?,
        bias: Tensor::new(vec![co], gb)?,
    })
}
