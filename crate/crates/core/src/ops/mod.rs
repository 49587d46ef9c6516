//! Differentiable kernels.
//!
//! Every op is a pair of plain functions: a forward that validates shapes and
//! returns a fresh tensor, and a backward that maps an upstream gradient to
//! input gradients. The autodiff tape in [`crate::autodiff`] only sequences
//! these calls.

mod activation;
mod conv2d;
mod conv4d;
mod cosine;
mod loss;
mod norm;
mod pointwise;
mod reduce;
mod resize;

pub use activation::{relu, relu_backward};
pub use conv2d::{conv2d, conv2d_backward, Conv2dGrads};
pub use conv4d::{
    conv4d_backward, conv4d_forward, cp4d_conv, dw4d_conv, pivot_output_extent, Conv4dGrads,
    Conv4dSpec,
};
pub use cosine::{cosine_similarity_map, cosine_similarity_map_backward};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_backward};
pub use norm::{group_norm, group_norm_backward, GroupNormGrads, GROUP_NORM_EPS};
pub use pointwise::{pw4d_conv, pw4d_conv_backward, PointwiseGrads};
pub use reduce::{avg_over_support_dims, avg_over_support_dims_backward};
pub use resize::{bilinear_resize, bilinear_resize_backward};

use crate::tensor::Scalar;

#[inline]
pub(crate) fn axpy<T: Scalar>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Eight independent partial sums let the compiler vectorize the loop.
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let (ca, ra) = a[..n].split_at(n - n % 8);
    let (cb, rb) = b[..n].split_at(n - n % 8);
    for (xa, xb) in ca.chunks_exact(8).zip(cb.chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    let mut total =
        ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        total += x * y;
    }
    total
}
