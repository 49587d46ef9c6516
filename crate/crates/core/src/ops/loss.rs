use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<usize> {
    logits.expect_ndim("cross-entropy logits", 3)?;
    if logits.dims()[0] != 2 {
        return Err(Error::shape(format!(
            "cross-entropy expects 2-class logits, got {:?}",
            logits.dims()
        )));
    }
    target.expect_dims("cross-entropy target", &logits.dims()[1..])?;
    if let Some(v) = target
        .values()
        .iter()
        .find(|&&v| v != T::zero() && v != T::one())
    {
        return Err(Error::data(format!(
            "cross-entropy target must be binary, found {v}"
        )));
    }
    Ok(target.len())
}

/// Two-class softmax cross-entropy, averaged over pixels.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let n = check(logits, target)?;
    let (bg, fg) = logits.values().split_at(n);
    let mut total = T::zero();
    for ((&a, &b), &t) in bg.iter().zip(fg).zip(target.values()) {
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        total += lse - if t == T::one() { b } else { a };
    }
    Ok(total / T::of(n as f64))
}

/// Gradient w.r.t. logits: `(softmax - onehot) / pixels`, scaled by `grad`.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    grad: T,
) -> Result<Tensor<T>> {
    let n = check(logits, target)?;
    let (bg, fg) = logits.values().split_at(n);
    let scale = grad / T::of(n as f64);
    let mut g = vec![T::zero(); 2 * n];
    for (k, ((&a, &b), &t)) in bg.iter().zip(fg).zip(target.values()).enumerate() {
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let p_fg = eb / (ea + eb);
        let p_bg = T::one() - p_fg;
        g[k] = scale * (p_bg - (T::one() - t));
        g[n + k] = scale * (p_fg - t);
    }
    Tensor::new(logits.dims().to_vec(), g)
}
