use super::dot;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check<T: Scalar>(query: &Tensor<T>, support: &Tensor<T>) -> Result<(usize, usize, usize)> {
    query.expect_ndim("cosine query", 2)?;
    support.expect_ndim("cosine support", 2)?;
    let (n, c) = (query.dims()[0], query.dims()[1]);
    let (m, cs) = (support.dims()[0], support.dims()[1]);
    if c != cs {
        return Err(Error::shape(format!(
            "cosine: channel mismatch {c} vs {cs}"
        )));
    }
    Ok((n, m, c))
}

fn row_norms<T: Scalar>(rows: &[T], c: usize) -> Vec<T> {
    rows.chunks_exact(c).map(|r| dot(r, r).sqrt()).collect()
}

/// `out[i, j] = ReLU(cos(q_i, s_j))` for `[n, c]` queries and `[m, c]`
/// supports. A zero-norm row yields 0 against everything.
pub fn cosine_similarity_map<T: Scalar>(
    query: &Tensor<T>,
    support: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, m, c) = check(query, support)?;
    let qn = row_norms(query.values(), c);
    let sn = row_norms(support.values(), c);
    let mut out = vec![T::zero(); n * m];
    for (i, q) in query.values().chunks_exact(c).enumerate() {
        if qn[i] == T::zero() {
            continue;
        }
        let row = &mut out[i * m..(i + 1) * m];
        for (j, s) in support.values().chunks_exact(c).enumerate() {
            if sn[j] == T::zero() {
                continue;
            }
            let cos = dot(q, s) / (qn[i] * sn[j]);
            row[j] = cos.max(T::zero()).min(T::one());
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Gradients w.r.t. query and support rows. Entries clamped by the ReLU (or
/// involving a zero-norm row) pass no gradient.
pub fn cosine_similarity_map_backward<T: Scalar>(
    query: &Tensor<T>,
    support: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, m, c) = check(query, support)?;
    grad_out.expect_dims("cosine grad", &[n, m])?;
    let (qv, sv, g) = (query.values(), support.values(), grad_out.values());
    let qn = row_norms(qv, c);
    let sn = row_norms(sv, c);
    let mut gq = vec![T::zero(); n * c];
    let mut gs = vec![T::zero(); m * c];
    for i in 0..n {
        if qn[i] == T::zero() {
            continue;
        }
        let q = &qv[i * c..(i + 1) * c];
        for j in 0..m {
            if sn[j] == T::zero() {
                continue;
            }
            let s = &sv[j * c..(j + 1) * c];
            let inv = T::one() / (qn[i] * sn[j]);
            let cos = dot(q, s) * inv;
            let gij = g[i * m + j];
            if cos <= T::zero() || gij == T::zero() {
                continue;
            }
            // d cos / dq = s/(|q||s|) - cos q/|q|^2, symmetric for s.
            let aq = cos / (qn[i] * qn[i]);
            let as_ = cos / (sn[j] * sn[j]);
            for k in 0..c {
                gq[i * c + k] += gij * (s[k] * inv - aq * q[k]);
                gs[j * c + k] += gij * (q[k] * inv - as_ * s[k]);
            }
        }
    }
    Ok((Tensor::new(vec![n, c], gq)?, Tensor::new(vec![m, c], gs)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::new(vec![v.len(), 2], v.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn identical_and_opposite_vectors() {
        let q = rows(&[[1.0, 0.0]]);
        assert_eq!(
            cosine_similarity_map(&q, &rows(&[[1.0, 0.0]]))
                .unwrap()
                .values(),
            &[1.0]
        );
        assert_eq!(
            cosine_similarity_map(&q, &rows(&[[-1.0, 0.0]]))
                .unwrap()
                .values(),
            &[0.0]
        );
    }

    #[test]
    fn zero_rows_give_zero() {
        let q = rows(&[[0.0, 0.0], [3.0, 4.0]]);
        let s = rows(&[[3.0, 4.0], [0.0, 0.0]]);
        let out = cosine_similarity_map(&q, &s).unwrap();
        assert_eq!(out.values(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let q = Tensor::<f64>::zeros(&[2, 3]);
        let s = Tensor::<f64>::zeros(&[2, 4]);
        assert!(matches!(
            cosine_similarity_map(&q, &s),
            Err(Error::Shape(_))
        ));
    }
}
