use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

struct Layout {
    channels: usize,
    per_channel: usize,
    per_group: usize,
}

fn layout<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Layout> {
    let channels = input.dims()[0];
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::config(format!(
            "{channels} channels not divisible into {groups} groups"
        )));
    }
    gamma.expect_dims("group norm gamma", &[channels])?;
    beta.expect_dims("group norm beta", &[channels])?;
    Ok(Layout {
        channels,
        per_channel: input.len() / channels,
        per_group: channels / groups,
    })
}

/// Mean and `1/sqrt(var + eps)` for each group.
fn moments<T: Scalar>(x: &[T], groups: usize, group_len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut mean = Vec::with_capacity(groups);
    let mut rstd = Vec::with_capacity(groups);
    let n = T::of(group_len as f64);
    for chunk in x.chunks_exact(group_len) {
        let mu = chunk.iter().copied().sum::<T>() / n;
        let var = chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        mean.push(mu);
        rstd.push(T::one() / (var + eps).sqrt());
    }
    (mean, rstd)
}

/// Normalizes each channel group over (channels in group × all positions),
/// then applies the per-channel affine `gamma`, `beta`.
pub fn group_norm<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let l = layout(input, groups, gamma, beta)?;
    let x = input.values();
    let group_len = l.per_group * l.per_channel;
    let (mean, rstd) = moments(x, groups, group_len, T::of(eps));
    let mut out = vec![T::zero(); x.len()];
    for c in 0..l.channels {
        let g = c / l.per_group;
        let (ga, be) = (gamma.values()[c], beta.values()[c]);
        let scale = rstd[g] * ga;
        let range = c * l.per_channel..(c + 1) * l.per_channel;
        for (o, &v) in out[range.clone()].iter_mut().zip(&x[range]) {
            *o = (v - mean[g]) * scale + be;
        }
    }
    Tensor::new(input.dims().to_vec(), out)
}

pub struct GroupNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn group_norm_backward<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    grad_out: &Tensor<T>,
) -> Result<GroupNormGrads<T>> {
    let l = layout(input, groups, gamma, beta)?;
    grad_out.expect_dims("group norm grad", input.dims())?;
    let (x, g) = (input.values(), grad_out.values());
    let group_len = l.per_group * l.per_channel;
    let (mean, rstd) = moments(x, groups, group_len, T::of(eps));
    let n = T::of(group_len as f64);

    let mut g_gamma = vec![T::zero(); l.channels];
    let mut g_beta = vec![T::zero(); l.channels];
    let mut gx = vec![T::zero(); x.len()];
    for grp in 0..groups {
        let base = grp * group_len;
        // mean of dxhat and of dxhat * xhat over the group
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for c in grp * l.per_group..(grp + 1) * l.per_group {
            let ga = gamma.values()[c];
            let mut gb = T::zero();
            let mut gg = T::zero();
            for k in c * l.per_channel..(c + 1) * l.per_channel {
                let xhat = (x[k] - mean[grp]) * rstd[grp];
                gb += g[k];
                gg += g[k] * xhat;
            }
            g_beta[c] = gb;
            g_gamma[c] = gg;
            sum_d += gb * ga;
            sum_dx += gg * ga;
        }
        let md = sum_d / n;
        let mdx = sum_dx / n;
        for k in base..base + group_len {
            let c = k / l.per_channel;
            let xhat = (x[k] - mean[grp]) * rstd[grp];
            let dxhat = g[k] * gamma.values()[c];
            gx[k] = rstd[grp] * (dxhat - md - xhat * mdx);
        }
    }
    Ok(GroupNormGrads {
        input: Tensor::new(input.dims().to_vec(), gx)?,
        gamma: Tensor::new(vec![l.channels], g_gamma)?,
        beta: Tensor::new(vec![l.channels], g_beta)?,
    })
}
