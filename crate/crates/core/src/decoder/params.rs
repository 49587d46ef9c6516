use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DecoderConfig, Fusion};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `uniform(-a, a)` with `a = sqrt(1 / fan_in)`.
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, dims: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            dims: dims.to_vec(),
            init,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T: Scalar = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        let grad = Tensor::zeros(tensor.dims());
        Self {
            name: name.into(),
            tensor,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.values_mut().fill(T::zero());
    }
}

/// Named parameter tree in construction order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecoderParams<T: Scalar = f32> {
    entries: IndexMap<String, ParamTensor<T>>,
}

impl<T: Scalar> DecoderParams<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, param: ParamTensor<T>) {
        self.entries.insert(param.name.clone(), param);
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.entries.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.entries.values_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.iter_mut().for_each(ParamTensor::zero_grad);
    }

    pub fn cast<U: Scalar>(&self) -> DecoderParams<U> {
        DecoderParams {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        ParamTensor {
                            name: p.name.clone(),
                            tensor: p.tensor.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Exact number of learnable scalars.
pub fn count_params<T: Scalar>(params: &DecoderParams<T>) -> usize {
    params.iter().map(|p| p.tensor.len()).sum()
}

fn norm(specs: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    specs.push(ParamSpec::new(format!("{prefix}.gamma"), &[c], Init::Ones));
    specs.push(ParamSpec::new(format!("{prefix}.beta"), &[c], Init::Zeros));
}

fn conv(specs: &mut Vec<ParamSpec>, prefix: &str, co: usize, ci: usize, k: usize) {
    specs.push(ParamSpec::new(
        format!("{prefix}.weight"),
        &[co, ci, k, k],
        Init::Uniform { fan_in: ci * k * k },
    ));
    specs.push(ParamSpec::new(format!("{prefix}.bias"), &[co], Init::Zeros));
}

/// Every parameter the config implies, in construction order.
pub fn param_specs(cfg: &DecoderConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let (d, l) = (cfg.d, cfg.volume_channels());
    let mut s = Vec::new();

    let pivot = Init::Uniform { fan_in: l * 9 };
    s.push(ParamSpec::new("encoder.wq", &[d, l, 3, 3], pivot));
    s.push(ParamSpec::new("encoder.ws", &[d, l, 3, 3], pivot));
    s.push(ParamSpec::new("encoder.bias", &[d], Init::Zeros));
    norm(&mut s, "encoder.gn", d);

    for b in 0..cfg.num_dscm {
        for r in 0..cfg.dscm_repeats {
            let pre = format!("dscm.{b}.{r}");
            s.push(ParamSpec::new(
                format!("{pre}.dw_wq"),
                &[d, 3, 3],
                Init::Uniform { fan_in: 9 },
            ));
            s.push(ParamSpec::new(
                format!("{pre}.dw_ws"),
                &[d, 3, 3],
                Init::Uniform { fan_in: 9 },
            ));
            s.push(ParamSpec::new(
                format!("{pre}.pw_weight"),
                &[d, d],
                Init::Uniform { fan_in: d },
            ));
            s.push(ParamSpec::new(format!("{pre}.pw_bias"), &[d], Init::Zeros));
            norm(&mut s, &format!("{pre}.gn"), d);
        }
    }

    if cfg.use_text && cfg.fusion == Fusion::Late {
        let half = d / 2;
        conv(&mut s, "text.conv1", half, 1, 3);
        norm(&mut s, "text.gn1", half);
        conv(&mut s, "text.conv2", half, half, 3);
        norm(&mut s, "text.gn2", half);
        conv(&mut s, "fuse.conv1", d, d + half, 3);
        norm(&mut s, "fuse.gn1", d);
        conv(&mut s, "fuse.conv2", d, d, 3);
        norm(&mut s, "fuse.gn2", d);
    }

    for j in 0..2 {
        let pre = format!("head.res{j}");
        conv(&mut s, &format!("{pre}.conv1"), d, d, 3);
        norm(&mut s, &format!("{pre}.gn1"), d);
        conv(&mut s, &format!("{pre}.conv2"), d, d, 3);
        norm(&mut s, &format!("{pre}.gn2"), d);
    }
    conv(&mut s, "head.out", 2, d, 3);
    Ok(s)
}

/// Kaiming-style uniform weights, zero biases, unit GN gains. Deterministic in `seed`.
pub fn init_params<T: Scalar>(cfg: &DecoderConfig, seed: u64) -> Result<DecoderParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = DecoderParams::new();
    for spec in param_specs(cfg)? {
        let n: usize = spec.dims.iter().product();
        let values: Vec<T> = match spec.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Uniform { fan_in } => {
                if fan_in == 0 {
                    return Err(Error::config(format!("{} has zero fan-in", spec.name)));
                }
                let a = (1.0 / fan_in as f64).sqrt();
                // Draw in f32 so f32 and f64 trees hold the same values.
                (0..n)
                    .map(|_| T::of(rng.random_range(-a..a) as f32 as f64))
                    .collect()
            }
        };
        params.insert(ParamTensor::new(spec.name, Tensor::new(spec.dims, values)?));
    }
    Ok(params)
}
