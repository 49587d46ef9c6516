//! The learnable decoder.
//!
//! ```text
//! fused volume [l, h, w, h, w]
//!   └─ encoder: cp4d (l → d, support stride) → GN → ReLU      [d, h, w, h', w']
//!   └─ num_dscm × residual DSCM block:
//!        y = x + F(x),  F = repeats × (dw4d → pw4d → GN → ReLU)
//!   └─ mean over support dims                                 [d, h, w]
//!   └─ bilinear ×2 → 2 residual 2D blocks → conv3×3 → 2 channels
//!   └─ bilinear to the requested label size                   [2, H, W]
//! ```
//!
//! Late fusion keeps the text map out of the 4D volume and merges it after
//! pooling through a small 2D branch.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MANIFEST};
pub use params::{
    count_params, init_params, param_specs, DecoderParams, Init, ParamSpec, ParamTensor,
};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::extraction::{
    self, fused_channels, FusedVolume, QuerySample, SupportSample, TextEmbedding,
};
use crate::ops::pivot_output_extent;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Early,
    Late,
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Early => "early",
            Fusion::Late => "late",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Hidden channels.
    pub d: usize,
    pub gn_groups: usize,
    pub num_dscm: usize,
    pub dscm_repeats: usize,
    pub support_stride: usize,
    pub fusion: Fusion,
    /// First backbone block used (1-based); blocks `m..=12` feed the volume.
    pub m: usize,
    pub use_text: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d: 96,
            gn_groups: 4,
            num_dscm: 2,
            dscm_repeats: 3,
            support_stride: 2,
            fusion: Fusion::Early,
            m: 1,
            use_text: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.gn_groups == 0 || !self.d.is_multiple_of(self.gn_groups) {
            return Err(Error::config(format!(
                "hidden width {} must be a positive multiple of gn_groups {}",
                self.d, self.gn_groups
            )));
        }
        if self.num_dscm == 0 || self.dscm_repeats == 0 {
            return Err(Error::config(
                "num_dscm and dscm_repeats must be at least 1",
            ));
        }
        if self.support_stride != 1 && self.support_stride != 2 {
            return Err(Error::config(format!(
                "support stride must be 1 or 2, got {}",
                self.support_stride
            )));
        }
        extraction::validate_layer_start(self.m)?;
        if self.fusion == Fusion::Late
            && self.use_text
            && (!self.d.is_multiple_of(2) || !(self.d / 2).is_multiple_of(self.gn_groups))
        {
            return Err(Error::config(format!(
                "late fusion needs d/2 = {} divisible by gn_groups {}",
                self.d / 2,
                self.gn_groups
            )));
        }
        Ok(())
    }

    /// Channels of the 4D volume entering the encoder.
    pub fn volume_channels(&self) -> usize {
        fused_channels(self.m, self.use_text && self.fusion == Fusion::Early)
    }

    fn late_text(&self) -> bool {
        self.use_text && self.fusion == Fusion::Late
    }
}

/// Network inputs for one (query, support) pair.
#[derive(Debug, Clone)]
pub struct DecoderInputs<T: Scalar = f32> {
    pub volume: FusedVolume<T>,
    /// Text activation map `[h, w]`, present only for late fusion.
    pub text_map: Option<Tensor<T>>,
}

/// Builds the decoder inputs for one support. `text` is required iff the
/// config uses the text channel.
pub fn prepare_inputs<T: Scalar>(
    query: &QuerySample<T>,
    support: &SupportSample<T>,
    text: Option<&TextEmbedding<T>>,
    cfg: &DecoderConfig,
) -> Result<DecoderInputs<T>> {
    let text = if cfg.use_text {
        let t = text
            .ok_or_else(|| Error::data("use_text is set but the episode has no text embedding"))?;
        if query.vl_features.is_none() {
            return Err(Error::data(
                "use_text is set but the query has no VL features",
            ));
        }
        Some(t)
    } else {
        None
    };
    match cfg.fusion {
        Fusion::Early => Ok(DecoderInputs {
            volume: extraction::correlation_volume(query, support, text, cfg.m)?,
            text_map: None,
        }),
        Fusion::Late => {
            let volume = extraction::correlation_volume(query, support, None, cfg.m)?;
            let text_map = match text {
                Some(t) => Some(extraction::build_text_activation(
                    query.vl_features.as_ref().expect("checked above"),
                    t,
                )?),
                None => None,
            };
            Ok(DecoderInputs { volume, text_map })
        }
    }
}

/// Parameters placed on a tape, by name.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn bind<T: Scalar>(graph: &mut Graph<T>, params: &DecoderParams<T>) -> Self {
        let vars = params
            .iter()
            .map(|p| (p.name.clone(), graph.leaf(p.tensor.clone())))
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter {name} missing from the tree")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

fn norm_relu<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    prefix: &str,
    groups: usize,
) -> Result<Var> {
    let n = g.group_norm(
        x,
        p.var(&format!("{prefix}.gamma"))?,
        p.var(&format!("{prefix}.beta"))?,
        groups,
    )?;
    Ok(g.relu(n))
}

fn conv2d_named<T: Scalar>(g: &mut Graph<T>, x: Var, p: &BoundParams, prefix: &str) -> Result<Var> {
    g.conv2d(
        x,
        p.var(&format!("{prefix}.weight"))?,
        p.var(&format!("{prefix}.bias"))?,
    )
}

/// cp4d (volume channels → d, support stride) → GN → ReLU.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    volume: Var,
    p: &BoundParams,
    cfg: &DecoderConfig,
) -> Result<Var> {
    let l = g.value(volume).dims()[0];
    if l != cfg.volume_channels() {
        return Err(Error::shape(format!(
            "volume has {l} channels, config expects {}",
            cfg.volume_channels()
        )));
    }
    let c = g.cp4d_conv(
        volume,
        p.var("encoder.wq")?,
        p.var("encoder.ws")?,
        p.var("encoder.bias")?,
        cfg.support_stride,
    )?;
    norm_relu(g, c, p, "encoder.gn", cfg.gn_groups)
}

/// Residual depth-wise-separable block `block` (0-based): `x + F(x)`.
pub fn dscm_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    cfg: &DecoderConfig,
    block: usize,
) -> Result<Var> {
    let d = g.value(x).dims()[0];
    if d != cfg.d {
        return Err(Error::shape(format!(
            "DSCM input has {d} channels, config expects {}",
            cfg.d
        )));
    }
    let mut h = x;
    for r in 0..cfg.dscm_repeats {
        let pre = format!("dscm.{block}.{r}");
        h = g.dw4d_conv(
            h,
            p.var(&format!("{pre}.dw_wq"))?,
            p.var(&format!("{pre}.dw_ws"))?,
        )?;
        h = g.pw4d_conv(
            h,
            p.var(&format!("{pre}.pw_weight"))?,
            p.var(&format!("{pre}.pw_bias"))?,
        )?;
        h = norm_relu(g, h, p, &format!("{pre}.gn"), cfg.gn_groups)?;
    }
    g.add(h, x)
}

fn residual_2d<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    prefix: &str,
    groups: usize,
) -> Result<Var> {
    let a = conv2d_named(g, x, p, &format!("{prefix}.conv1"))?;
    let a = norm_relu(g, a, p, &format!("{prefix}.gn1"), groups)?;
    let b = conv2d_named(g, a, p, &format!("{prefix}.conv2"))?;
    let b = g.group_norm(
        b,
        p.var(&format!("{prefix}.gn2.gamma"))?,
        p.var(&format!("{prefix}.gn2.beta"))?,
        groups,
    )?;
    let s = g.add(b, x)?;
    Ok(g.relu(s))
}

/// 2D refinement from a pooled `[d, h, w]` map to `[2, H, W]` logits.
fn refine_2d<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    cfg: &DecoderConfig,
    out_size: (usize, usize),
) -> Result<Var> {
    let (h, w) = (g.value(x).dims()[1], g.value(x).dims()[2]);
    let up = g.bilinear_resize(x, 2 * h, 2 * w)?;
    let r = residual_2d(g, up, p, "head.res0", cfg.gn_groups)?;
    let r = residual_2d(g, r, p, "head.res1", cfg.gn_groups)?;
    let logits = conv2d_named(g, r, p, "head.out")?;
    if out_size == (2 * h, 2 * w) {
        Ok(logits)
    } else {
        g.bilinear_resize(logits, out_size.0, out_size.1)
    }
}

fn check_out_size(h: usize, w: usize, out_size: (usize, usize)) -> Result<()> {
    if out_size.0 < h || out_size.1 < w {
        return Err(Error::config(format!(
            "output size {out_size:?} is smaller than the feature grid ({h}, {w})"
        )));
    }
    Ok(())
}

/// Pools a `[d, h, w, h', w']` map over support dims and refines it to logits.
pub fn decode_head<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    cfg: &DecoderConfig,
    out_size: (usize, usize),
) -> Result<Var> {
    let dims = g.value(x).dims().to_vec();
    x_dims_check(&dims, cfg)?;
    check_out_size(dims[1], dims[2], out_size)?;
    let pooled = g.avg_over_support_dims(x)?;
    refine_2d(g, pooled, p, cfg, out_size)
}

fn x_dims_check(dims: &[usize], cfg: &DecoderConfig) -> Result<()> {
    if dims.len() != 5 || dims[0] != cfg.d {
        return Err(Error::shape(format!(
            "head expects [{}, h, w, h', w'], got {dims:?}",
            cfg.d
        )));
    }
    Ok(())
}

/// Records the full network on `g` and returns the logits handle.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    inputs: &DecoderInputs<T>,
    p: &BoundParams,
    cfg: &DecoderConfig,
    out_size: (usize, usize),
) -> Result<Var> {
    cfg.validate()?;
    let vdims = inputs.volume.tensor.dims().to_vec();
    check_out_size(vdims[1], vdims[2], out_size)?;
    let volume = g.constant(inputs.volume.tensor.clone());
    let mut x = encode(g, volume, p, cfg)?;
    for b in 0..cfg.num_dscm {
        x = dscm_block(g, x, p, cfg, b)?;
    }
    if !cfg.late_text() {
        return decode_head(g, x, p, cfg, out_size);
    }

    let text = inputs
        .text_map
        .as_ref()
        .ok_or_else(|| Error::data("late fusion with use_text needs a text activation map"))?;
    text.expect_dims("text activation map", &vdims[1..3])?;
    let pooled = g.avg_over_support_dims(x)?;
    let t = g.constant(text.clone().reshape(&[1, vdims[1], vdims[2]])?);
    let t = conv2d_named(g, t, p, "text.conv1")?;
    let t = norm_relu(g, t, p, "text.gn1", cfg.gn_groups)?;
    let t = conv2d_named(g, t, p, "text.conv2")?;
    let t = norm_relu(g, t, p, "text.gn2", cfg.gn_groups)?;
    let merged = g.concat(&[pooled, t])?;
    let f = conv2d_named(g, merged, p, "fuse.conv1")?;
    let f = norm_relu(g, f, p, "fuse.gn1", cfg.gn_groups)?;
    let f = conv2d_named(g, f, p, "fuse.conv2")?;
    let f = norm_relu(g, f, p, "fuse.gn2", cfg.gn_groups)?;
    refine_2d(g, f, p, cfg, out_size)
}

/// Inference-only forward pass returning `[2, H, W]` logits.
pub fn forward<T: Scalar>(
    inputs: &DecoderInputs<T>,
    params: &DecoderParams<T>,
    cfg: &DecoderConfig,
    out_size: (usize, usize),
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, params);
    let logits = forward_graph(&mut g, inputs, &p, cfg, out_size)?;
    Ok(g.value(logits).clone())
}

/// Output support extent of the encoder for a given input support extent.
pub fn reduced_support(extent: usize, cfg: &DecoderConfig) -> usize {
    pivot_output_extent(extent, cfg.support_stride)
}

/// Pixelwise argmax of two-class logits: 1 where the foreground logit wins.
pub fn argmax_mask<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.expect_ndim("logits", 3)?;
    if logits.dims()[0] != 2 {
        return Err(Error::shape(format!(
            "expected 2-class logits, got {:?}",
            logits.dims()
        )));
    }
    let n = logits.len() / 2;
    let (bg, fg) = logits.values().split_at(n);
    let values = bg
        .iter()
        .zip(fg)
        .map(|(&b, &f)| if f > b { T::one() } else { T::zero() })
        .collect();
    Tensor::new(logits.dims()[1..].to_vec(), values)
}
