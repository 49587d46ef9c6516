//! Correlation volumes from frozen backbone features.
//!
//! Each of the 12 per-block feature grids of the query is compared against
//! the mask-weighted support grid by cosine similarity, giving one
//! `h×w×h×w` map per layer. A vision-language activation map (query VL
//! features against the class text embedding) can be broadcast along the
//! support dims and appended as an extra channel.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Blocks in a ViT-B backbone; one feature grid per block.
pub const LAYER_COUNT: usize = 12;

/// Per-image stack of `LAYER_COUNT` feature grids, each `h×w×c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack<T: Scalar = f32> {
    layers: Vec<Tensor<T>>,
    backbone_id: String,
}

impl<T: Scalar> FeatureStack<T> {
    pub fn new(layers: Vec<Tensor<T>>, backbone_id: impl Into<String>) -> Result<Self> {
        if layers.len() != LAYER_COUNT {
            return Err(Error::shape(format!(
                "feature stack needs {LAYER_COUNT} layers, got {}",
                layers.len()
            )));
        }
        let dims = layers[0].dims().to_vec();
        if dims.len() != 3 {
            return Err(Error::shape(format!(
                "feature layers must be h×w×c, got {dims:?}"
            )));
        }
        if let Some(bad) = layers.iter().find(|l| l.dims() != dims.as_slice()) {
            return Err(Error::shape(format!(
                "feature layers disagree: {:?} vs {dims:?}",
                bad.dims()
            )));
        }
        Ok(Self {
            layers,
            backbone_id: backbone_id.into(),
        })
    }

    /// Splits an on-disk `[12, h, w, c]` tensor into layers.
    pub fn from_tensor(stacked: &Tensor<T>, backbone_id: impl Into<String>) -> Result<Self> {
        stacked.expect_ndim("feature stack", 4)?;
        let layers = (0..stacked.dims()[0])
            .map(|i| stacked.slice_outer(i))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, backbone_id)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::stack(&self.layers).expect("layers share dims by construction")
    }

    /// `(h, w, c)`.
    pub fn grid(&self) -> (usize, usize, usize) {
        let d = self.layers[0].dims();
        (d[0], d[1], d[2])
    }

    /// Layer by 1-based block number.
    pub fn layer(&self, block: usize) -> &Tensor<T> {
        &self.layers[block - 1]
    }

    pub fn layers(&self) -> &[Tensor<T>] {
        &self.layers
    }

    pub fn backbone_id(&self) -> &str {
        &self.backbone_id
    }

    pub fn cast<U: Scalar>(&self) -> FeatureStack<U> {
        FeatureStack {
            layers: self.layers.iter().map(Tensor::cast).collect(),
            backbone_id: self.backbone_id.clone(),
        }
    }
}

pub(crate) fn check_binary<T: Scalar>(what: &str, mask: &Tensor<T>) -> Result<()> {
    mask.expect_ndim(what, 2)?;
    if let Some(v) = mask
        .values()
        .iter()
        .find(|&&v| v != T::zero() && v != T::one())
    {
        return Err(Error::data(format!("{what} must be binary, found {v}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SupportSample<T: Scalar = f32> {
    pub features: FeatureStack<T>,
    pub mask: Tensor<T>,
    pub vl_features: Option<Tensor<T>>,
    pub class_id: u32,
}

impl<T: Scalar> SupportSample<T> {
    pub fn new(
        features: FeatureStack<T>,
        mask: Tensor<T>,
        vl_features: Option<Tensor<T>>,
        class_id: u32,
    ) -> Result<Self> {
        check_binary("support mask", &mask)?;
        if mask.values().iter().all(|&v| v == T::zero()) {
            return Err(Error::data(format!(
                "support mask for class {class_id} is empty"
            )));
        }
        Ok(Self {
            features,
            mask,
            vl_features,
            class_id,
        })
    }
}

#[derive(Debug, Clone)]
pub struct QuerySample<T: Scalar = f32> {
    pub features: FeatureStack<T>,
    pub vl_features: Option<Tensor<T>>,
    pub gt_mask: Tensor<T>,
}

impl<T: Scalar> QuerySample<T> {
    pub fn new(
        features: FeatureStack<T>,
        vl_features: Option<Tensor<T>>,
        gt_mask: Tensor<T>,
    ) -> Result<Self> {
        check_binary("query ground-truth mask", &gt_mask)?;
        Ok(Self {
            features,
            vl_features,
            gt_mask,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding<T: Scalar = f32> {
    pub vector: Tensor<T>,
    pub class_id: u32,
    pub class_name: String,
}

impl<T: Scalar> TextEmbedding<T> {
    pub fn new(vector: Tensor<T>, class_id: u32, class_name: impl Into<String>) -> Result<Self> {
        vector.expect_ndim("text embedding", 1)?;
        if vector.values().iter().all(|&v| v == T::zero()) {
            return Err(Error::data(format!(
                "text embedding for class {class_id} has zero norm"
            )));
        }
        Ok(Self {
            vector,
            class_id,
            class_name: class_name.into(),
        })
    }
}

/// Stacked correlation channels, `[l, h, w, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVolume<T: Scalar = f32> {
    pub tensor: Tensor<T>,
    pub layer_range_m: usize,
    pub has_text_channel: bool,
}

impl<T: Scalar> FusedVolume<T> {
    pub fn channels(&self) -> usize {
        self.tensor.dims()[0]
    }
}

/// Channel count of a fused volume using blocks `m..=12`.
pub fn fused_channels(m: usize, with_text: bool) -> usize {
    LAYER_COUNT - m + 1 + usize::from(with_text)
}

pub fn validate_layer_start(m: usize) -> Result<()> {
    if !(1..=LAYER_COUNT).contains(&m) {
        return Err(Error::config(format!(
            "layer start m must be in 1..={LAYER_COUNT}, got {m}"
        )));
    }
    Ok(())
}

/// Bilinearly resizes a native-resolution mask to the `h×w` feature grid.
pub fn resize_mask<T: Scalar>(mask: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    mask.expect_ndim("mask", 2)?;
    ops::bilinear_resize(mask, h, w)
}

/// Multiplies every layer's features by the bilinearly resized soft mask.
pub fn mask_support_features<T: Scalar>(
    stack: &FeatureStack<T>,
    mask: &Tensor<T>,
) -> Result<FeatureStack<T>> {
    check_binary("support mask", mask)?;
    if mask.values().iter().all(|&v| v == T::zero()) {
        return Err(Error::data("support mask is empty"));
    }
    let (h, w, c) = stack.grid();
    let soft = resize_mask(mask, h, w)?;
    let layers = stack
        .layers
        .iter()
        .map(|layer| {
            let mut out = layer.clone();
            for (cell, &weight) in out.values_mut().chunks_exact_mut(c).zip(soft.values()) {
                for v in cell {
                    *v *= weight;
                }
            }
            out
        })
        .collect();
    FeatureStack::new(layers, stack.backbone_id.clone())
}

/// One `h×w×h×w` map per block `m..=12`:
/// `C[x, x'] = ReLU(cos(query[x], support[x']))`.
pub fn build_vision_correlations<T: Scalar>(
    query: &FeatureStack<T>,
    masked_support: &FeatureStack<T>,
    m: usize,
) -> Result<Vec<Tensor<T>>> {
    validate_layer_start(m)?;
    let (h, w, c) = query.grid();
    let (hs, ws, cs) = masked_support.grid();
    if c != cs {
        return Err(Error::shape(format!(
            "query has {c} channels, support has {cs}"
        )));
    }
    (m..=LAYER_COUNT)
        .map(|block| {
            let q = query.layer(block).clone().reshape(&[h * w, c])?;
            let s = masked_support.layer(block).clone().reshape(&[hs * ws, c])?;
            ops::cosine_similarity_map(&q, &s)?.reshape(&[h, w, hs, ws])
        })
        .collect()
}

/// `ReLU(cos(query_vl[x], text))` per query position.
pub fn build_text_activation<T: Scalar>(
    query_vl: &Tensor<T>,
    text: &TextEmbedding<T>,
) -> Result<Tensor<T>> {
    query_vl.expect_ndim("query VL features", 3)?;
    let (h, w, c) = (query_vl.dims()[0], query_vl.dims()[1], query_vl.dims()[2]);
    if text.vector.len() != c {
        return Err(Error::shape(format!(
            "VL features have {c} channels, text embedding has {}",
            text.vector.len()
        )));
    }
    let q = query_vl.clone().reshape(&[h * w, c])?;
    let t = text.vector.clone().reshape(&[1, c])?;
    ops::cosine_similarity_map(&q, &t)?.reshape(&[h, w])
}

/// Stacks vision maps on a leading channel axis; a text map, if given, is
/// broadcast over the support dims and appended last.
pub fn fuse_early<T: Scalar>(
    vision_maps: &[Tensor<T>],
    text_map: Option<&Tensor<T>>,
    m: usize,
) -> Result<FusedVolume<T>> {
    let first = vision_maps
        .first()
        .ok_or_else(|| Error::shape("no vision maps to fuse"))?;
    first.expect_ndim("vision map", 4)?;
    let dims = first.dims().to_vec();
    if vision_maps.len() != LAYER_COUNT - m + 1 {
        return Err(Error::shape(format!(
            "m = {m} expects {} vision maps, got {}",
            LAYER_COUNT - m + 1,
            vision_maps.len()
        )));
    }
    let (h, w, hs, ws) = (dims[0], dims[1], dims[2], dims[3]);
    let channels = vision_maps.len() + usize::from(text_map.is_some());
    let mut values = Vec::with_capacity(channels * h * w * hs * ws);
    for map in vision_maps {
        map.expect_dims("vision map", &dims)?;
        values.extend_from_slice(map.values());
    }
    if let Some(text) = text_map {
        text.expect_dims("text map", &[h, w])?;
        for &v in text.values() {
            values.extend(std::iter::repeat_n(v, hs * ws));
        }
    }
    Ok(FusedVolume {
        tensor: Tensor::new(vec![channels, h, w, hs, ws], values)?,
        layer_range_m: m,
        has_text_channel: text_map.is_some(),
    })
}

/// Mean over the support dims of one correlation map, for visual inspection.
pub fn averaged_activation_map<T: Scalar>(corr: &Tensor<T>) -> Result<Tensor<T>> {
    corr.expect_ndim("correlation map", 4)?;
    ops::avg_over_support_dims(corr)
}

/// Everything needed to build one fused volume for a (query, support) pair.
pub fn correlation_volume<T: Scalar>(
    query: &QuerySample<T>,
    support: &SupportSample<T>,
    text: Option<&TextEmbedding<T>>,
    m: usize,
) -> Result<FusedVolume<T>> {
    let masked = mask_support_features(&support.features, &support.mask)?;
    let maps = build_vision_correlations(&query.features, &masked, m)?;
    let text_map = match text {
        Some(t) => {
            let vl = query.vl_features.as_ref().ok_or_else(|| {
                Error::data("text channel requested but query has no VL features")
            })?;
            Some(build_text_activation(vl, t)?)
        }
        None => None,
    };
    fuse_early(&maps, text_map.as_ref(), m)
}
