//! Binary 8-bit PGM (P5) export for activation maps and masks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn encode_bytes(h: usize, w: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

fn plane_dims(map: &Tensor<f32>) -> Result<(usize, usize)> {
    map.expect_ndim("PGM export", 2)?;
    Ok((map.dims()[0], map.dims()[1]))
}

/// Min-max normalizes `map` to 0..=255. A constant map encodes as all zeros.
pub fn encode_minmax(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(map)?;
    let (lo, hi) = map
        .values()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let pixels = map.values().iter().map(move |&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    });
    Ok(encode_bytes(h, w, pixels))
}

/// Binary mask: 0 → black, anything else → white.
pub fn encode_mask(mask: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(mask)?;
    Ok(encode_bytes(
        h,
        w,
        mask.values()
            .iter()
            .map(|&v| if v != 0.0 { 255 } else { 0 }),
    ))
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
