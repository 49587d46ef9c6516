//! Synthetic feature store standing in for a frozen backbone.
//!
//! Every class gets a random unit prototype in feature space and a random
//! text embedding. Each image carries one ellipse or rectangle of its class
//! on a mask four times finer than the feature grid. Feature cell `x` of
//! block `i` is
//!
//! ```text
//! f(x)·(i/12)·u_img + (1 - f(x))·bg(x) + noise
//! ```
//!
//! where `f` is the foreground fraction of the cell, `u_img` a per-image
//! perturbation of the class prototype and `bg` a smooth blend of two
//! background prototypes. Deeper blocks therefore localize the object
//! better. VL features follow the same recipe with the text embedding.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::extraction::LAYER_COUNT;
use crate::store::container::{write_tensor, Dtype};
use crate::store::manifest::{Dataset, FeatureGrid, Manifest, Record};
use crate::tensor::Tensor;

/// Upper bound on `|cos|` between any two class prototypes.
pub const MAX_PROTOTYPE_COHERENCE: f64 = 0.3;
const MAX_TEXT_COHERENCE: f64 = 0.5;
const BACKGROUND_PROTOTYPES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub dataset_id: String,
    pub n_classes: usize,
    pub images_per_class: usize,
    pub seed: u64,
    /// Feature grid side; masks are `4 * grid` on a side.
    pub grid: usize,
    pub feat_channels: usize,
    pub vl_channels: usize,
    /// Per-dimension standard deviation of vision-feature noise.
    pub vision_noise: f64,
    /// Per-dimension standard deviation of VL-feature noise.
    pub vl_noise: f64,
    /// Norm of the per-image perturbation added to the class prototype.
    pub intra_class_spread: f64,
    pub dtype: Dtype,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dataset_id: "synthetic".to_string(),
            n_classes: 8,
            images_per_class: 5,
            seed: 0,
            grid: 30,
            feat_channels: 64,
            vl_channels: 32,
            vision_noise: 0.1,
            vl_noise: 0.05,
            intra_class_spread: 0.3,
            dtype: Dtype::F32,
        }
    }
}

/// The generated store plus the latent prototypes it was built from.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub dataset: Dataset,
    pub manifest_path: PathBuf,
    pub class_prototypes: Vec<Vec<f32>>,
    pub background_prototypes: Vec<Vec<f32>>,
    pub text_embeddings: Vec<Vec<f32>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Draws unit vectors one at a time, redrawing any that come within
/// `max_coherence` of an accepted one.
fn incoherent_set(
    rng: &mut ChaCha8Rng,
    count: usize,
    dim: usize,
    max_coherence: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 10_000 * count.max(1) {
            return Err(Error::config(format!(
                "cannot draw {count} vectors in {dim} dims with |cos| < {max_coherence}"
            )));
        }
        let v = unit_vector(rng, dim);
        if out.iter().all(|u| cos(u, &v).abs() < max_coherence) {
            out.push(v);
        }
    }
    Ok(out)
}

/// Random ellipse or axis-aligned rectangle covering 10–40% of a `side²` mask.
fn random_shape(rng: &mut ChaCha8Rng, side: usize) -> Vec<bool> {
    let s = side as f64;
    loop {
        let coverage = rng.random_range(0.1..0.4);
        let aspect: f64 = rng.random_range(0.6..1.6);
        let ellipse = rng.random_bool(0.5);
        let area = coverage * s * s;
        // half extents
        let (hx, hy) = if ellipse {
            let a = (area / std::f64::consts::PI * aspect).sqrt();
            (a, area / std::f64::consts::PI / a)
        } else {
            let wdt = (area * aspect).sqrt();
            (wdt / 2.0, area / wdt / 2.0)
        };
        if 2.0 * hx >= s || 2.0 * hy >= s {
            continue;
        }
        let cx = rng.random_range(hx..s - hx);
        let cy = rng.random_range(hy..s - hy);
        let mask: Vec<bool> = (0..side * side)
            .map(|k| {
                let (py, px) = ((k / side) as f64 + 0.5, (k % side) as f64 + 0.5);
                let (dx, dy) = ((px - cx) / hx, (py - cy) / hy);
                if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                }
            })
            .collect();
        let frac = mask.iter().filter(|&&b| b).count() as f64 / (s * s);
        if (0.1..=0.4).contains(&frac) {
            return mask;
        }
    }
}

/// Foreground fraction of every `factor×factor` block.
fn block_fractions(mask: &[bool], side: usize, factor: usize) -> Vec<f64> {
    let grid = side / factor;
    let mut out = vec![0.0; grid * grid];
    for (k, &m) in mask.iter().enumerate() {
        if m {
            out[(k / side / factor) * grid + (k % side) / factor] += 1.0;
        }
    }
    let cells = (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v /= cells);
    out
}

fn noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Writes a synthetic store next to `manifest_path` and returns it opened.
pub fn generate_synthetic(
    manifest_path: impl AsRef<Path>,
    cfg: &SyntheticConfig,
) -> Result<SyntheticSet> {
    if cfg.n_classes == 0 || !cfg.n_classes.is_multiple_of(4) {
        return Err(Error::config(format!(
            "class count must be a positive multiple of 4, got {}",
            cfg.n_classes
        )));
    }
    if cfg.images_per_class == 0 || cfg.grid == 0 {
        return Err(Error::config("images per class and grid must be positive"));
    }
    let manifest_path = manifest_path.as_ref().to_path_buf();
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (g, c, cvl) = (cfg.grid, cfg.feat_channels, cfg.vl_channels);
    let side = 4 * g;

    // Class and background prototypes share one incoherent draw.
    let mut protos = incoherent_set(
        &mut rng,
        cfg.n_classes + BACKGROUND_PROTOTYPES,
        c,
        MAX_PROTOTYPE_COHERENCE,
    )?;
    let background = protos.split_off(cfg.n_classes);
    let texts = incoherent_set(&mut rng, cfg.n_classes, cvl, MAX_TEXT_COHERENCE)?;

    let mut classes = BTreeMap::new();
    let mut text_embeddings = BTreeMap::new();
    for (k, t) in texts.iter().enumerate() {
        let id = k as u32;
        classes.insert(id, format!("class_{k:02}"));
        let rel = format!("text/{k:02}.fmtc");
        write_tensor(
            root.join(&rel),
            &Tensor::new(vec![cvl], to_f32(t))?,
            cfg.dtype,
        )?;
        text_embeddings.insert(id, rel);
    }

    let mut records = Vec::with_capacity(cfg.n_classes * cfg.images_per_class);
    for (class, proto) in protos.iter().enumerate() {
        for img in 0..cfg.images_per_class {
            let image_id = format!("c{class:02}_i{img:03}");
            let mask = random_shape(&mut rng, side);
            let frac = block_fractions(&mask, side, 4);

            let jitter = unit_vector(&mut rng, c);
            let u_img: Vec<f64> = proto
                .iter()
                .zip(&jitter)
                .map(|(p, j)| p + cfg.intra_class_spread * j)
                .collect();
            let un = u_img.iter().map(|x| x * x).sum::<f64>().sqrt();
            let u_img: Vec<f64> = u_img.iter().map(|x| x / un).collect();

            let b1 = &background[rng.random_range(0..BACKGROUND_PROTOTYPES)];
            let b2 = &background[rng.random_range(0..BACKGROUND_PROTOTYPES)];
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (ca, sa) = (angle.cos(), angle.sin());
            let bg_vl = unit_vector(&mut rng, cvl);

            let mut feats = vec![0f32; LAYER_COUNT * g * g * c];
            for layer in 0..LAYER_COUNT {
                let alpha = (layer + 1) as f64 / LAYER_COUNT as f64;
                for cell in 0..g * g {
                    let (y, x) = ((cell / g) as f64 / g as f64, (cell % g) as f64 / g as f64);
                    let lambda = 0.5 + 0.5 * ((x - 0.5) * ca + (y - 0.5) * sa);
                    let f = frac[cell];
                    let out = &mut feats[(layer * g * g + cell) * c..][..c];
                    for k in 0..c {
                        let bg = lambda * b1[k] + (1.0 - lambda) * b2[k];
                        out[k] = (f * alpha * u_img[k]
                            + (1.0 - f) * bg
                            + noise(&mut rng, cfg.vision_noise))
                            as f32;
                    }
                }
            }

            let t = &texts[class];
            let mut vl = vec![0f32; g * g * cvl];
            for cell in 0..g * g {
                let f = frac[cell];
                for k in 0..cvl {
                    vl[cell * cvl + k] =
                        (f * t[k] + (1.0 - f) * bg_vl[k] + noise(&mut rng, cfg.vl_noise)) as f32;
                }
            }

            let labels: Vec<f32> = mask
                .iter()
                .map(|&m| if m { (class + 1) as f32 } else { 0.0 })
                .collect();

            let rec = Record {
                image_id: image_id.clone(),
                class_ids: vec![class as u32],
                feature_path: format!("features/{image_id}.fmtc"),
                vl_feature_path: Some(format!("vl/{image_id}.fmtc")),
                mask_path: format!("masks/{image_id}.fmtc"),
            };
            write_tensor(
                root.join(&rec.feature_path),
                &Tensor::new(vec![LAYER_COUNT, g, g, c], feats)?,
                cfg.dtype,
            )?;
            write_tensor(
                root.join(rec.vl_feature_path.as_ref().expect("set above")),
                &Tensor::new(vec![g, g, cvl], vl)?,
                cfg.dtype,
            )?;
            write_tensor(
                root.join(&rec.mask_path),
                &Tensor::new(vec![side, side], labels)?,
                Dtype::F32,
            )?;
            records.push(rec);
        }
    }

    let manifest = Manifest {
        dataset_id: cfg.dataset_id.clone(),
        backbone_id: "synthetic".to_string(),
        grid: FeatureGrid {
            h: g,
            w: g,
            c,
            layers: LAYER_COUNT,
        },
        vl_channels: Some(cvl),
        classes,
        records,
        text_embeddings,
    };
    let dataset = Dataset::from_parts(manifest, root);
    dataset.save_manifest(&manifest_path)?;
    Ok(SyntheticSet {
        dataset,
        manifest_path,
        class_prototypes: protos.iter().map(|p| to_f32(p)).collect(),
        background_prototypes: background.iter().map(|p| to_f32(p)).collect(),
        text_embeddings: texts.iter().map(|t| to_f32(t)).collect(),
    })
}
