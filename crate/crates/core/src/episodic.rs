//! Episodic protocol: class folds, episode sampling, training and K-shot
//! evaluation.
//!
//! Training runs one 1-shot episode per step: forward, two-class
//! cross-entropy against the nearest-neighbor-resized query mask, backward,
//! Adam. Evaluation runs K independent 1-shot passes per episode and votes
//! pixelwise.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::decoder::{
    argmax_mask, forward, forward_graph, init_params, prepare_inputs, save_checkpoint, BoundParams,
    DecoderConfig, DecoderParams,
};
use crate::error::{Error, Result};
use crate::extraction::{QuerySample, SupportSample, TextEmbedding};
use crate::metrics::{ConfusionAccumulator, MiouReport};
use crate::optim::{adam_step, AdamConfig};
use crate::store::Dataset;
use crate::tensor::{Scalar, Tensor};

/// RNG streams derived from one run seed.
const EPISODE_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetStyle {
    Pascal,
    Coco,
    Synthetic,
}

impl FromStr for DatasetStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pascal" => Ok(Self::Pascal),
            "coco" => Ok(Self::Coco),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::config(format!("unknown dataset style {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSpec {
    pub dataset_id: String,
    pub fold_index: usize,
    pub train_classes: BTreeSet<u32>,
    pub test_classes: BTreeSet<u32>,
}

impl FoldSpec {
    pub fn classes(&self, split: Split) -> &BTreeSet<u32> {
        match split {
            Split::Train => &self.train_classes,
            Split::Test => &self.test_classes,
        }
    }
}

/// Four disjoint train/test class partitions over classes `0..class_count`.
///
/// PASCAL-style and synthetic folds test contiguous quarters; COCO-style
/// folds test every fourth class starting at the fold index.
pub fn make_folds(
    dataset_id: &str,
    style: DatasetStyle,
    class_count: usize,
) -> Result<Vec<FoldSpec>> {
    if class_count == 0 || !class_count.is_multiple_of(4) {
        return Err(Error::config(format!(
            "class count {class_count} is not divisible into 4 folds"
        )));
    }
    match (style, class_count) {
        (DatasetStyle::Pascal, n) if n != 20 => {
            return Err(Error::config(format!(
                "PASCAL-style folds need 20 classes, got {n}"
            )));
        }
        (DatasetStyle::Coco, n) if n != 80 => {
            return Err(Error::config(format!(
                "COCO-style folds need 80 classes, got {n}"
            )));
        }
        _ => {}
    }
    let quarter = class_count / 4;
    Ok((0..4)
        .map(|fold| {
            let test: BTreeSet<u32> = match style {
                DatasetStyle::Coco => (fold..class_count).step_by(4).map(|c| c as u32).collect(),
                DatasetStyle::Pascal | DatasetStyle::Synthetic => (fold * quarter
                    ..(fold + 1) * quarter)
                    .map(|c| c as u32)
                    .collect(),
            };
            let train = (0..class_count as u32)
                .filter(|c| !test.contains(c))
                .collect();
            FoldSpec {
                dataset_id: dataset_id.to_string(),
                fold_index: fold,
                train_classes: train,
                test_classes: test,
            }
        })
        .collect())
}

/// The fold of a dataset, checking class ids are exactly `0..n`.
pub fn fold_for(dataset: &Dataset, style: DatasetStyle, fold: usize) -> Result<FoldSpec> {
    if fold > 3 {
        return Err(Error::config(format!(
            "fold index must be 0..=3, got {fold}"
        )));
    }
    let ids = dataset.class_ids();
    if ids.iter().enumerate().any(|(i, &c)| c as usize != i) {
        return Err(Error::data("class ids must be contiguous from 0"));
    }
    Ok(make_folds(&dataset.manifest.dataset_id, style, ids.len())?.swap_remove(fold))
}

/// Which records make up an episode, before any file is read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeRef {
    pub class_id: u32,
    pub query: usize,
    pub supports: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub query: QuerySample,
    pub supports: Vec<SupportSample>,
    pub class_id: u32,
    pub text: Option<TextEmbedding>,
    pub query_image: String,
}

/// Draws a class uniformly from the split, then `k + 1` distinct images of it.
pub fn sample_episode_ref(
    dataset: &Dataset,
    fold: &FoldSpec,
    split: Split,
    k: usize,
    rng: &mut impl Rng,
) -> Result<EpisodeRef> {
    if k == 0 {
        return Err(Error::data("episodes need at least one support"));
    }
    let classes: Vec<u32> = fold.classes(split).iter().copied().collect();
    if classes.is_empty() {
        return Err(Error::config("split has no classes"));
    }
    let class_id = classes[rng.random_range(0..classes.len())];
    let images = dataset.images_of(class_id);
    if images.len() < k + 1 {
        return Err(Error::Sampling {
            class_id,
            available: images.len(),
            required: k + 1,
        });
    }
    let picked = sample(rng, images.len(), k + 1).into_vec();
    Ok(EpisodeRef {
        class_id,
        query: images[picked[0]],
        supports: picked[1..].iter().map(|&i| images[i]).collect(),
    })
}

pub fn load_episode(dataset: &Dataset, r: &EpisodeRef) -> Result<Episode> {
    let query = QuerySample::new(
        dataset.load_features(r.query)?,
        dataset.load_vl_features(r.query)?,
        dataset.load_mask(r.query, r.class_id)?,
    )?;
    let supports = r
        .supports
        .iter()
        .map(|&s| {
            SupportSample::new(
                dataset.load_features(s)?,
                dataset.load_mask(s, r.class_id)?,
                dataset.load_vl_features(s)?,
                r.class_id,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let text = if dataset.manifest.text_embeddings.contains_key(&r.class_id) {
        Some(dataset.load_text(r.class_id)?)
    } else {
        None
    };
    Ok(Episode {
        query,
        supports,
        class_id: r.class_id,
        text,
        query_image: dataset.record(r.query).image_id.clone(),
    })
}

pub fn sample_episode(
    dataset: &Dataset,
    fold: &FoldSpec,
    split: Split,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let r = sample_episode_ref(dataset, fold, split, k, rng)?;
    load_episode(dataset, &r)
}

/// Nearest-neighbor resize of a binary mask (sample centers map to centers).
pub fn nearest_resize<T: Scalar>(mask: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    mask.expect_ndim("mask", 2)?;
    let (sh, sw) = (mask.dims()[0], mask.dims()[1]);
    let pick = |d: usize, src: usize, dst: usize| {
        (((d as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = pick(y, sh, h);
        for x in 0..w {
            out.push(mask.values()[sy * sw + pick(x, sw, w)]);
        }
    }
    Tensor::new(vec![h, w], out)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub iterations: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: DecoderParams<f32>,
    /// First and second Adam moments, aligned with `params`.
    pub moments: IndexMap<String, (Vec<f32>, Vec<f32>)>,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: DecoderParams<f32>, seed: u64) -> Self {
        let moments = params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    (vec![0.0; p.tensor.len()], vec![0.0; p.tensor.len()]),
                )
            })
            .collect();
        Self {
            params,
            moments,
            step: 0,
            seed,
        }
    }

    /// Applies one Adam step with the gradients currently stored in `params`.
    pub fn apply_adam(&mut self, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        for p in self.params.iter_mut() {
            let (m, v) = self
                .moments
                .get_mut(&p.name)
                .ok_or_else(|| Error::State(format!("no Adam moments for {}", p.name)))?;
            adam_step(p.tensor.values_mut(), p.grad.values(), m, v, self.step, cfg)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// `(step, loss)` for every step, 1-based.
    pub losses: Vec<(u64, f64)>,
}

/// Output size used for the training loss: the head's native resolution.
pub fn training_out_size(h: usize, w: usize) -> (usize, usize) {
    (2 * h, 2 * w)
}

/// Forward + backward on one 1-shot episode; gradients land in `params`.
pub fn loss_and_grads(
    episode: &Episode,
    params: &mut DecoderParams<f32>,
    cfg: &DecoderConfig,
) -> Result<f64> {
    let support = episode
        .supports
        .first()
        .ok_or_else(|| Error::data("episode has no support"))?;
    let inputs = prepare_inputs(&episode.query, support, episode.text.as_ref(), cfg)?;
    let (h, w, _) = episode.query.features.grid();
    let out = training_out_size(h, w);
    let target = nearest_resize(&episode.query.gt_mask, out.0, out.1)?;

    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let logits = forward_graph(&mut g, &inputs, &bound, cfg, out)?;
    let loss = g.softmax_cross_entropy(logits, target)?;
    let value = g.value(loss).values()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {value} on episode with query {} (class {})",
            episode.query_image, episode.class_id
        )));
    }
    let grads = g.backward(loss)?;
    for (name, var) in bound.iter() {
        let grad = grads
            .get(var)
            .ok_or_else(|| Error::State(format!("no gradient for {name}")))?;
        let p = params.get_mut(name).expect("bound from this tree");
        p.grad = grad.clone();
    }
    Ok(value)
}

/// Trains from `init_params(cfg, seed)` for `iterations` 1-shot episodes.
pub fn train(
    dataset: &Dataset,
    fold: &FoldSpec,
    cfg: &DecoderConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    opts.adam.validate()?;
    let params = init_params::<f32>(cfg, opts.seed)?;
    let mut state = TrainState::new(params, opts.seed);
    let mut rng = episode_rng(opts.seed, EPISODE_STREAM);
    let mut losses = Vec::with_capacity(opts.iterations as usize);
    for _ in 0..opts.iterations {
        let episode = sample_episode(dataset, fold, Split::Train, 1, &mut rng)?;
        state.params.zero_grad();
        let loss = loss_and_grads(&episode, &mut state.params, cfg)?;
        state.apply_adam(&opts.adam)?;
        losses.push((state.step, loss));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(dir, &state.params, cfg)?;
    }
    Ok(TrainOutcome { state, losses })
}

fn episode_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Majority vote over binary maps; ties go to foreground.
pub fn vote<T: Scalar>(maps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::data("voting needs at least one map"))?;
    let mut counts = vec![0usize; first.len()];
    for m in maps {
        m.expect_dims("vote map", first.dims())?;
        for (c, &v) in counts.iter_mut().zip(m.values()) {
            *c += usize::from(v == T::one());
        }
    }
    let k = maps.len();
    let values = counts
        .iter()
        .map(|&c| if 2 * c >= k { T::one() } else { T::zero() })
        .collect();
    Tensor::new(first.dims().to_vec(), values)
}

/// Logits for every support, each from an independent 1-shot pass at the
/// query mask's native resolution.
pub fn per_support_logits<T: Scalar>(
    query: &QuerySample<T>,
    supports: &[SupportSample<T>],
    text: Option<&TextEmbedding<T>>,
    params: &DecoderParams<T>,
    cfg: &DecoderConfig,
) -> Result<Vec<Tensor<T>>> {
    let out = (query.gt_mask.dims()[0], query.gt_mask.dims()[1]);
    supports
        .iter()
        .map(|s| {
            let inputs = prepare_inputs(query, s, text, cfg)?;
            forward(&inputs, params, cfg, out)
        })
        .collect()
}

/// K-shot prediction by K one-shot passes and a pixelwise majority vote.
pub fn predict_kshot(
    episode: &Episode,
    params: &DecoderParams<f32>,
    cfg: &DecoderConfig,
) -> Result<Tensor> {
    if episode.supports.is_empty() {
        return Err(Error::data("K-shot prediction needs K ≥ 1 supports"));
    }
    let logits = per_support_logits(
        &episode.query,
        &episode.supports,
        episode.text.as_ref(),
        params,
        cfg,
    )?;
    let maps = logits.iter().map(argmax_mask).collect::<Result<Vec<_>>>()?;
    vote(&maps)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub episodes: usize,
    pub k: usize,
    pub seed: u64,
    pub workers: usize,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub accumulator: ConfusionAccumulator,
    pub report: MiouReport,
    pub episodes: usize,
}

/// The deterministic episode list an evaluation run will use.
pub fn eval_episode_refs(
    dataset: &Dataset,
    fold: &FoldSpec,
    opts: &EvalOptions,
) -> Result<Vec<EpisodeRef>> {
    let mut rng = episode_rng(opts.seed, EVAL_STREAM);
    (0..opts.episodes)
        .map(|_| sample_episode_ref(dataset, fold, opts.split, opts.k, &mut rng))
        .collect()
}

fn eval_chunk(
    dataset: &Dataset,
    refs: &[EpisodeRef],
    params: &DecoderParams<f32>,
    cfg: &DecoderConfig,
) -> Result<ConfusionAccumulator> {
    let mut acc = ConfusionAccumulator::new();
    for r in refs {
        let ep = load_episode(dataset, r)?;
        let pred = predict_kshot(&ep, params, cfg)?;
        acc.accumulate(ep.class_id, &pred, &ep.query.gt_mask)?;
    }
    Ok(acc)
}

/// Runs `opts.episodes` K-shot episodes and reports fold mIoU. Results do
/// not depend on the worker count.
pub fn evaluate(
    dataset: &Dataset,
    fold: &FoldSpec,
    params: &DecoderParams<f32>,
    cfg: &DecoderConfig,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    cfg.validate()?;
    let refs = eval_episode_refs(dataset, fold, opts)?;
    let workers = opts.workers.max(1).min(refs.len().max(1));
    let chunk = refs.len().div_ceil(workers).max(1);
    let partials: Vec<Result<ConfusionAccumulator>> = std::thread::scope(|scope| {
        let handles: Vec<_> = refs
            .chunks(chunk)
            .map(|part| scope.spawn(move || eval_chunk(dataset, part, params, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::State("evaluation worker panicked".into())))
            })
            .collect()
    });
    let mut accumulator = ConfusionAccumulator::new();
    for p in partials {
        accumulator.merge(&p?);
    }
    let report = accumulator.miou(fold.classes(opts.split))?;
    Ok(EvalResult {
        accumulator,
        report,
        episodes: refs.len(),
    })
}
