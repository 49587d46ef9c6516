//! `fskd`: generate synthetic stores, train, evaluate and inspect the
//! few-shot segmentation decoder.
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 data or format
//! error, 3 numeric failure.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fskd_core::decoder::{
    count_params, init_params, load_checkpoint, DecoderConfig, DecoderParams,
};
use fskd_core::episodic::{
    evaluate, fold_for, load_episode, predict_kshot, sample_episode_ref, train, EpisodeRef,
    EvalOptions, Split, TrainOptions,
};
use fskd_core::extraction::{
    averaged_activation_map, build_text_activation, build_vision_correlations,
    mask_support_features, LAYER_COUNT,
};
use fskd_core::optim::AdamConfig;
use fskd_core::store::{generate_synthetic, pgm, write_tensor, Dataset, Dtype, SyntheticConfig};
use fskd_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{RunConfig, RunFlags};

#[derive(Debug, Parser)]
#[command(
    name = "fskd",
    version,
    about = "Few-shot segmentation from frozen foundation-model features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic feature store.
    Synth(SynthArgs),
    /// Train the decoder; writes a checkpoint and a loss CSV.
    Train(RunFlags),
    /// Evaluate K-shot mIoU over test episodes; writes an mIoU CSV.
    Eval(RunFlags),
    /// Predict one K-shot mask; writes PGM and FMTC files.
    Predict(PredictArgs),
    /// Export averaged per-layer activation maps as PGM images.
    Viz(PredictArgs),
    /// Report the learnable parameter count.
    Params(RunFlags),
}

#[derive(Debug, clap::Args)]
struct SynthArgs {
    /// Output directory; the manifest is written to `<out>/manifest.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    images_per_class: usize,
    #[arg(long, default_value_t = 30)]
    grid: usize,
    #[arg(long, default_value_t = 64)]
    feat_channels: usize,
    #[arg(long, default_value_t = 32)]
    vl_channels: usize,
    #[arg(long, default_value_t = 0.1)]
    vision_noise: f64,
    #[arg(long, default_value_t = 0.05)]
    vl_noise: f64,
    #[arg(long, default_value_t = 0.3)]
    intra_class_spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Store features as f16.
    #[arg(long)]
    f16: bool,
}

#[derive(Debug, clap::Args)]
struct PredictArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Class to segment; sampled from the test split when omitted.
    #[arg(long)]
    class: Option<u32>,
    /// Query image id.
    #[arg(long)]
    query: Option<String>,
    /// Support image id (repeat for K > 1).
    #[arg(long)]
    support: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(&a),
        Command::Train(f) => train_cmd(&f.resolve()?),
        Command::Eval(f) => eval_cmd(&f.resolve()?),
        Command::Predict(a) => predict_cmd(&a),
        Command::Viz(a) => viz_cmd(&a),
        Command::Params(f) => params_cmd(&f.resolve()?),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes `<out>/metadata.json`: the resolved config, its hash, the seed and
/// the tool version.
fn write_metadata(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let meta = json!({
        "command": command,
        "config": cfg,
        "config_sha256": cfg.hash(),
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_text(
        &out.join("metadata.json"),
        &(serde_json::to_string_pretty(&meta).expect("json value") + "\n"),
    )
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.manifest()?;
    if !path.exists() {
        return Err(Error::Config(format!(
            "manifest {} does not exist",
            path.display()
        )));
    }
    Dataset::open(path)
}

/// Parameters and architecture to run: a checkpoint's own config when one is
/// given, else a fresh initialization from the run seed.
fn load_model(cfg: &RunConfig) -> Result<(DecoderConfig, DecoderParams<f32>)> {
    match &cfg.checkpoint {
        Some(dir) => {
            if !dir.exists() {
                return Err(Error::Config(format!(
                    "checkpoint {} does not exist",
                    dir.display()
                )));
            }
            load_checkpoint(dir)
        }
        None => Ok((cfg.decoder.clone(), init_params(&cfg.decoder, cfg.seed)?)),
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_classes: a.classes,
        images_per_class: a.images_per_class,
        seed: a.seed,
        grid: a.grid,
        feat_channels: a.feat_channels,
        vl_channels: a.vl_channels,
        vision_noise: a.vision_noise,
        vl_noise: a.vl_noise,
        intra_class_spread: a.intra_class_spread,
        dtype: if a.f16 { Dtype::F16 } else { Dtype::F32 },
        ..SyntheticConfig::default()
    };
    let set = generate_synthetic(a.out.join("manifest.json"), &cfg)?;
    println!(
        "wrote {} records for {} classes to {}",
        set.dataset.manifest.records.len(),
        set.dataset.manifest.classes.len(),
        set.manifest_path.display()
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out()?;
    let dataset = open_dataset(cfg)?;
    let fold = fold_for(&dataset, cfg.dataset_style, cfg.fold)?;
    let opts = TrainOptions {
        iterations: cfg.iterations,
        seed: cfg.seed,
        adam: AdamConfig::with_lr(cfg.lr)?,
        checkpoint_dir: Some(out.join("checkpoint")),
    };
    let outcome = train(&dataset, &fold, &cfg.decoder, &opts)?;
    let mut csv = String::from("step,loss\n");
    for (step, loss) in &outcome.losses {
        writeln!(csv, "{step},{loss:.8}").expect("string write");
    }
    write_text(&out.join("loss.csv"), &csv)?;
    write_metadata(out, "train", cfg)?;
    match outcome.losses.last() {
        Some((step, loss)) => println!("trained {step} steps, final loss {loss:.6}"),
        None => println!("trained 0 steps"),
    }
    println!("checkpoint written to {}", out.join("checkpoint").display());
    Ok(())
}

fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out()?;
    let dataset = open_dataset(cfg)?;
    let (decoder, params) = load_model(cfg)?;
    let fold = fold_for(&dataset, cfg.dataset_style, cfg.fold)?;
    let opts = EvalOptions {
        episodes: cfg.episodes,
        k: cfg.k,
        seed: cfg.seed,
        workers: cfg.workers,
        split: Split::Test,
    };
    let result = evaluate(&dataset, &fold, &params, &decoder, &opts)?;
    let mut csv = String::from("class_id,class_name,intersection,union,iou\n");
    for c in &result.report.per_class {
        let name = dataset
            .manifest
            .classes
            .get(&c.class_id)
            .map(String::as_str)
            .unwrap_or("");
        let iou = c.iou.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{},{}",
            c.class_id, name, c.counts.intersection, c.counts.union, iou
        )
        .expect("string write");
    }
    let miou = result
        .report
        .miou
        .map(|v| format!("{v:.6}"))
        .unwrap_or_default();
    writeln!(csv, "mean,,,,{miou}").expect("string write");
    write_text(&out.join("miou.csv"), &csv)?;
    write_metadata(out, "eval", cfg)?;
    let undefined = result.report.undefined_classes();
    if !undefined.is_empty() {
        eprintln!("warning: classes without any pixels: {undefined:?}");
    }
    println!(
        "fold {} {}-shot mIoU over {} episodes: {}",
        cfg.fold,
        cfg.k,
        result.episodes,
        if miou.is_empty() { "undefined" } else { &miou }
    );
    Ok(())
}

fn index_of(dataset: &Dataset, image_id: &str) -> Result<usize> {
    dataset
        .manifest
        .records
        .iter()
        .position(|r| r.image_id == image_id)
        .ok_or_else(|| Error::Data(format!("no record with image id {image_id:?}")))
}

/// The episode named on the command line, or one sampled from the test split.
fn chosen_episode(dataset: &Dataset, cfg: &RunConfig, a: &PredictArgs) -> Result<EpisodeRef> {
    match (a.class, &a.query) {
        (Some(class_id), Some(query)) => {
            if a.support.is_empty() {
                return Err(Error::Config("--support is required with --query".into()));
            }
            let supports = a
                .support
                .iter()
                .map(|s| index_of(dataset, s))
                .collect::<Result<Vec<_>>>()?;
            Ok(EpisodeRef {
                class_id,
                query: index_of(dataset, query)?,
                supports,
            })
        }
        (None, None) => {
            let fold = fold_for(dataset, cfg.dataset_style, cfg.fold)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            sample_episode_ref(dataset, &fold, Split::Test, cfg.k, &mut rng)
        }
        _ => Err(Error::Config(
            "--class and --query must be given together".into(),
        )),
    }
}

fn predict_cmd(a: &PredictArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let out = cfg.out()?;
    let dataset = open_dataset(&cfg)?;
    let (decoder, params) = load_model(&cfg)?;
    let r = chosen_episode(&dataset, &cfg, a)?;
    let episode = load_episode(&dataset, &r)?;
    let mask = predict_kshot(&episode, &params, &decoder)?;
    pgm::write_bytes(out.join("prediction.pgm"), &pgm::encode_mask(&mask)?)?;
    write_tensor(out.join("prediction.fmtc"), &mask, Dtype::F32)?;
    pgm::write_bytes(
        out.join("ground_truth.pgm"),
        &pgm::encode_mask(&episode.query.gt_mask)?,
    )?;
    write_metadata(out, "predict", &cfg)?;
    let supports: Vec<&str> = r
        .supports
        .iter()
        .map(|&s| dataset.record(s).image_id.as_str())
        .collect();
    println!(
        "class {} query {} supports {:?}: prediction written to {}",
        r.class_id,
        episode.query_image,
        supports,
        out.join("prediction.pgm").display()
    );
    Ok(())
}

fn viz_cmd(a: &PredictArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let out = cfg.out()?;
    let dataset = open_dataset(&cfg)?;
    let r = chosen_episode(&dataset, &cfg, a)?;
    let episode = load_episode(&dataset, &r)?;
    let support = &episode.supports[0];
    let masked = mask_support_features(&support.features, &support.mask)?;
    let maps = build_vision_correlations(&episode.query.features, &masked, 1)?;
    for (i, corr) in maps.iter().enumerate() {
        let map = averaged_activation_map(corr)?;
        pgm::write_bytes(
            out.join(format!("layer_{:02}.pgm", i + 1)),
            &pgm::encode_minmax(&map)?,
        )?;
    }
    if let (Some(text), Some(vl)) = (&episode.text, &episode.query.vl_features) {
        let map = build_text_activation(vl, text)?;
        pgm::write_bytes(out.join("text.pgm"), &pgm::encode_minmax(&map)?)?;
    }
    pgm::write_bytes(
        out.join("query_mask.pgm"),
        &pgm::encode_mask(&episode.query.gt_mask)?,
    )?;
    pgm::write_bytes(
        out.join("support_mask.pgm"),
        &pgm::encode_mask(&support.mask)?,
    )?;
    write_metadata(out, "viz", &cfg)?;
    println!(
        "wrote {LAYER_COUNT} layer maps for class {} to {}",
        r.class_id,
        out.display()
    );
    Ok(())
}

fn params_cmd(cfg: &RunConfig) -> Result<()> {
    let params = init_params::<f32>(&cfg.decoder, cfg.seed)?;
    println!("{}", count_params(&params));
    Ok(())
}
