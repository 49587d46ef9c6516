//! Run configuration: a flat JSON file overlaid by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use fskd_core::decoder::{DecoderConfig, Fusion};
use fskd_core::episodic::DatasetStyle;
use fskd_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub fold: usize,
    pub dataset_style: DatasetStyle,
    pub k: usize,
    pub iterations: u64,
    pub lr: f64,
    pub seed: u64,
    pub episodes: usize,
    pub workers: usize,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    #[serde(flatten)]
    pub decoder: DecoderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            fold: 0,
            dataset_style: DatasetStyle::Synthetic,
            k: 1,
            iterations: 1000,
            lr: 1e-3,
            seed: 0,
            episodes: 1000,
            workers: 1,
            out: None,
            checkpoint: None,
            decoder: DecoderConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.fold > 3 {
            return Err(Error::Config(format!(
                "fold must be 0..=3, got {}",
                self.fold
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.decoder.validate()
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Config("--manifest is required".into()))
    }

    pub fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required".into()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("RunConfig always serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Flags shared by the run subcommands. Every flag is optional so that a
/// config file can supply it; a flag that is given always wins.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// JSON config file with RunConfig field names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, value_parser = parse_style)]
    pub dataset_style: Option<DatasetStyle>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of evaluation episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint directory to load.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Hidden channels of the decoder.
    #[arg(long)]
    pub d: Option<usize>,
    /// First backbone block used (1-based).
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_parser = parse_fusion)]
    pub fusion: Option<Fusion>,
    /// Add the vision-language text channel.
    #[arg(long)]
    pub use_text: bool,
    #[arg(long)]
    pub gn_groups: Option<usize>,
    #[arg(long)]
    pub num_dscm: Option<usize>,
    #[arg(long)]
    pub dscm_repeats: Option<usize>,
    #[arg(long)]
    pub support_stride: Option<usize>,
}

fn parse_style(s: &str) -> std::result::Result<DatasetStyle, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_fusion(s: &str) -> std::result::Result<Fusion, String> {
    match s {
        "early" => Ok(Fusion::Early),
        "late" => Ok(Fusion::Late),
        other => Err(format!("unknown fusion {other:?} (expected early or late)")),
    }
}

impl RunFlags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        macro_rules! overlay {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone().into(); })*
            };
        }
        overlay!(
            manifest => manifest,
            fold => fold,
            dataset_style => dataset_style,
            k => k,
            iterations => iterations,
            lr => lr,
            seed => seed,
            episodes => episodes,
            workers => workers,
            out => out,
            checkpoint => checkpoint,
            d => decoder.d,
            m => decoder.m,
            fusion => decoder.fusion,
            gn_groups => decoder.gn_groups,
            num_dscm => decoder.num_dscm,
            dscm_repeats => decoder.dscm_repeats,
            support_stride => decoder.support_stride,
        );
        if self.use_text {
            cfg.decoder.use_text = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
