//! Acceptance report: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.
//!
//! Training runs use a desk-scale setting (15×15 feature grid, 60×60 masks,
//! d = 16) so the whole report finishes in minutes on one CPU core; the
//! default architecture is still what `params` reports.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::suites::{
    correlation_oracle_error, cp4d_oracle_error, dw4d_block_diagonal_error,
    end_to_end_gradient_error, op_gradient_errors, residual_identity_holds,
};
use common::{random_mask, random_stack, rng};
use fskd_core::decoder::{DecoderConfig, DecoderParams, Fusion};
use fskd_core::episodic::{
    evaluate, fold_for, train, DatasetStyle, EvalOptions, Split, TrainOptions,
};
use fskd_core::extraction::{build_vision_correlations, mask_support_features, resize_mask};
use fskd_core::optim::AdamConfig;
use fskd_core::store::{generate_synthetic, Dataset, SyntheticConfig};

const GRID: usize = 15;
const D: usize = 16;
const OVERFIT_ITERATIONS: u64 = 300;
const EVAL_EPISODES: usize = 100;

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures += 1;
        }
    }
}

fn desk_config(use_text: bool) -> DecoderConfig {
    DecoderConfig {
        d: D,
        fusion: Fusion::Early,
        use_text,
        ..DecoderConfig::default()
    }
}

fn store(dir: &Path, images_per_class: usize, seed: u64) -> Dataset {
    let cfg = SyntheticConfig {
        grid: GRID,
        images_per_class,
        seed,
        ..SyntheticConfig::default()
    };
    generate_synthetic(dir.join("manifest.json"), &cfg)
        .unwrap()
        .dataset
}

fn train_on(ds: &Dataset, cfg: &DecoderConfig, seed: u64) -> fskd_core::episodic::TrainOutcome {
    let fold = fold_for(ds, DatasetStyle::Synthetic, 0).unwrap();
    let opts = TrainOptions {
        iterations: OVERFIT_ITERATIONS,
        seed,
        adam: AdamConfig::default(),
        checkpoint_dir: None,
    };
    train(ds, &fold, cfg, &opts).unwrap()
}

fn miou(ds: &Dataset, params: &DecoderParams, cfg: &DecoderConfig, split: Split, k: usize) -> f64 {
    let fold = fold_for(ds, DatasetStyle::Synthetic, 0).unwrap();
    let opts = EvalOptions {
        episodes: EVAL_EPISODES,
        k,
        seed: 1,
        workers: 1,
        split,
    };
    evaluate(ds, &fold, params, cfg, &opts)
        .unwrap()
        .report
        .miou
        .unwrap_or(0.0)
}

fn gradient_suite(r: &mut Report) {
    let start = Instant::now();
    let ops = op_gradient_errors();
    let worst_op = ops
        .iter()
        .fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    let early = end_to_end_gradient_error(Fusion::Early, (8, 8));
    let late = end_to_end_gradient_error(Fusion::Late, (10, 10));
    let elapsed = start.elapsed();
    let pass =
        worst_op.1 <= 1e-3 && early <= 1e-3 && late <= 1e-3 && elapsed < Duration::from_secs(60);
    r.check(
        "gradient suite",
        pass,
        format!(
            "{} ops, worst {:.2e} ({}); end-to-end early {early:.2e}, late {late:.2e}; {:.1}s",
            ops.len(),
            worst_op.1,
            worst_op.0,
            elapsed.as_secs_f64()
        ),
    );
}

fn kernel_oracle(r: &mut Report) {
    let cp = cp4d_oracle_error(60, 31);
    let dw = dw4d_block_diagonal_error(30, 32);
    r.check(
        "kernel oracle",
        cp <= 1e-5 && dw <= 1e-6,
        format!("cp4d vs dense 4D kernel over 60 instances: {cp:.2e}; dw4d vs block-diagonal cp4d: {dw:.2e}"),
    );
}

fn correlation_oracle(r: &mut Report) {
    let err = correlation_oracle_error(50, 33);
    let mut g = rng(34);
    let mut invariants = true;
    for _ in 0..200 {
        let (q, s, mask) = (
            random_stack(&mut g, 3, 3, 4),
            random_stack(&mut g, 3, 3, 4),
            random_mask(&mut g, 12, 12),
        );
        let soft = resize_mask(&mask, 3, 3).unwrap();
        let maps =
            build_vision_correlations(&q, &mask_support_features(&s, &mask).unwrap(), 1).unwrap();
        for map in &maps {
            invariants &= map.values().iter().all(|v| (0.0..=1.0).contains(v));
            for col in (0..9).filter(|&c| soft.values()[c] == 0.0) {
                invariants &= (0..9).all(|row| map.values()[row * 9 + col] == 0.0);
            }
        }
    }
    r.check(
        "correlation oracle",
        err <= 1e-10 && invariants,
        format!("max abs err vs scalar loops on 2x2 grids {err:.2e}; range and zero-mask-column invariants over 200 draws: {invariants}"),
    );
}

fn residual_identity(r: &mut Report) {
    let ok = (0..5).all(residual_identity_holds);
    r.check(
        "residual identity",
        ok,
        format!("zeroed DSCM blocks bit-identical to input over 5 seeds: {ok}"),
    );
}

fn overfit(r: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let ds = store(dir.path(), 5, 7);
    let cfg = desk_config(true);
    let start = Instant::now();
    let out = train_on(&ds, &cfg, 0);
    let score = miou(&ds, &out.state.params, &cfg, Split::Train, 1);
    let elapsed = start.elapsed();
    let mean = |s: &[(u64, f64)]| s.iter().map(|x| x.1).sum::<f64>() / s.len() as f64;
    let (first, last) = (
        mean(&out.losses[..20]),
        mean(&out.losses[out.losses.len() - 20..]),
    );
    r.check(
        "synthetic overfit",
        score >= 0.90 && last < 0.1 * first && elapsed <= Duration::from_secs(15 * 60),
        format!(
            "8x5 store, fold 0, early fusion + text, {OVERFIT_ITERATIONS} iterations: train-split 1-shot mIoU {score:.4} (>= 0.90); \
             last-20/first-20 mean loss {first:.3} -> {last:.3} (ratio {:.3} < 0.1); {:.0}s (<= 900s)",
            last / first,
            elapsed.as_secs_f64()
        ),
    );
}

fn generalization(r: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    // Twelve images per class so 5-shot episodes (6 distinct images) exist.
    let ds = store(dir.path(), 12, 7);
    let with_text = desk_config(true);
    let without_text = desk_config(false);
    let text_params = train_on(&ds, &with_text, 0).state.params;
    let plain_params = train_on(&ds, &without_text, 0).state.params;
    let one = miou(&ds, &text_params, &with_text, Split::Test, 1);
    let five = miou(&ds, &text_params, &with_text, Split::Test, 5);
    let plain = miou(&ds, &plain_params, &without_text, Split::Test, 1);
    r.check(
        "synthetic generalization",
        one >= 0.75 && five >= one && one >= plain,
        format!(
            "held-out fold-0 classes, {EVAL_EPISODES} episodes: 1-shot {one:.4} (>= 0.75), 5-shot {five:.4} (>= 1-shot), \
             mask-only 1-shot {plain:.4} (<= class-aware)"
        ),
    );
}

fn fskd(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_fskd"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "fskd {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn parameter_budget(r: &mut Report) {
    let printed = fskd(&["params"]);
    let count: usize = printed.trim().parse().unwrap();
    r.check(
        "parameter budget",
        (300_000..=900_000).contains(&count),
        format!("`fskd params` with the default config prints {count} (band [3e5, 9e5])"),
    );
}

fn determinism(r: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    fskd(&[
        "synth",
        "--out",
        &p("data"),
        "--grid",
        "6",
        "--feat-channels",
        "16",
        "--vl-channels",
        "8",
        "--images-per-class",
        "6",
        "--seed",
        "3",
    ]);
    let manifest = p("data/manifest.json");
    let run = [
        "--manifest",
        &manifest,
        "--d",
        "8",
        "--use-text",
        "--seed",
        "5",
    ];
    for name in ["a", "b"] {
        fskd(
            &[
                &["train", "--iterations", "25", "--out", &p(name)][..],
                &run[..],
            ]
            .concat(),
        );
    }
    let files = |name: &str| {
        let root = dir.path().join(name).join("checkpoint");
        let mut v: Vec<_> = walk(&root)
            .into_iter()
            .map(|f| {
                (
                    f.strip_prefix(&root).unwrap().to_path_buf(),
                    fs::read(&f).unwrap(),
                )
            })
            .collect();
        v.sort();
        v
    };
    let (a, b) = (files("a"), files("b"));
    let same_checkpoints = !a.is_empty() && a == b;
    let mut csvs = Vec::new();
    for (out, workers) in [("e1", "1"), ("e2", "1"), ("e3", "3")] {
        let ck = p("a/checkpoint");
        fskd(
            &[
                &[
                    "eval",
                    "--checkpoint",
                    &ck,
                    "--k",
                    "3",
                    "--episodes",
                    "30",
                    "--workers",
                    workers,
                    "--out",
                    &p(out),
                ][..],
                &run[..],
            ]
            .concat(),
        );
        csvs.push(fs::read(dir.path().join(out).join("miou.csv")).unwrap());
    }
    let same_csvs = csvs.iter().all(|c| *c == csvs[0]);
    r.check(
        "determinism",
        same_checkpoints && same_csvs,
        format!("two training runs give identical checkpoint bytes: {same_checkpoints}; mIoU CSV identical across reruns and 1 vs 3 workers: {same_csvs}"),
    );
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

fn main() {
    let mut r = Report { failures: 0 };
    gradient_suite(&mut r);
    kernel_oracle(&mut r);
    correlation_oracle(&mut r);
    residual_identity(&mut r);
    overfit(&mut r);
    generalization(&mut r);
    parameter_budget(&mut r);
    determinism(&mut r);
    if r.failures > 0 {
        println!("{} acceptance criteria failed", r.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
