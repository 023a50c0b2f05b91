//! Command-line interface: `synth`, `train`, `eval` and `ablate`.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on usage or
//! configuration errors. `MANI_OUT` sets the default output root.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::load_checkpoint;
use crate::config::{resolve, KeyValues};
use crate::data::{
    generate_synthetic, load_dataset, read_mask, save_dataset, split_dataset, Domain, DomainDataset, Role, ShiftParams,
    Split, SynthConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, evaluate_mask_map, MetricsReport};
use crate::plot::write_loss_curve;
use crate::trainer::{
    render_ablation_table, run_ablation, train, write_ablation_csv, AblationData, Grid, TrainConfig, TrainOutcome,
    TrainSummary,
    ValSets,
};

pub const OUT_ENV: &str = "MANI_OUT";
pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "mani", version, about = "Mutual-information domain adaptation for nuclei segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic source/target dataset pair.
    Synth(SynthArgs),
    /// Train a model on a labeled source and an unlabeled target domain.
    Train(TrainArgs),
    /// Score a checkpoint or a directory of predicted masks.
    Eval(EvalArgs),
    /// Train a grid of configurations and tabulate target dice.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 20)]
    pub n_val: usize,
    #[arg(long, default_value_t = 20)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 4)]
    pub min_nuclei: usize,
    #[arg(long, default_value_t = 10)]
    pub max_nuclei: usize,
    #[arg(long, default_value_t = 3.0)]
    pub min_radius: f64,
    #[arg(long, default_value_t = 7.0)]
    pub max_radius: f64,
    /// Target hue rotation in degrees.
    #[arg(long)]
    pub hue_shift: Option<f64>,
    /// Target gamma.
    #[arg(long)]
    pub contrast_gamma: Option<f64>,
    /// Target noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Target background brightness.
    #[arg(long)]
    pub background: Option<f64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

/// Training options shared by `train` and `ablate`.
#[derive(Args, Debug)]
pub struct TrainOpts {
    /// Labeled source domain directory.
    #[arg(long)]
    pub source: PathBuf,
    /// Target domain directory; masks in its val/test splits are used for evaluation only.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, value_parser = ["paper-semantic", "desk"])]
    pub preset: Option<String>,
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mi_weight: Option<f64>,
    #[arg(long, value_parser = ["mean", "max", "random_pixels"])]
    pub pooling: Option<String>,
    #[arg(long)]
    pub pooling_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub warmup_iters: Option<usize>,
    #[arg(long)]
    pub joint_iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub deterministic: bool,
    /// Output directory (default: $MANI_OUT/<command> or runs/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of predicted masks, either `<dir>/masks/<id>.png` or `<dir>/<id>.png`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Labeled dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Configuration the checkpoint is expected to match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Path of the JSON report (default: $MANI_OUT/eval/metrics.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long, default_value = "weights", value_parser = ["weights", "pooling", "both"])]
    pub grid: String,
    /// Number of seeds per cell, starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// Written into each output directory before any other file.
#[derive(Serialize, Debug)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub code_version: String,
    pub started_at: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, outputs: &[&Path]) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().collect(),
            config,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: chrono::Utc::now().to_rfc3339(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::write(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::write(&path, e))
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} '{}' is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} '{}' does not exist", path.display())))
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses arguments and runs a command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let base = SynthConfig {
        image_size: a.image_size,
        nuclei_count_range: (a.min_nuclei, a.max_nuclei),
        radius_range: (a.min_radius, a.max_radius),
        shift: ShiftParams::identity(),
        seed: a.seed,
    };
    let d = ShiftParams::desk_target();
    let target_cfg = SynthConfig {
        shift: ShiftParams {
            hue_delta: a.hue_shift.unwrap_or(d.hue_delta),
            contrast_gamma: a.contrast_gamma.unwrap_or(d.contrast_gamma),
            noise_sigma: a.noise.unwrap_or(d.noise_sigma),
            background_level: a.background.unwrap_or(d.background_level),
        },
        ..base.clone()
    };
    base.validate()?;
    target_cfg.validate()?;
    let occupied = a.out.is_dir()
        && fs::read_dir(&a.out)
            .map_err(|e| Error::read(&a.out, e))?
            .next()
            .is_some();
    if occupied && !a.force {
        return Err(Error::Config(format!(
            "output directory '{}' is not empty (pass --force to overwrite)",
            a.out.display()
        )));
    }
    if a.out.exists() && !a.out.is_dir() {
        return Err(Error::Config(format!("'{}' is not a directory", a.out.display())));
    }
    let src_dir = a.out.join("source");
    let tgt_dir = a.out.join("target");
    let config = serde_json::json!({
        "source": to_json(&base),
        "target": to_json(&target_cfg),
        "n_train": a.n_train,
        "n_val": a.n_val,
        "n_test": a.n_test,
    });
    RunManifest::new("synth", config, &[&src_dir, &tgt_dir]).write(&a.out)?;
    for dir in [&src_dir, &tgt_dir] {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::write(dir, e))?;
        }
    }
    let n = a.n_train + a.n_val + a.n_test;
    for (cfg, domain, dir) in [(&base, Domain::Source, &src_dir), (&target_cfg, Domain::Target, &tgt_dir)] {
        let all = generate_synthetic(cfg, n, domain)?;
        let [tr, va, te] = split_dataset(&all, a.n_train, a.n_val, a.n_test)?;
        save_dataset(dir, &[&tr, &va, &te])?;
    }
    println!(
        "wrote {n} source and {n} target samples ({} train / {} val / {} test) to {}",
        a.n_train,
        a.n_val,
        a.n_test,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn flag_overrides(o: &TrainOpts) -> KeyValues {
    let mut kv = KeyValues::default();
    if let Some(v) = &o.preset {
        kv.set("preset", v);
    }
    if let Some(v) = o.mi_weight {
        kv.set("mi_weight", v);
    }
    if let Some(v) = &o.pooling {
        kv.set("pooling", v);
    }
    if let Some(v) = o.pooling_n {
        kv.set("pooling_n", v);
    }
    if let Some(v) = o.seed {
        kv.set("seed", v);
    }
    if let Some(v) = o.warmup_iters {
        kv.set("warmup_iters", v);
    }
    if let Some(v) = o.joint_iters {
        kv.set("joint_iters", v);
    }
    if let Some(v) = o.batch_size {
        kv.set("batch_size", v);
    }
    if let Some(v) = o.lr {
        kv.set("learning_rate", v);
    }
    if let Some(v) = o.eval_every {
        kv.set("eval_every", v);
    }
    if o.deterministic {
        kv.set("deterministic", true);
    }
    kv
}

fn resolve_opts(o: &TrainOpts) -> Result<TrainConfig> {
    let file = match &o.config {
        Some(p) => {
            require_file(p, "config file")?;
            Some(KeyValues::read(p)?)
        }
        None => None,
    };
    resolve(file.as_ref(), &flag_overrides(o))
}

/// Loads a split whose masks are only used for scoring. Returns `None` when
/// the split is empty or unlabeled.
fn load_labeled(root: &Path, split: Split) -> Result<Option<DomainDataset>> {
    let ds = load_dataset(root, Role::TargetUnlabeled, split)?;
    let labeled = !ds.is_empty() && ds.samples.iter().all(|s| s.mask.is_some());
    Ok(labeled.then_some(ds))
}

struct TrainData {
    source: DomainDataset,
    target: DomainDataset,
    val: ValSets,
    target_test: Option<DomainDataset>,
}

fn load_train_data(source_dir: &Path, target_dir: &Path) -> Result<TrainData> {
    let source = load_dataset(source_dir, Role::SourceLabeled, Split::Train)?;
    source.require_non_empty(&format!("source training split in {}", source_dir.display()))?;
    let source_val = load_dataset(source_dir, Role::SourceLabeled, Split::Val)?;
    let target = load_dataset(target_dir, Role::TargetUnlabeled, Split::Train)?.without_labels();
    Ok(TrainData {
        source,
        target,
        val: ValSets {
            source: (!source_val.is_empty()).then_some(source_val),
            target: load_labeled(target_dir, Split::Val)?,
        },
        target_test: load_labeled(target_dir, Split::Test)?,
    })
}

/// Loads a source and a target directory, trains, and scores the final model
/// on the target test split when it is labeled. Checkpoints go to
/// `out/checkpoints` when `out` is given.
pub fn train_from_dirs(
    config: &TrainConfig,
    source: &Path,
    target: &Path,
    out: Option<&Path>,
) -> Result<(TrainOutcome<f32>, TrainSummary)> {
    require_dir(source, "source directory")?;
    require_dir(target, "target directory")?;
    let data = load_train_data(source, target)?;
    eprintln!(
        "training on {} source / {} target images for {} + {} iterations (mi_weight {}, {} pooling)",
        data.source.len(),
        data.target.len(),
        config.warmup_iters,
        config.joint_iters,
        config.mi_weight,
        config.pooling.kind
    );
    let mut outcome = train::<f32>(config, &data.source, &data.target, &data.val, out)?;
    let test_report = match &data.target_test {
        Some(ds) => Some(evaluate(&mut outcome.last, ds)?),
        None => None,
    };
    let summary = TrainSummary::new(config, &outcome, test_report);
    Ok((outcome, summary))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let o = &a.opts;
    let config = resolve_opts(o)?;
    require_dir(&o.source, "source directory")?;
    require_dir(&o.target, "target directory")?;
    let out = o.out.clone().unwrap_or_else(|| out_root().join("train"));
    let paths = TrainPaths::new(&out);
    RunManifest::new(
        "train",
        to_json(&config),
        &[&paths.best, &paths.last, &paths.history, &paths.summary, &paths.plot],
    )
    .write(&out)?;

    let (outcome, summary) = train_from_dirs(&config, &o.source, &o.target, Some(&out))?;
    outcome.history.write_csv(&paths.history)?;
    summary.write_json(&paths.summary)?;
    write_loss_curve(&outcome.history, &paths.plot)?;
    if let Some(r) = &summary.target_test {
        println!("target test split, final model:\n{}", r.render_table());
    }
    println!("outputs written to {}", out.display());
    Ok(())
}

struct TrainPaths {
    best: PathBuf,
    last: PathBuf,
    history: PathBuf,
    summary: PathBuf,
    plot: PathBuf,
}

impl TrainPaths {
    fn new(out: &Path) -> Self {
        TrainPaths {
            best: out.join("checkpoints").join("best.safetensors"),
            last: out.join("checkpoints").join("last.safetensors"),
            history: out.join("history.csv"),
            summary: out.join("summary.json"),
            plot: out.join("loss_curve.png"),
        }
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Serialize, Debug)]
pub struct EvalReport {
    #[serde(flatten)]
    pub report: MetricsReport,
    /// SHA-256 of the checkpoint's training configuration; absent when
    /// scoring prediction files.
    pub config_hash: Option<String>,
}

pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_string(config).unwrap_or_default();
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_prediction_dir(dir: &Path, ds: &DomainDataset) -> Result<HashMap<String, crate::data::Mask>> {
    let base = if dir.join("masks").is_dir() { dir.join("masks") } else { dir.to_path_buf() };
    ds.samples
        .iter()
        .map(|s| {
            let path = base.join(format!("{}.png", s.id));
            if !path.is_file() {
                return Err(Error::Data(format!("no prediction for '{}' at {}", s.id, path.display())));
            }
            Ok((s.id.clone(), read_mask(&path)?))
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    require_dir(&a.data, "dataset directory")?;
    if let Some(p) = &a.checkpoint {
        require_file(p, "checkpoint")?;
    }
    if let Some(p) = &a.predictions {
        require_dir(p, "predictions directory")?;
    }
    let expected = match &a.config {
        Some(p) => {
            require_file(p, "config file")?;
            Some(resolve(Some(&KeyValues::read(p)?), &KeyValues::default())?)
        }
        None => None,
    };
    let out = a.out.clone().unwrap_or_else(|| out_root().join("eval").join("metrics.json"));
    let out_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let manifest_config = serde_json::json!({
        "checkpoint": a.checkpoint,
        "predictions": a.predictions,
        "data": a.data,
        "split": split.to_string(),
        "expected_config": expected.as_ref().map(to_json),
    });
    RunManifest::new("eval", manifest_config, &[&out]).write(out_dir)?;

    let ds = load_dataset(&a.data, Role::TargetUnlabeled, split)?;
    ds.require_non_empty(&format!("{split} split of {}", a.data.display()))?;
    ds.require_masks("evaluation dataset")?;
    let (report, hash) = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            let (mut bundle, stored) = load_checkpoint::<f32>(ckpt)?;
            if let Some(exp) = &expected {
                if exp.model.feature_dim() != bundle.feature_dim() {
                    return Err(Error::FeatureDim {
                        checkpoint: bundle.feature_dim(),
                        config: exp.model.feature_dim(),
                    });
                }
            }
            (evaluate(&mut bundle, &ds)?, Some(config_hash(&stored)))
        }
        (None, Some(dir)) => (evaluate_mask_map(&ds, &read_prediction_dir(dir, &ds)?)?, None),
        (None, None) => return Err(Error::Config("pass --checkpoint or --predictions".into())),
    };
    let doc = EvalReport {
        report,
        config_hash: hash,
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::write(&out, e))?;
    fs::write(&out, text).map_err(|e| Error::write(&out, e))?;
    print!("{}", doc.report.render_table());
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let o = &a.opts;
    let base = resolve_opts(o)?;
    let grid: Grid = a.grid.parse()?;
    if a.seeds == 0 || a.jobs == 0 {
        return Err(Error::Config("--seeds and --jobs must be at least 1".into()));
    }
    require_dir(&o.source, "source directory")?;
    require_dir(&o.target, "target directory")?;
    let out = o.out.clone().unwrap_or_else(|| out_root().join("ablate"));
    let csv_path = out.join("ablation.csv");
    let txt_path = out.join("ablation.txt");
    let cells = grid.cells(base.pooling.n_pixels);
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| base.seed + k).collect();
    let manifest_config = serde_json::json!({
        "base": to_json(&base),
        "grid": a.grid,
        "cells": to_json(&cells),
        "seeds": seeds,
        "jobs": a.jobs,
    });
    RunManifest::new("ablate", manifest_config, &[&csv_path, &txt_path]).write(&out)?;

    let data = load_train_data(&o.source, &o.target)?;
    let target_eval = data.target_test.or(data.val.target.clone()).ok_or_else(|| {
        Error::Data(format!(
            "target directory {} has no labeled test or val split to score against",
            o.target.display()
        ))
    })?;
    let rows = run_ablation(
        &cells,
        &base,
        &AblationData {
            source: data.source,
            target: data.target,
            val: data.val,
            target_eval,
        },
        &seeds,
        a.jobs,
    )?;
    write_ablation_csv(&rows, &csv_path)?;
    let table = render_ablation_table(&rows);
    fs::write(&txt_path, &table).map_err(|e| Error::write(&txt_path, e))?;
    print!("{table}");
    for r in rows.iter().filter(|r| r.failed()) {
        eprintln!("cell {} FAILED: {}", r.delta.label, r.error.as_deref().unwrap_or(""));
    }
    if rows.iter().all(|r| r.failed()) {
        return Err(Error::Data("every ablation cell failed".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["mani", "synth"]), 2);
        assert_eq!(run(["mani", "frobnicate"]), 2);
        assert_eq!(run(["mani", "eval", "--data", "x"]), 2);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::FeatureDim { checkpoint: 16, config: 32 }), 1);
        assert_eq!(exit_code(&Error::Data("x".into())), 1);
    }

    #[test]
    fn flags_become_overrides() {
        let cli = Cli::try_parse_from([
            "mani", "train", "--source", "s", "--target", "t", "--preset", "desk", "--mi-weight", "0", "--seed", "4",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let c = resolve_opts(&a.opts).unwrap();
        assert_eq!((c.mi_weight, c.seed, c.warmup_iters), (0.0, 4, 300));
    }
}
