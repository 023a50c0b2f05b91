//! Two-phase training: a source-only warm-up followed by joint segmentation
//! and mutual-information maximization, minimizing `L_seg - λ·Î` with one
//! Adam optimizer.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{augment_rotation, draw_indices, images_to_tensor, DomainDataset, Mask, PairBatch, Sample};
use crate::error::{Error, Result};
use crate::losses::{jsd_mi_backward, seg_loss_batch};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{ModelBundle, ModelConfig, Part};
use crate::nn::Mode;
use crate::optim::Adam;
use crate::pooling::{build_triples_traced, pseudo_label, scatter_triple_grad, PoolingStrategy, TracedTriple};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub warmup_iters: usize,
    pub joint_iters: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// λ, the weight of the MI term.
    pub mi_weight: f64,
    pub pooling: PoolingStrategy,
    pub seed: u64,
    pub eval_every: usize,
    pub deterministic: bool,
    /// Random right-angle rotations of training images.
    pub augment: bool,
    /// Number of initial iterations during which the encoder is frozen.
    pub freeze_backbone_iters: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_iters: 1000,
            joint_iters: 9000,
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            mi_weight: 1.0,
            pooling: PoolingStrategy::default(),
            seed: 0,
            eval_every: 500,
            deterministic: false,
            augment: true,
            freeze_backbone_iters: 0,
            model: ModelConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    PaperSemantic,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-semantic" => Ok(Preset::PaperSemantic),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected paper-semantic or desk)"
            ))),
        }
    }
}

impl Preset {
    pub fn config(self) -> TrainConfig {
        match self {
            Preset::PaperSemantic => TrainConfig {
                warmup_iters: 1000,
                joint_iters: 9000,
                batch_size: 4,
                learning_rate: 1e-3,
                eval_every: 500,
                model: ModelConfig {
                    depth: 5,
                    base_width: 64,
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            },
            // Batch 2 keeps three seeds of both arms within a single-core budget.
            Preset::Desk => TrainConfig {
                warmup_iters: 300,
                joint_iters: 1200,
                batch_size: 2,
                learning_rate: 1e-3,
                eval_every: 250,
                model: ModelConfig {
                    depth: 3,
                    base_width: 16,
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.mi_weight >= 0.0 && self.mi_weight.is_finite()) {
            return fail("mi_weight must be a non-negative finite number");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1");
        }
        self.pooling.validate()?;
        self.model.validate()
    }

    pub fn total_iters(&self) -> usize {
        self.warmup_iters + self.joint_iters
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub phase: Phase,
    pub seg_loss: f64,
    pub mi_estimate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub target_val_dice: Option<f64>,
    pub source_val_dice: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub iters: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.iters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iters.is_empty()
    }

    /// Writes one row per iteration; evaluation columns are filled on the
    /// iterations where an evaluation ran.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::write(path, e))?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        w.write_record(["iter", "phase", "seg_loss", "mi_estimate", "target_val_dice", "source_val_dice"])
            .map_err(|e| Error::write(path, e))?;
        for r in &self.iters {
            let eval = self.evals.iter().find(|e| e.iter == r.iter);
            w.write_record([
                r.iter.to_string(),
                r.phase.name().to_string(),
                r.seg_loss.to_string(),
                opt(r.mi_estimate),
                opt(eval.and_then(|e| e.target_val_dice)),
                opt(eval.and_then(|e| e.source_val_dice)),
            ])
            .map_err(|e| Error::write(path, e))?;
        }
        w.flush().map_err(|e| Error::write(path, e))
    }
}

/// Labeled validation splits used for periodic evaluation and model selection.
#[derive(Clone, Debug, Default)]
pub struct ValSets {
    pub source: Option<DomainDataset>,
    pub target: Option<DomainDataset>,
}

fn batch_ids(samples: &[&Sample]) -> String {
    samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(", ")
}

fn source_masks<'a>(samples: &[&'a Sample]) -> Result<Vec<&'a Mask>> {
    samples
        .iter()
        .map(|s| {
            s.mask
                .as_ref()
                .ok_or_else(|| Error::Data(format!("source sample '{}' has no mask", s.id)))
        })
        .collect()
}

fn warmup_active(name: &str) -> bool {
    matches!(Part::of(name), Some(Part::Backbone | Part::SegHead))
}

fn encoder_frozen(name: &str) -> bool {
    name.starts_with("backbone.enc")
}

/// Where a step sits in the run; used for diagnostics and for the encoder
/// freeze schedule.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub iter: usize,
    pub freeze_encoder: bool,
}

impl StepContext {
    pub fn at(iter: usize) -> Self {
        StepContext {
            iter,
            freeze_encoder: false,
        }
    }
}

fn non_finite(what: &'static str, ctx: StepContext, phase: Phase, samples: &[&Sample]) -> Error {
    Error::NonFinite {
        what,
        iter: ctx.iter,
        phase: phase.name(),
        batch: batch_ids(samples),
    }
}

/// One optimizer step on the segmentation loss of a labeled source batch,
/// updating the backbone and the segmentation head only. Returns the loss
/// evaluated before the update.
pub fn warmup_step<F: Real>(
    bundle: &mut ModelBundle<F>,
    source: &[&Sample],
    opt: &mut Adam<F>,
    ctx: StepContext,
) -> Result<f64> {
    let loss = seg_only_step(bundle, source, opt, ctx, Phase::Warmup)?;
    Ok(loss)
}

fn seg_only_step<F: Real>(
    bundle: &mut ModelBundle<F>,
    source: &[&Sample],
    opt: &mut Adam<F>,
    ctx: StepContext,
    phase: Phase,
) -> Result<f64> {
    let masks = source_masks(source)?;
    let x = images_to_tensor::<F>(source)?;
    let (out, cache) = bundle.forward_seg(&x, Mode::Train)?;
    let (loss, d_logits) = seg_loss_batch(&out.logits, &masks)?;
    if !loss.is_finite() {
        return Err(non_finite("segmentation loss", ctx, phase, source));
    }
    bundle.backward(&cache, Some(&d_logits), None);
    let freeze = ctx.freeze_encoder;
    opt.step(bundle, &|name| warmup_active(name) && !(freeze && encoder_frozen(name)));
    Ok(loss.as_f64())
}

/// Result of one joint step; `mi_estimate` is absent when no triple could be
/// formed (or when λ = 0 and the MI term is skipped).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointStepOutput {
    pub seg_loss: f64,
    pub mi_estimate: Option<f64>,
}

/// One optimizer step on `L_seg - λ·Î` over all four parts. Source and target
/// halves run through the model in separate forward passes. Pseudo-labels
/// carry no gradient. With λ = 0 the target pass is skipped and the step is
/// identical to a warm-up step.
pub fn joint_step<F: Real>(
    bundle: &mut ModelBundle<F>,
    batch: &PairBatch,
    mi_weight: f64,
    strategy: &PoolingStrategy,
    opt: &mut Adam<F>,
    rng: &mut ChaCha8Rng,
    ctx: StepContext,
) -> Result<JointStepOutput> {
    if mi_weight == 0.0 {
        let seg_loss = seg_only_step(bundle, &batch.sources(), opt, ctx, Phase::Joint)?;
        return Ok(JointStepOutput {
            seg_loss,
            mi_estimate: None,
        });
    }
    let out = joint_gradients(bundle, batch, mi_weight, strategy, rng, ctx)?;
    let freeze = ctx.freeze_encoder;
    opt.step(bundle, &|name| !(freeze && encoder_frozen(name)));
    Ok(out)
}

/// Accumulates the gradient of `L_seg - λ·Î` into every parameter without
/// stepping. Both halves run in train mode.
pub fn joint_gradients<F: Real>(
    bundle: &mut ModelBundle<F>,
    batch: &PairBatch,
    mi_weight: f64,
    strategy: &PoolingStrategy,
    rng: &mut ChaCha8Rng,
    ctx: StepContext,
) -> Result<JointStepOutput> {
    let sources = batch.sources();
    let targets = batch.targets();
    let masks = source_masks(&sources)?;
    let xs = images_to_tensor::<F>(&sources)?;
    let xt = images_to_tensor::<F>(&targets)?;
    let (src_out, src_cache) = bundle.forward_all(&xs, Mode::Train)?;
    let (tgt_out, tgt_cache) = bundle.forward_all(&xt, Mode::Train)?;
    let (seg, d_logits) = seg_loss_batch(&src_out.logits, &masks)?;
    if !seg.is_finite() {
        return Err(non_finite("segmentation loss", ctx, Phase::Joint, &sources));
    }

    let ps = src_out.projections.as_ref().expect("forward_all yields projections");
    let pt = tgt_out.projections.as_ref().expect("forward_all yields projections");
    let pseudo: Vec<Mask> = tgt_out
        .logits
        .axis_iter(Axis(0))
        .map(|l| pseudo_label(&l.index_axis(Axis(0), 0)))
        .collect();
    let mut traced: Vec<(usize, TracedTriple<F>)> = Vec::new();
    for i in 0..batch.size() {
        let triples = build_triples_traced(
            &ps.index_axis(Axis(0), i),
            masks[i],
            &pt.index_axis(Axis(0), i),
            &pseudo[i],
            strategy,
            rng,
        )?;
        traced.extend(triples.into_iter().map(|t| (i, t)));
    }

    let mut d_ps = Array4::<F>::zeros(ps.raw_dim());
    let mut d_pt = Array4::<F>::zeros(pt.raw_dim());
    let mi_estimate = if traced.is_empty() {
        None
    } else {
        let triples: Vec<_> = traced.iter().map(|(_, t)| t.triple.clone()).collect();
        let (mi, grads) = jsd_mi_backward(&triples, &mut bundle.discriminator, F::lit(-mi_weight))?;
        if !mi.is_finite() {
            let all: Vec<&Sample> = sources.iter().chain(targets.iter()).copied().collect();
            return Err(non_finite("MI estimate", ctx, Phase::Joint, &all));
        }
        for ((i, t), g) in traced.iter().zip(&grads) {
            let mut ds = d_ps.index_axis_mut(Axis(0), *i);
            let mut dt = d_pt.index_axis_mut(Axis(0), *i);
            scatter_triple_grad(t, g, masks[*i], &pseudo[*i], &mut ds, &mut dt);
        }
        Some(mi.as_f64())
    };

    bundle.backward(&src_cache, Some(&d_logits), Some(&d_ps));
    bundle.backward(&tgt_cache, None, Some(&d_pt));
    Ok(JointStepOutput {
        seg_loss: seg.as_f64(),
        mi_estimate,
    })
}

/// Independent random streams so that, for example, runs differing only in
/// λ draw identical source batches.
struct Streams {
    source: ChaCha8Rng,
    target: ChaCha8Rng,
    augment: ChaCha8Rng,
    pooling: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k + 1);
            r
        };
        Streams {
            source: stream(0),
            target: stream(1),
            augment: stream(2),
            pooling: stream(3),
        }
    }
}

/// Everything produced by a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    /// Model after the final iteration.
    pub last: ModelBundle<F>,
    /// Model with the best target-validation dice, if any evaluation ran on
    /// a target validation set.
    pub best: Option<(usize, f64, ModelBundle<F>)>,
    pub history: TrainHistory,
}

fn val_dice<F: Real>(bundle: &mut ModelBundle<F>, ds: &Option<DomainDataset>) -> Result<Option<f64>> {
    match ds {
        Some(d) if !d.is_empty() => Ok(Some(evaluate(bundle, d)?.aggregate.dice)),
        _ => Ok(None),
    }
}

/// Runs the warm-up then the joint phase. When `out_dir` is given, the best
/// and last models are written to `out_dir/checkpoints/{best,last}.safetensors`.
pub fn train<F: Real>(
    config: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    val: &ValSets,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    let mut bundle = ModelBundle::<F>::new(&config.model, config.seed)?;
    let mut history = TrainHistory::default();
    if config.total_iters() == 0 {
        return Ok(TrainOutcome {
            last: bundle,
            best: None,
            history,
        });
    }
    source.require_non_empty("source training set")?;
    source.require_masks("source training set")?;
    if config.joint_iters > 0 && config.mi_weight > 0.0 {
        target.require_non_empty("target training set")?;
    }
    let ckpt_dir: Option<PathBuf> = out_dir.map(|d| d.join("checkpoints"));
    let mut opt = Adam::<F>::new(config.learning_rate, config.beta1, config.beta2);
    let mut streams = Streams::new(config.seed);
    let mut best: Option<(usize, f64, ModelBundle<F>)> = None;

    for iter in 1..=config.total_iters() {
        let phase = if iter <= config.warmup_iters { Phase::Warmup } else { Phase::Joint };
        let ctx = StepContext {
            iter,
            freeze_encoder: iter <= config.freeze_backbone_iters,
        };
        let src_idx = draw_indices(source.len(), config.batch_size, &mut streams.source);
        let mut pick = |ds: &DomainDataset, i: usize| {
            let s = &ds.samples[i];
            if config.augment {
                augment_rotation(s, &mut streams.augment)
            } else {
                s.clone()
            }
        };
        let record = match phase {
            Phase::Warmup => {
                let batch: Vec<Sample> = src_idx.iter().map(|&i| pick(source, i)).collect();
                let refs: Vec<&Sample> = batch.iter().collect();
                let seg_loss = warmup_step(&mut bundle, &refs, &mut opt, ctx)?;
                IterRecord {
                    iter,
                    phase,
                    seg_loss,
                    mi_estimate: None,
                }
            }
            Phase::Joint => {
                let pairs = if config.mi_weight > 0.0 {
                    let tgt_idx = draw_indices(target.len(), config.batch_size, &mut streams.target);
                    let src: Vec<Sample> = src_idx.iter().map(|&i| pick(source, i)).collect();
                    let tgt: Vec<Sample> = tgt_idx.iter().map(|&j| pick(target, j)).collect();
                    src.into_iter().zip(tgt).collect()
                } else {
                    // The target half is never used when λ = 0.
                    src_idx.iter().map(|&i| {
                        let s = pick(source, i);
                        (s.clone(), s)
                    }).collect()
                };
                let batch = PairBatch { pairs };
                let out = joint_step(
                    &mut bundle,
                    &batch,
                    config.mi_weight,
                    &config.pooling,
                    &mut opt,
                    &mut streams.pooling,
                    ctx,
                )?;
                IterRecord {
                    iter,
                    phase,
                    seg_loss: out.seg_loss,
                    mi_estimate: out.mi_estimate,
                }
            }
        };
        history.iters.push(record);

        if iter % config.eval_every == 0 || iter == config.total_iters() {
            let target_val_dice = val_dice(&mut bundle, &val.target)?;
            let source_val_dice = val_dice(&mut bundle, &val.source)?;
            history.evals.push(EvalRecord {
                iter,
                target_val_dice,
                source_val_dice,
            });
            if let Some(d) = target_val_dice {
                if best.as_ref().map_or(true, |(_, b, _)| d > *b) {
                    best = Some((iter, d, bundle.clone()));
                    if let Some(dir) = &ckpt_dir {
                        save_checkpoint(&bundle, config, &dir.join("best.safetensors"))?;
                    }
                }
            }
        }
    }
    if let Some(dir) = &ckpt_dir {
        save_checkpoint(&bundle, config, &dir.join("last.safetensors"))?;
        if best.is_none() {
            save_checkpoint(&bundle, config, &dir.join("best.safetensors"))?;
        }
    }
    Ok(TrainOutcome {
        last: bundle,
        best,
        history,
    })
}

/// Run summary. Contains no timestamps so that identical runs produce
/// identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub iterations: usize,
    pub final_seg_loss: Option<f64>,
    pub final_mi_estimate: Option<f64>,
    pub final_target_val_dice: Option<f64>,
    pub final_source_val_dice: Option<f64>,
    pub best_iter: Option<usize>,
    pub best_target_val_dice: Option<f64>,
    /// Target test metrics of the final model.
    pub target_test: Option<MetricsReport>,
}

impl TrainSummary {
    pub fn new<F: Real>(config: &TrainConfig, outcome: &TrainOutcome<F>, target_test: Option<MetricsReport>) -> Self {
        let last_iter = outcome.history.iters.last();
        let last_eval = outcome.history.evals.last();
        TrainSummary {
            config: config.clone(),
            iterations: outcome.history.len(),
            final_seg_loss: last_iter.map(|r| r.seg_loss),
            final_mi_estimate: last_iter.and_then(|r| r.mi_estimate),
            final_target_val_dice: last_eval.and_then(|e| e.target_val_dice),
            final_source_val_dice: last_eval.and_then(|e| e.source_val_dice),
            best_iter: outcome.best.as_ref().map(|b| b.0),
            best_target_val_dice: outcome.best.as_ref().map(|b| b.1),
            target_test,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::write(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::write(path, e))
    }
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

/// Overrides applied to the base configuration for one ablation cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigDelta {
    pub label: String,
    pub mi_weight: Option<f64>,
    pub pooling: Option<PoolingStrategy>,
}

impl ConfigDelta {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if let Some(w) = self.mi_weight {
            c.mi_weight = w;
        }
        if let Some(p) = self.pooling {
            c.pooling = p;
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    Weights,
    Pooling,
    Both,
}

impl std::str::FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weights" => Ok(Grid::Weights),
            "pooling" => Ok(Grid::Pooling),
            "both" => Ok(Grid::Both),
            other => Err(Error::Config(format!("unknown grid '{other}' (expected weights, pooling or both)"))),
        }
    }
}

/// λ ∈ {1, 0.1, 0.01}.
pub fn weight_grid() -> Vec<ConfigDelta> {
    [1.0, 0.1, 0.01]
        .into_iter()
        .map(|w| ConfigDelta {
            label: format!("mi_weight={w}"),
            mi_weight: Some(w),
            pooling: None,
        })
        .collect()
}

/// Mean, max and random-pixel pooling.
pub fn pooling_grid(n_pixels: usize) -> Vec<ConfigDelta> {
    use crate::pooling::PoolingKind::*;
    [Mean, Max, RandomPixels]
        .into_iter()
        .map(|kind| ConfigDelta {
            label: format!("pooling={kind}"),
            mi_weight: None,
            pooling: Some(PoolingStrategy { kind, n_pixels }),
        })
        .collect()
}

impl Grid {
    pub fn cells(self, n_pixels: usize) -> Vec<ConfigDelta> {
        match self {
            Grid::Weights => weight_grid(),
            Grid::Pooling => pooling_grid(n_pixels),
            Grid::Both => weight_grid().into_iter().chain(pooling_grid(n_pixels)).collect(),
        }
    }
}

/// Datasets for an ablation: labeled source training data, unlabeled target
/// training data and a labeled target evaluation split.
#[derive(Clone, Debug)]
pub struct AblationData {
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub val: ValSets,
    pub target_eval: DomainDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub delta: ConfigDelta,
    /// Final target dice for each seed.
    pub per_seed: Vec<f64>,
    pub mean_target_dice: Option<f64>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

fn run_cell(base: &TrainConfig, delta: &ConfigDelta, data: &AblationData, seed: u64) -> Result<f64> {
    let mut config = delta.apply(base);
    config.seed = seed;
    let mut out = train::<f32>(&config, &data.source, &data.target, &data.val, None)?;
    Ok(evaluate(&mut out.last, &data.target_eval)?.aggregate.dice)
}

/// Trains one model per (cell, seed). Every cell uses the same seeds, hence
/// identical initializations. A failing cell is recorded and the others
/// continue. `jobs` worker threads share the work.
pub fn run_ablation(
    grid: &[ConfigDelta],
    base: &TrainConfig,
    data: &AblationData,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let tasks: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| (0..seeds.len()).map(move |s| (c, s))).collect();
    let results: Mutex<Vec<Option<std::result::Result<f64, String>>>> = Mutex::new(vec![None; tasks.len()]);
    let next = Mutex::new(0usize);
    let workers = jobs.clamp(1, tasks.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = {
                    let mut n = next.lock().expect("task counter");
                    let k = *n;
                    *n += 1;
                    k
                };
                let Some(&(c, s)) = tasks.get(k) else { break };
                let r = run_cell(base, &grid[c], data, seeds[s]).map_err(|e| e.to_string());
                results.lock().expect("results")[k] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("results");
    let rows = grid
        .iter()
        .enumerate()
        .map(|(c, delta)| {
            let mut per_seed = Vec::new();
            let mut error = None;
            for s in 0..seeds.len() {
                match &results[c * seeds.len() + s] {
                    Some(Ok(d)) => per_seed.push(*d),
                    Some(Err(e)) => {
                        error.get_or_insert_with(|| format!("seed {}: {e}", seeds[s]));
                    }
                    None => {
                        error.get_or_insert_with(|| format!("seed {}: not run", seeds[s]));
                    }
                }
            }
            let mean_target_dice =
                (error.is_none()).then(|| per_seed.iter().sum::<f64>() / per_seed.len() as f64);
            AblationRow {
                delta: delta.clone(),
                per_seed,
                mean_target_dice,
                error,
            }
        })
        .collect();
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::write(path, e))?;
    w.write_record(["cell", "mi_weight", "pooling", "seeds", "mean_target_dice", "per_seed", "status"])
        .map_err(|e| Error::write(path, e))?;
    for r in rows {
        w.write_record([
            r.delta.label.clone(),
            r.delta.mi_weight.map(|v| v.to_string()).unwrap_or_default(),
            r.delta.pooling.map(|p| p.kind.to_string()).unwrap_or_default(),
            r.per_seed.len().to_string(),
            r.mean_target_dice.map(|v| format!("{v:.6}")).unwrap_or_else(|| "FAILED".into()),
            r.per_seed.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";"),
            r.error.clone().unwrap_or_else(|| "ok".into()),
        ])
        .map_err(|e| Error::write(path, e))?;
    }
    w.flush().map_err(|e| Error::write(path, e))
}

pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.delta.label.len()).max().unwrap_or(4).max(4);
    let mut s = format!("| {:<width$} | Target dice |\n|-{}-|-------------|\n", "Cell", "-".repeat(width));
    for r in rows {
        let v = r.mean_target_dice.map_or_else(|| "FAILED".to_string(), |d| format!("{d:.4}"));
        s.push_str(&format!("| {:<width$} | {v:>11} |\n", r.delta.label));
    }
    s
}
