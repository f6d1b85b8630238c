//! Config-driven experiments and the `bico` command line.
//!
//! An [`ExperimentConfig`] names a synthetic task suite, two architectures,
//! optimizer settings, a calibration strategy with budgets, the variants to
//! compare and the seeds to average over. [`run_sweep`] executes it and
//! returns a [`TransferReport`]; the `run-experiment` subcommand writes that
//! report as CSV together with a mean/std summary.
//!
//! Exit codes: 0 success, 2 config or data error, 3 checkpoint error,
//! 4 transfer incompatibility, 5 every sweep row failed.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{
    bico_pipeline, depth_match, estimate_maps, naive_baseline, MapSource, TransferVariant,
};
use crate::calib::{
    collect, generate_task_suite, load_dataset, select_calibration, Budget, DataShape, Strategy,
    TaskSuite, TaskSuiteConfig,
};
use crate::diag::{
    estimate_cost, layer_output_similarity, similarity_profile, snapshot_consistency, CostEstimate,
};
use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::nn::{
    accuracy, load_checkpoint, load_trajectory, save_checkpoint, save_trajectory, train,
    Activation, Dataset, InputKind, Model, ModelSpec, OptimizerConfig, TrajectoryOptions,
};
use crate::taskvec::{apply, extract, NaiveMode};

pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "task_id,variant,budget,seed,accuracy,delta_acc,wall_time_ms,status";

/// Hidden widths and nonlinearity of an MLP over the suite's inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Patch side for image suites; ignored for vectors.
    #[serde(default)]
    pub patch: Option<usize>,
}

impl ArchConfig {
    pub fn spec(&self, data: &TaskSuiteConfig) -> Result<ModelSpec> {
        let input = match data.shape {
            DataShape::Vector { dim } => InputKind::Vector { dim },
            DataShape::Image { height, width } => InputKind::Image {
                height,
                width,
                patch: self
                    .patch
                    .ok_or_else(|| Error::Config("image suites need a patch size".into()))?,
            },
        };
        let spec = ModelSpec::mlp(input, &self.hidden, data.num_classes, self.activation);
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub strategy: Strategy,
    pub budgets: Vec<Budget>,
}

/// Everything a sweep compares. Transfer variants map onto the align module;
/// the rest are baselines.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, ValueEnum,
)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Variant {
    Bico,
    InputOnly,
    OutputOnly,
    GradientOnly,
    NaivePad,
    NaiveCrop,
    ZeroShot,
    /// Fine-tune the target directly on the calibration set.
    TargetFinetune,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Bico => "bico",
            Variant::InputOnly => "input_only",
            Variant::OutputOnly => "output_only",
            Variant::GradientOnly => "gradient_only",
            Variant::NaivePad => "naive_pad",
            Variant::NaiveCrop => "naive_crop",
            Variant::ZeroShot => "zero_shot",
            Variant::TargetFinetune => "target_finetune",
        }
    }

    pub fn transfer_variant(self) -> Option<TransferVariant> {
        match self {
            Variant::Bico => Some(TransferVariant::Bico),
            Variant::InputOnly => Some(TransferVariant::InputOnly),
            Variant::OutputOnly => Some(TransferVariant::OutputOnly),
            Variant::GradientOnly => Some(TransferVariant::GradientOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_task_id")]
    pub task_id: String,
    #[serde(default)]
    pub data: TaskSuiteConfig,
    /// Seeds data generation and pre-training.
    #[serde(default)]
    pub data_seed: u64,
    pub source: ArchConfig,
    pub target: ArchConfig,
    #[serde(default)]
    pub pretrain: OptimizerConfig,
    #[serde(default)]
    pub finetune: OptimizerConfig,
    /// Optimizer for the `target_finetune` baseline; `finetune` when absent.
    #[serde(default)]
    pub target_finetune: Option<OptimizerConfig>,
    pub calibration: CalibrationConfig,
    pub variants: Vec<Variant>,
    /// Each seed drives source fine-tuning, calibration sampling and the
    /// target fine-tuning baseline.
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Pre-train a fresh model pair per seed instead of one shared pair.
    #[serde(default)]
    pub replicate_pretraining: bool,
}

fn default_task_id() -> String {
    "synthetic".into()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.variants.is_empty() || self.seeds.is_empty() || self.calibration.budgets.is_empty()
        {
            return bad("a sweep needs at least one variant, seed and budget".into());
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.data.validate().map_err(wrap)?;
        self.source.spec(&self.data).map_err(wrap)?;
        self.target.spec(&self.data).map_err(wrap)?;
        self.pretrain.validate().map_err(wrap)?;
        self.finetune.validate().map_err(wrap)?;
        if let Some(o) = &self.target_finetune {
            o.validate().map_err(wrap)?;
        }
        Ok(())
    }

    pub fn source_spec(&self) -> Result<ModelSpec> {
        self.source.spec(&self.data)
    }

    pub fn target_spec(&self) -> Result<ModelSpec> {
        self.target.spec(&self.data)
    }

    pub fn suite(&self) -> Result<TaskSuite> {
        generate_task_suite(&self.data, self.data_seed)
    }

    fn pretrain_seed(&self, seed: u64) -> u64 {
        if self.replicate_pretraining {
            Rng::derive(self.data_seed, 0x9e7 ^ seed).next_u64()
        } else {
            self.data_seed
        }
    }

    /// Cost of one transfer at the largest budget against fine-tuning the
    /// target with the `finetune` settings.
    pub fn cost(&self) -> Result<CostEstimate> {
        let a = self.source_spec()?;
        let b = self.target_spec()?;
        let width = |s: &ModelSpec| {
            s.layers
                .iter()
                .map(|l| l.d_in.max(l.d_out))
                .max()
                .unwrap_or(0) as u64
        };
        let n = self
            .calibration
            .budgets
            .iter()
            .map(|b| b.total(self.data.num_classes))
            .max()
            .unwrap_or(0);
        Ok(estimate_cost(
            a.num_parameters() as u64,
            b.num_parameters() as u64,
            b.depth() as u64,
            (n * b.input.tokens()) as u64,
            width(&a),
            width(&b),
            self.finetune.steps as u64,
        ))
    }
}

fn with_seed(cfg: &OptimizerConfig, seed: u64) -> OptimizerConfig {
    OptimizerConfig {
        seed,
        ..cfg.clone()
    }
}

/// Initializes `spec` and trains it on `data` with the given settings.
pub fn pretrain_model(
    spec: &ModelSpec,
    data: &Dataset,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<Model> {
    let init = Model::init(spec.clone(), &mut Rng::derive(seed, 0x1417))?;
    Ok(train(
        &init,
        data,
        &with_seed(opt, Rng::derive(seed, 0x7a1).next_u64()),
        None,
    )?
    .0)
}

/// Source and target pre-trained on their own corpora.
pub fn pretrain_pair(
    cfg: &ExperimentConfig,
    suite: &TaskSuite,
    seed: u64,
) -> Result<(Model, Model)> {
    let (a, b) = rayon::join(
        || {
            pretrain_model(
                &cfg.source_spec()?,
                &suite.pretrain_a,
                &cfg.pretrain,
                Rng::derive(seed, 0xa).next_u64(),
            )
        },
        || {
            pretrain_model(
                &cfg.target_spec()?,
                &suite.pretrain_b,
                &cfg.pretrain,
                Rng::derive(seed, 0xb).next_u64(),
            )
        },
    );
    Ok((a?, b?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task_id: String,
    pub variant: Variant,
    pub budget: Budget,
    pub seed: u64,
    pub accuracy: Option<f64>,
    /// Accuracy minus the target's zero-shot accuracy on the same seed.
    pub delta_acc: Option<f64>,
    /// Frobenius norm of the applied update per target layer.
    pub tau_frobenius: Vec<f64>,
    pub wall_time_ms: u128,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

impl ReportRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.task_id,
            self.variant.name(),
            self.budget,
            self.seed,
            opt(self.accuracy),
            opt(self.delta_acc),
            self.wall_time_ms,
            self.status.replace([',', '\n', '\r'], " ")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub budget: Budget,
    pub runs: usize,
    pub failed: usize,
    pub mean_accuracy: Option<f64>,
    /// Sample standard deviation; needs two successful runs.
    pub std_accuracy: Option<f64>,
    pub mean_delta_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub rows: Vec<ReportRow>,
    pub cost: CostEstimate,
}

impl TransferReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<(Variant, Budget), Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.variant, r.budget)).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|((variant, budget), rows)| {
                let acc: Vec<f64> = rows.iter().filter_map(|r| r.accuracy).collect();
                let delta: Vec<f64> = rows.iter().filter_map(|r| r.delta_acc).collect();
                let (mean_accuracy, std_accuracy) = mean_std(&acc);
                SummaryRow {
                    variant,
                    budget,
                    runs: rows.len(),
                    failed: rows.iter().filter(|r| !r.ok()).count(),
                    mean_accuracy,
                    std_accuracy,
                    mean_delta_acc: mean_std(&delta).0,
                }
            })
            .collect()
    }

    pub fn mean_accuracy(&self, variant: Variant, budget: Budget) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.variant == variant && s.budget == budget)
            .and_then(|s| s.mean_accuracy)
    }

    pub fn summary_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out =
            String::from("variant,budget,runs,failed,mean_accuracy,std_accuracy,mean_delta_acc\n");
        for s in self.summary() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.variant.name(),
                s.budget,
                s.runs,
                s.failed,
                opt(s.mean_accuracy),
                opt(s.std_accuracy),
                opt(s.mean_delta_acc)
            );
        }
        out
    }

    pub fn cost_line(&self) -> String {
        let c = &self.cost;
        format!(
            "estimated FLOPs (unit constants): calibration {:.3e}, alignment {:.3e}, transfer total {:.3e}, target fine-tuning {:.3e}",
            c.calib_flops, c.alignment_flops, c.bico_total, c.finetune_flops
        )
    }
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() >= 2)
        .then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

fn failed(e: &Error) -> String {
    format!("failed: {e}")
}

struct SeedContext {
    seed: u64,
    source_pre: Model,
    source_ft: Model,
    target_pre: Model,
    zero_shot: f64,
}

fn run_row(
    cfg: &ExperimentConfig,
    suite: &TaskSuite,
    ctx: &SeedContext,
    budget: Budget,
    variant: Variant,
) -> Result<(f64, Vec<f64>)> {
    let calib = select_calibration(
        &suite.downstream_train,
        cfg.calibration.strategy,
        budget,
        Some(&ctx.target_pre),
        Rng::derive(ctx.seed, 0xc4).next_u64(),
    )?;
    let tau_norms =
        |m: &Model| -> Result<Vec<f64>> { Ok(extract(&ctx.target_pre, m)?.weight_norms()) };
    let model = match variant {
        Variant::ZeroShot => ctx.target_pre.clone(),
        Variant::NaivePad | Variant::NaiveCrop => {
            let mode = if variant == Variant::NaivePad {
                NaiveMode::Pad
            } else {
                NaiveMode::Crop
            };
            let tau = extract(&ctx.source_pre, &ctx.source_ft)?;
            apply(
                &ctx.target_pre,
                &naive_baseline(&tau, &ctx.target_pre.spec, mode)?,
            )?
        }
        Variant::TargetFinetune => {
            let opt = cfg.target_finetune.as_ref().unwrap_or(&cfg.finetune);
            let opt = with_seed(opt, Rng::derive(ctx.seed, 0x7f).next_u64());
            train(&ctx.target_pre, &calib.data, &opt, None)?.0
        }
        _ => {
            let tv = variant.transfer_variant().expect("transfer variant");
            bico_pipeline(
                &ctx.source_pre,
                &ctx.source_ft,
                &ctx.target_pre,
                &calib.data,
                tv,
            )?
            .model
        }
    };
    Ok((
        accuracy(&model, &suite.downstream_test)?,
        tau_norms(&model)?,
    ))
}

/// Runs every `(seed, budget, variant)` combination. Failures are recorded
/// per row; rows come back sorted by task, variant, budget and seed.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<TransferReport> {
    cfg.validate()?;
    let suite = cfg.suite()?;
    let cost = cfg.cost()?;

    let pre_seeds: BTreeSet<u64> = cfg.seeds.iter().map(|&s| cfg.pretrain_seed(s)).collect();
    let pretrained: BTreeMap<u64, std::result::Result<(Model, Model), String>> = pre_seeds
        .into_par_iter()
        .map(|ps| {
            (
                ps,
                pretrain_pair(cfg, &suite, ps).map_err(|e| e.to_string()),
            )
        })
        .collect();

    let contexts: Vec<(u64, std::result::Result<SeedContext, String>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let ctx = match &pretrained[&cfg.pretrain_seed(seed)] {
                Err(e) => Err(e.clone()),
                Ok((a, b)) => (|| -> Result<SeedContext> {
                    let opt = with_seed(&cfg.finetune, Rng::derive(seed, 0xf7).next_u64());
                    let source_ft = train(a, &suite.downstream_train, &opt, None)?.0;
                    Ok(SeedContext {
                        seed,
                        zero_shot: accuracy(b, &suite.downstream_test)?,
                        source_pre: a.clone(),
                        source_ft,
                        target_pre: b.clone(),
                    })
                })()
                .map_err(|e| e.to_string()),
            };
            (seed, ctx)
        })
        .collect();

    let mut jobs = Vec::new();
    for (seed, ctx) in &contexts {
        for &budget in &cfg.calibration.budgets {
            for &variant in &cfg.variants {
                jobs.push((*seed, ctx, budget, variant));
            }
        }
    }
    let mut rows: Vec<ReportRow> = jobs
        .into_par_iter()
        .map(|(seed, ctx, budget, variant)| {
            let start = Instant::now();
            let res = match ctx {
                Ok(c) => run_row(cfg, &suite, c, budget, variant).map(|r| (r, c.zero_shot)),
                Err(e) => Err(Error::Precondition(format!("setup failed: {e}"))),
            };
            let wall_time_ms = start.elapsed().as_millis();
            let mut row = ReportRow {
                task_id: cfg.task_id.clone(),
                variant,
                budget,
                seed,
                accuracy: None,
                delta_acc: None,
                tau_frobenius: Vec::new(),
                wall_time_ms,
                status: "ok".into(),
            };
            match res {
                Ok(((acc, norms), zs)) => {
                    row.accuracy = Some(acc);
                    row.delta_acc = Some(acc - zs);
                    row.tau_frobenius = norms;
                }
                Err(e) => row.status = failed(&e),
            }
            row
        })
        .collect();
    rows.sort_by(|a, b| {
        (&a.task_id, a.variant, a.budget, a.seed).cmp(&(&b.task_id, b.variant, b.budget, b.seed))
    });
    Ok(TransferReport { rows, cost })
}

/// Runs `f` on a pool capped by `BICO_THREADS` when that is set.
pub fn with_thread_cap<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    match std::env::var("BICO_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::Config(format!(
                    "BICO_THREADS must be a positive integer, got {v:?}"
                ))
            })?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

// ---------------------------------------------------------------------------
// command line

#[derive(Debug, Parser)]
#[command(
    name = "bico",
    version,
    about = "Training-free task-vector transfer between models"
)]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Diagnostic {
    CkaCosine,
    LayerSimilarity,
    Consistency,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the task suite and write its splits.
    GenData,
    /// Pre-train the source or target architecture on its corpus.
    Pretrain {
        #[arg(long, value_enum)]
        role: Role,
        /// Training data; the config's pre-training corpus for `role` otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint.
    Finetune {
        #[arg(long = "in")]
        input: PathBuf,
        /// Training data; the config's downstream training split otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        trajectory: TrajectoryArgs,
    },
    /// Move a source task vector onto a target.
    Transfer(TransferArgs),
    /// Top-1 accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-layer diagnostics as CSV.
    Diagnose(DiagnoseArgs),
    /// Run the full sweep described by the config.
    RunExperiment,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    /// Write the fine-tuning trajectory here.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Log every k-th step.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Keep per-step gradient and input factors (large).
    #[arg(long)]
    pub factors: bool,
    /// Snapshot layer inputs on the first n training examples.
    #[arg(long, default_value_t = 64)]
    pub snapshot: usize,
}

#[derive(Debug, Args)]
pub struct CalibArgs {
    /// Calibration data (or a pool to draw from with --budget / --per-class).
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long, conflicts_with = "per_class")]
    pub budget: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum StrategyArg {
    Random,
    ClassBalanced,
    CentroidNear,
    CentroidFar,
    HalfClass,
    OneClass,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Random => Strategy::Random,
            StrategyArg::ClassBalanced => Strategy::ClassBalanced,
            StrategyArg::CentroidNear => Strategy::CentroidNear,
            StrategyArg::CentroidFar => Strategy::CentroidFar,
            StrategyArg::HalfClass => Strategy::HalfClass,
            StrategyArg::OneClass => Strategy::OneClass,
        }
    }
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub source_pre: PathBuf,
    #[arg(long)]
    pub source_ft: PathBuf,
    #[arg(long)]
    pub target_pre: PathBuf,
    #[command(flatten)]
    pub calib: CalibArgs,
    #[arg(long, value_enum, default_value = "bico")]
    pub variant: Variant,
    /// Also write the fitted maps.
    #[arg(long)]
    pub maps_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long, value_enum)]
    pub which: Diagnostic,
    /// cka_cosine: source pre-trained checkpoint.
    #[arg(long)]
    pub source_pre: Option<PathBuf>,
    /// cka_cosine: target pre-trained checkpoint.
    #[arg(long)]
    pub target_pre: Option<PathBuf>,
    /// layer_similarity: checkpoints to compare (repeatable).
    #[arg(long)]
    pub candidate: Vec<PathBuf>,
    /// layer_similarity: reference checkpoint.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// cka_cosine / layer_similarity: data to run the models on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// consistency: trajectory written by `finetune --trajectory`.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_TRANSFER: i32 = 4;
pub const EXIT_SWEEP_FAILED: i32 = 5;

trait Code<T> {
    fn code(self, code: i32) -> std::result::Result<T, CliError>;
}

impl<T> Code<T> for Result<T> {
    fn code(self, code: i32) -> std::result::Result<T, CliError> {
        self.map_err(|e| CliError {
            code,
            message: e.to_string(),
        })
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| config_err("--config is required"))?;
    ExperimentConfig::load(path).code(EXIT_CONFIG)
}

fn load_model(path: &Path) -> CliResult<Model> {
    load_checkpoint(path).map_err(|e| CliError {
        code: EXIT_CHECKPOINT,
        message: format!("{}: {e}", path.display()),
    })
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    load_dataset(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn require_out(cli: &Cli) -> CliResult<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| config_err("--out is required"))
}

fn save_model(model: &Model, path: &Path) -> CliResult<()> {
    save_checkpoint(model, path).map_err(|e| CliError {
        code: EXIT_CHECKPOINT,
        message: format!("{}: {e}", path.display()),
    })
}

fn emit(cli: &Cli, text: &str) -> CliResult<()> {
    match &cli.out {
        Some(p) => std::fs::write(p, text).map_err(|e| config_err(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match with_thread_cap(|| run(&cli)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let say = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::GenData => {
            let mut cfg = load_config(cli)?;
            if let Some(s) = cli.seed {
                cfg.data_seed = s;
            }
            let suite = cfg.suite().code(EXIT_CONFIG)?;
            let dir = cli.out.clone().or_else(|| cfg.output_dir.clone());
            let mut hasher = Sha256::new();
            for (name, data) in suite.splits() {
                let bytes = crate::calib::dataset_to_container(data).to_bytes();
                hasher.update(name.as_bytes());
                hasher.update(&bytes);
                if let Some(dir) = &dir {
                    std::fs::create_dir_all(dir).map_err(|e| config_err(e.to_string()))?;
                    let path = dir.join(format!("{name}.bico"));
                    std::fs::write(&path, &bytes)
                        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                    say(format!(
                        "wrote {} ({} examples)",
                        path.display(),
                        data.len()
                    ));
                }
            }
            let digest: String = hasher
                .finalize()
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect();
            println!("{digest}");
        }
        Command::Pretrain { role, data } => {
            let cfg = load_config(cli)?;
            let out = require_out(cli)?;
            let seed = cli.seed.unwrap_or(cfg.data_seed);
            let (spec, data) = {
                let spec = match role {
                    Role::Source => cfg.source_spec(),
                    Role::Target => cfg.target_spec(),
                }
                .code(EXIT_CONFIG)?;
                let data = match data {
                    Some(p) => load_data(p)?,
                    None => {
                        let suite = cfg.suite().code(EXIT_CONFIG)?;
                        match role {
                            Role::Source => suite.pretrain_a,
                            Role::Target => suite.pretrain_b,
                        }
                    }
                };
                (spec, data)
            };
            let stream = match role {
                Role::Source => 0xa,
                Role::Target => 0xb,
            };
            let model = pretrain_model(
                &spec,
                &data,
                &cfg.pretrain,
                Rng::derive(seed, stream).next_u64(),
            )
            .code(EXIT_CONFIG)?;
            save_model(&model, out)?;
            say(format!(
                "pretrained {} parameters, train accuracy {:.4}",
                spec.num_parameters(),
                accuracy(&model, &data).code(EXIT_CONFIG)?
            ));
        }
        Command::Finetune {
            input,
            data,
            trajectory,
        } => {
            let cfg = load_config(cli)?;
            let out = require_out(cli)?;
            let pre = load_model(input)?;
            let data = match data {
                Some(p) => load_data(p)?,
                None => cfg.suite().code(EXIT_CONFIG)?.downstream_train,
            };
            let mut opt = cfg.finetune.clone();
            if let Some(s) = cli.seed {
                opt.seed = s;
            }
            let logging = trajectory.trajectory.as_ref().map(|_| TrajectoryOptions {
                stride: trajectory.stride,
                record_factors: trajectory.factors,
                snapshot_inputs: (trajectory.snapshot > 0).then(|| {
                    let n = trajectory.snapshot.min(data.len());
                    data.subset(&(0..n).collect::<Vec<_>>()).inputs
                }),
            });
            let (ft, log) = train(&pre, &data, &opt, logging.as_ref()).code(EXIT_CONFIG)?;
            save_model(&ft, out)?;
            if let (Some(path), Some(log)) = (&trajectory.trajectory, log) {
                save_trajectory(&log, path).code(EXIT_CONFIG)?;
            }
            say(format!(
                "train accuracy {:.4} -> {:.4}",
                accuracy(&pre, &data).code(EXIT_CONFIG)?,
                accuracy(&ft, &data).code(EXIT_CONFIG)?
            ));
        }
        Command::Transfer(args) => {
            let out = require_out(cli)?;
            let source_pre = load_model(&args.source_pre)?;
            let source_ft = load_model(&args.source_ft)?;
            let target_pre = load_model(&args.target_pre)?;
            let pool = load_data(&args.calib.calib)?;
            let budget = match (args.calib.budget, args.calib.per_class) {
                (Some(n), _) => Some(Budget::Total(n)),
                (_, Some(k)) => Some(Budget::PerClass(k)),
                _ => None,
            };
            let calib = match budget {
                None => pool,
                Some(b) => {
                    let strategy = args.calib.strategy.map_or(Strategy::Random, Strategy::from);
                    select_calibration(&pool, strategy, b, Some(&target_pre), cli.seed.unwrap_or(0))
                        .code(EXIT_CONFIG)?
                        .data
                }
            };
            let model = match args.variant {
                Variant::ZeroShot => target_pre,
                Variant::TargetFinetune => {
                    return Err(config_err(
                        "target_finetune is a sweep baseline; use run-experiment",
                    ))
                }
                Variant::NaivePad | Variant::NaiveCrop => {
                    let mode = if args.variant == Variant::NaivePad {
                        NaiveMode::Pad
                    } else {
                        NaiveMode::Crop
                    };
                    let tau = extract(&source_pre, &source_ft).code(EXIT_TRANSFER)?;
                    let tau_hat =
                        naive_baseline(&tau, &target_pre.spec, mode).code(EXIT_TRANSFER)?;
                    apply(&target_pre, &tau_hat).code(EXIT_TRANSFER)?
                }
                v => {
                    let tv = v.transfer_variant().expect("transfer variant");
                    let outcome = bico_pipeline(&source_pre, &source_ft, &target_pre, &calib, tv)
                        .code(EXIT_TRANSFER)?;
                    for w in &outcome.maps.warnings {
                        eprintln!(
                            "warning: layer {} {:?} map is rank {} of {}; the map is not unique",
                            w.target_layer, w.side, w.rank, w.full_rank
                        );
                    }
                    if let Some(p) = &args.maps_out {
                        outcome.maps.save(p).code(EXIT_CONFIG)?;
                    }
                    outcome.model
                }
            };
            save_model(&model, out)?;
            say(format!("wrote {}", out.display()));
        }
        Command::Eval { model, data } => {
            let m = load_model(model)?;
            let d = load_data(data)?;
            if d.is_empty() {
                return Err(config_err("dataset is empty"));
            }
            if d.num_classes != m.spec.num_classes {
                return Err(config_err(format!(
                    "dataset has {} classes, model predicts {}",
                    d.num_classes, m.spec.num_classes
                )));
            }
            let acc = accuracy(&m, &d).code(EXIT_CONFIG)?;
            println!("accuracy {acc:.6}");
            let row = format!(
                "model,data,examples,accuracy\n{},{},{},{acc:.6}\n",
                model.display(),
                data.display(),
                d.len()
            );
            match &cli.out {
                Some(p) => std::fs::write(p, row).map_err(|e| config_err(e.to_string()))?,
                None => print!("{row}"),
            }
        }
        Command::Diagnose(args) => {
            let csv = diagnose(args)?;
            emit(cli, &csv)?;
        }
        Command::RunExperiment => {
            let mut cfg = load_config(cli)?;
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            let report = run_sweep(&cfg).code(EXIT_CONFIG)?;
            let dir = cli.out.clone().or_else(|| cfg.output_dir.clone());
            match &dir {
                Some(dir) => {
                    let io = |e: std::io::Error| config_err(format!("{}: {e}", dir.display()));
                    std::fs::create_dir_all(dir).map_err(io)?;
                    std::fs::write(dir.join("report.csv"), report.to_csv()).map_err(io)?;
                    std::fs::write(dir.join("summary.csv"), report.summary_csv()).map_err(io)?;
                    let json = serde_json::to_string_pretty(&report).expect("report serializes");
                    std::fs::write(dir.join("report.json"), json).map_err(io)?;
                    say(format!("wrote {}", dir.join("report.csv").display()));
                }
                None => print!("{}", report.to_csv()),
            }
            if !cli.quiet {
                eprint!("{}", report.summary_csv());
                eprintln!("{}", report.cost_line());
            }
            if report.rows.iter().all(|r| !r.ok()) {
                return Err(CliError {
                    code: EXIT_SWEEP_FAILED,
                    message: "every sweep row failed".into(),
                });
            }
        }
    }
    Ok(())
}

fn diagnose(args: &DiagnoseArgs) -> CliResult<String> {
    let need = |p: &Option<PathBuf>, flag: &str| -> CliResult<PathBuf> {
        p.clone()
            .ok_or_else(|| config_err(format!("--{flag} is required for this diagnostic")))
    };
    let mut out = String::new();
    match args.which {
        Diagnostic::CkaCosine => {
            let a = load_model(&need(&args.source_pre, "source-pre")?)?;
            let b = load_model(&need(&args.target_pre, "target-pre")?)?;
            let data = load_data(&need(&args.data, "data")?)?;
            let cap_b = collect(&b, &data, false).code(EXIT_TRANSFER)?;
            let cap_a = collect(&a, &data, false)
                .and_then(|c| c.resampled(cap_b.tokens))
                .code(EXIT_TRANSFER)?;
            let matching = depth_match(a.depth(), b.depth()).code(EXIT_TRANSFER)?;
            let maps = estimate_maps(&cap_a, &cap_b, &matching, MapSource::Activations)
                .code(EXIT_TRANSFER)?;
            let profile = similarity_profile(&cap_a, &cap_b, &maps).code(EXIT_TRANSFER)?;
            out.push_str("target_layer,source_layer,stage,cka,cosine\n");
            for l in &profile.layers {
                let stage = serde_json::to_value(l.stage).expect("stage serializes");
                let _ = writeln!(
                    out,
                    "{},{},{},{:.9},{}",
                    l.target_layer,
                    l.source_layer,
                    stage.as_str().unwrap_or_default(),
                    l.cka,
                    l.cosine.map(|c| format!("{c:.9}")).unwrap_or_default()
                );
            }
        }
        Diagnostic::LayerSimilarity => {
            let reference = load_model(&need(&args.reference, "reference")?)?;
            let data = load_data(&need(&args.data, "data")?)?;
            if args.candidate.is_empty() {
                return Err(config_err("--candidate is required for this diagnostic"));
            }
            out.push_str("candidate,layer,cosine\n");
            for path in &args.candidate {
                let cand = load_model(path)?;
                let sims =
                    layer_output_similarity(&cand, &reference, &data.inputs).code(EXIT_TRANSFER)?;
                for (l, s) in sims.iter().enumerate() {
                    let _ = writeln!(out, "{},{l},{s:.9}", path.display());
                }
            }
        }
        Diagnostic::Consistency => {
            let path = need(&args.trajectory, "trajectory")?;
            let log = load_trajectory(&path).map_err(|e| CliError {
                code: EXIT_CHECKPOINT,
                message: format!("{}: {e}", path.display()),
            })?;
            let profile = snapshot_consistency(&log).code(EXIT_CONFIG)?;
            out.push_str("layer,step,delta_direction,delta_magnitude,skipped_rows\n");
            for p in &profile.points {
                let _ = writeln!(
                    out,
                    "{},{},{:.9},{:.9},{}",
                    p.layer, p.step, p.delta_direction, p.delta_magnitude, p.skipped_rows
                );
            }
        }
    }
    Ok(out)
}
