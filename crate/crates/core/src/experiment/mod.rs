//! Experiment configuration, the command drivers and metrics export.
//!
//! A run is described by one TOML file. Every command writes its artifacts
//! under the output directory: one CSV per seed plus `summary.json`.

pub mod softmax;

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_ground_truth, generate_structural_task, sample_batch, write_jsonl};
use crate::error::{Result, ScbError};
use crate::geometry::{Dims, GroundTruth, ModelParams};
use crate::oracle::{exact_moment_checks, random_feasible_params, EnumBudget, MomentReport};
use crate::population::{distances, project, reduced_noise_simulate, ReducedConfig, ReducedConsts, ReducedMode, ReducedState};
use crate::rng::RngSeed;
use crate::trainer::{
    continue_vanilla_sgd, normalized_distances, run_algorithm1, run_from_stage2, Cutoff, GradSource, RunOutput, Schedule,
    StageConfig, StageSummary, Stage3Mode, StepRule, StopRule, TrainState, Trainer, TrajRow,
};
use crate::transfer::{gen_pretrained, run_transfer_pipeline, PretrainedTask, TransferConfig};
use softmax::{run_softmax_compare, SoftmaxCompareConfig};

pub const SUMMARY_FILE: &str = "summary.json";
pub const ORACLE_REPORT_FILE: &str = "oracle_report.json";
/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "SCB_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Prox,
    Sgd,
    SgdSmallLr,
    Population,
    ReducedSim,
    Transfer,
    SoftmaxCompare,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Prox => "prox",
            Mode::Sgd => "sgd",
            Mode::SgdSmallLr => "sgd_small_lr",
            Mode::Population => "population",
            Mode::ReducedSim => "reduced_sim",
            Mode::Transfer => "transfer",
            Mode::SoftmaxCompare => "softmax_compare",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Simulate,
    Transfer,
    OracleCheck,
    SoftmaxCompare,
}

impl FromStr for Command {
    type Err = ScbError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "generate" => Command::Generate,
            "train" => Command::Train,
            "simulate" => Command::Simulate,
            "transfer" => Command::Transfer,
            "oracle-check" => Command::OracleCheck,
            "softmax-compare" => Command::SoftmaxCompare,
            other => return Err(ScbError::Config(format!("unknown command {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub t: usize,
    pub n: usize,
    pub q: usize,
    #[serde(default = "default_c")]
    pub c: f64,
    /// Generation seed.
    #[serde(default)]
    pub seed: u64,
    /// Generate a separate task for every run seed (`seed + run_seed`).
    #[serde(default)]
    pub vary_with_seed: bool,
    #[serde(default = "default_max_tries")]
    pub max_tries: usize,
    /// Load the task from a ground-truth JSON file instead of generating it.
    /// Relative paths are resolved against the config file's directory.
    #[serde(default)]
    pub file: Option<PathBuf>,
}

fn default_c() -> f64 {
    2.0
}
fn default_max_tries() -> usize {
    20_000
}

impl TaskConfig {
    pub fn dims(&self) -> Result<Dims> {
        Dims::new(self.t, self.n, self.q, self.c)
    }

    pub fn task_seed(&self, run_seed: u64) -> u64 {
        if self.vary_with_seed {
            self.seed.wrapping_add(run_seed)
        } else {
            self.seed
        }
    }

    pub fn load(&self, base: &Path, run_seed: u64) -> Result<GroundTruth> {
        match &self.file {
            Some(f) => {
                let path = if f.is_absolute() { f.clone() } else { base.join(f) };
                let gt = GroundTruth::from_json(&fs::read_to_string(path)?)?;
                let d = gt.dims;
                if (d.t, d.n, d.q) != (self.t, self.n, self.q) {
                    return Err(ScbError::Config(format!(
                        "task file has (T, N, Q) = ({}, {}, {}), config says ({}, {}, {})",
                        d.t, d.n, d.q, self.t, self.n, self.q
                    )));
                }
                Ok(gt)
            }
            None => generate_ground_truth(self.dims()?, RngSeed::new(self.task_seed(run_seed)), self.max_tries),
        }
    }
}

/// How the configured `eta` values map to the two block rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateConvention {
    /// `eta_V = s eta / K_Q`, `eta_A = s eta / K_P`.
    #[default]
    Normalized,
    /// `eta_V = eta_A = s eta`.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    #[serde(default)]
    pub convention: RateConvention,
    /// The multiplier `s`.
    #[serde(default = "default_one")]
    pub scale: f64,
}

fn default_one() -> f64 {
    1.0
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig { convention: RateConvention::Normalized, scale: 1.0 }
    }
}

impl RateConfig {
    /// `(eta_A, eta_V)` for a configured `eta`.
    pub fn split(&self, eta: f64, gt: &GroundTruth) -> (f64, f64) {
        let e = eta * self.scale;
        match self.convention {
            RateConvention::Raw => (e, e),
            RateConvention::Normalized => {
                let c = gt.constants();
                (e / c.k_p, e / c.k_q)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eta1")]
    pub eta1: f64,
    /// Fixed Stage-1 length. Without it Stage 1 stops once
    /// `max(alpha_V, alpha_A) >= stage1_signal_const / (Q N)`.
    #[serde(default)]
    pub stage1_steps: Option<usize>,
    #[serde(default = "default_half")]
    pub stage1_signal_const: f64,
    #[serde(default = "default_stage1_max")]
    pub stage1_max_steps: usize,
    #[serde(default = "default_lambda0")]
    pub lambda0: Cutoff,
    #[serde(default = "default_eta2")]
    pub eta2: f64,
    /// Stage-2 rate of the `sgd_small_lr` baseline.
    #[serde(default = "default_eta2_small")]
    pub eta2_small: f64,
    #[serde(default = "default_stage2_steps")]
    pub stage2_steps: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_stage3_cutoff")]
    pub stage3_cutoff: Cutoff,
    #[serde(default)]
    pub stage3_mode: Stage3Mode,
    #[serde(default = "default_eta2")]
    pub eta3: f64,
    #[serde(default)]
    pub stage3_steps: usize,
    /// Batch size of Stage 2 and Stage 3; defaults to `batch_size`.
    #[serde(default)]
    pub stage2_batch_size: Option<usize>,
}

fn default_batch() -> usize {
    64
}
fn default_eta1() -> f64 {
    0.01
}
fn default_half() -> f64 {
    0.5
}
fn default_stage1_max() -> usize {
    100_000
}
fn default_lambda0() -> Cutoff {
    Cutoff::SignalScaled { c: 0.5 }
}
fn default_eta2() -> f64 {
    0.005
}
fn default_eta2_small() -> f64 {
    0.001
}
fn default_stage2_steps() -> usize {
    600
}
fn default_lambda() -> f64 {
    1e-5
}
fn default_stage3_cutoff() -> Cutoff {
    Cutoff::SparsityScaled { c: 0.25 }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        toml::from_str("").expect("every schedule key has a default")
    }
}

impl ScheduleConfig {
    pub fn stage1(&self, rates: &RateConfig, gt: &GroundTruth) -> StageConfig {
        let (eta_a, eta_v) = rates.split(self.eta1, gt);
        let stop = match self.stage1_steps {
            Some(steps) => StopRule::FixedSteps { steps },
            None => StopRule::SignalThreshold {
                threshold: self.stage1_signal_const / (gt.dims.q * gt.n()) as f64,
                max_steps: self.stage1_max_steps,
            },
        };
        StageConfig { eta_a, eta_v, lambda: 0.0, batch_size: self.batch_size, stop }
    }

    fn later_batch(&self) -> usize {
        self.stage2_batch_size.unwrap_or(self.batch_size)
    }

    /// Stage-2 configuration at rate `eta` with penalty `lambda`.
    pub fn stage2_at(&self, eta: f64, lambda: f64, rates: &RateConfig, gt: &GroundTruth) -> StageConfig {
        let (eta_a, eta_v) = rates.split(eta, gt);
        StageConfig {
            eta_a,
            eta_v,
            lambda,
            batch_size: self.later_batch(),
            stop: StopRule::FixedSteps { steps: self.stage2_steps },
        }
    }

    pub fn build(&self, rates: &RateConfig, gt: &GroundTruth) -> Schedule {
        let (_, eta_v3) = rates.split(self.eta3, gt);
        Schedule {
            stage1: self.stage1(rates, gt),
            lambda0: self.lambda0,
            stage2: self.stage2_at(self.eta2, self.lambda, rates, gt),
            stage3_cutoff: self.stage3_cutoff,
            stage3: StageConfig {
                eta_a: 0.0,
                eta_v: eta_v3,
                lambda: 0.0,
                batch_size: self.later_batch(),
                stop: StopRule::FixedSteps { steps: self.stage3_steps },
            },
            stage3_mode: self.stage3_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReducedSection {
    #[serde(default = "default_reduced_modes")]
    pub modes: Vec<ReducedMode>,
    pub steps: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub switch_step: usize,
    pub batch: usize,
    #[serde(default = "default_one")]
    pub sigma_scale: f64,
    pub noise_const: f64,
    pub noise_const_v: f64,
    /// Use the generated task's constants instead of the typical ones.
    #[serde(default)]
    pub consts_from_task: bool,
    #[serde(default = "default_one_usize")]
    pub log_every: usize,
    /// Starting `alpha_V = alpha_A`; the squared errors start at zero.
    #[serde(default)]
    pub init_alpha: f64,
}

fn default_reduced_modes() -> Vec<ReducedMode> {
    vec![ReducedMode::Sgd, ReducedMode::Prox]
}
fn default_one_usize() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleInstance {
    pub n: usize,
    pub t: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub instances: Vec<OracleInstance>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_param_scale")]
    pub param_scale: f64,
    #[serde(default = "default_max_outcomes")]
    pub max_outcomes: u128,
    #[serde(default = "default_oracle_tol")]
    pub tolerance: f64,
}

fn default_param_scale() -> f64 {
    0.3
}
fn default_max_outcomes() -> u128 {
    1_000_000
}
fn default_oracle_tol() -> f64 {
    1e-10
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    /// Samples written next to each task as JSON lines.
    #[serde(default)]
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggingConfig {
    /// Defaults to 1 below 10^4 total steps and 10 above.
    #[serde(default)]
    pub log_every: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub task: TaskConfig,
    #[serde(default)]
    pub rates: RateConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub rule: StepRule,
    #[serde(default)]
    pub logging: LoggingConfig,
    /// Gaussian noise added to population gradients in `population` mode.
    #[serde(default)]
    pub population_noise_sigma: Option<f64>,
    #[serde(default)]
    pub transfer: Option<TransferSection>,
    #[serde(default)]
    pub reduced: Option<ReducedSection>,
    #[serde(default)]
    pub softmax: Option<SoftmaxCompareConfig>,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub generate: GenerateConfig,
    /// Output directory; the command line takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    #[serde(flatten)]
    pub cfg: TransferConfig,
    /// Pretrained transition in the ground-truth JSON schema; generated from
    /// `gamma` when absent.
    #[serde(default)]
    pub pretrained_file: Option<PathBuf>,
}

fn default_mode() -> Mode {
    Mode::Prox
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ScbError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.dims()?;
        if self.seeds.is_empty() {
            return Err(ScbError::Config("seeds must not be empty".into()));
        }
        if !(self.rates.scale > 0.0) {
            return Err(ScbError::Config("rates.scale must be positive".into()));
        }
        let s = &self.schedule;
        if s.batch_size == 0 || s.later_batch() == 0 {
            return Err(ScbError::Config("batch sizes must be positive".into()));
        }
        for (name, v) in [("eta1", s.eta1), ("eta2", s.eta2), ("eta2_small", s.eta2_small), ("eta3", s.eta3), ("lambda", s.lambda)] {
            if !(v >= 0.0) {
                return Err(ScbError::Config(format!("schedule.{name} must be nonnegative")));
            }
        }
        match self.mode {
            Mode::Transfer if self.transfer.is_none() => return Err(ScbError::Config("mode transfer needs a [transfer] section".into())),
            Mode::ReducedSim if self.reduced.is_none() => return Err(ScbError::Config("mode reduced_sim needs a [reduced] section".into())),
            Mode::SoftmaxCompare if self.softmax.is_none() => {
                return Err(ScbError::Config("mode softmax_compare needs a [softmax] section".into()))
            }
            _ => {}
        }
        if let Some(t) = &self.transfer {
            t.cfg.validate()?;
        }
        Ok(())
    }

    fn log_every(&self, total_steps: usize) -> usize {
        self.logging.log_every.unwrap_or(if total_steps < 10_000 { 1 } else { 10 }).max(1)
    }
}

/// Builds the global thread pool, honoring `SCB_THREADS`. Returns the number
/// of threads requested, if any. Calling it twice is harmless.
pub fn configure_threads() -> Option<usize> {
    let n = std::env::var(THREADS_ENV).ok()?.trim().parse::<usize>().ok().filter(|&n| n > 0)?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Some(n)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Zero the wall-clock column so output bytes depend only on the config.
    pub deterministic: bool,
}

/// One CSV row of a training trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: u8,
    pub loss_est: f64,
    #[serde(rename = "alpha_V")]
    pub alpha_v: f64,
    #[serde(rename = "alpha_A")]
    pub alpha_a: f64,
    #[serde(rename = "delta_V_mu")]
    pub delta_v_mu: f64,
    #[serde(rename = "delta_A_mu")]
    pub delta_a_mu: f64,
    #[serde(rename = "dist_V_mu")]
    pub dist_v_mu: f64,
    #[serde(rename = "dist_A_mu")]
    pub dist_a_mu: f64,
    pub off_support_max: f64,
    #[serde(rename = "post_norm_dist_V_mu")]
    pub post_norm_dist_v_mu: Option<f64>,
    #[serde(rename = "post_norm_dist_A_mu")]
    pub post_norm_dist_a_mu: Option<f64>,
    pub wall_clock_s: f64,
}

impl MetricsRow {
    pub fn from_traj(r: &TrajRow, opts: RunOptions) -> Self {
        MetricsRow {
            step: r.step,
            stage: r.stage,
            loss_est: r.loss_est,
            alpha_v: r.alpha_v,
            alpha_a: r.alpha_a,
            delta_v_mu: r.delta_v_mu,
            delta_a_mu: r.delta_a_mu,
            dist_v_mu: r.dist_v_mu,
            dist_a_mu: r.dist_a_mu,
            off_support_max: r.off_support_max,
            post_norm_dist_v_mu: r.post_norm.map(|p| p.0),
            post_norm_dist_a_mu: r.post_norm.map(|p| p.1),
            wall_clock_s: if opts.deterministic { 0.0 } else { r.wall_clock_s },
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Outcome of one seed in `train` or `transfer`. When the run fails, the
/// `alpha_*` and `final_dist_*` fields hold the last logged values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub task_seed: u64,
    pub k_p: f64,
    pub k_q: f64,
    pub csv: String,
    pub alpha_v: Option<f64>,
    pub alpha_a: Option<f64>,
    pub final_dist_v_mu: Option<f64>,
    pub final_dist_a_mu: Option<f64>,
    pub post_norm_dist_v_mu: Option<f64>,
    pub post_norm_dist_a_mu: Option<f64>,
    pub diverged: bool,
    pub divergence_step: Option<usize>,
    pub negative_hits: usize,
    pub separated_at_rounding: Option<bool>,
    pub lambda0: Option<f64>,
    pub stages: Vec<StageSummary>,
    pub first_step_ratio: Option<f64>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub command: String,
    pub mode: Mode,
    pub runs: Vec<RunSummary>,
}

impl TrainSummary {
    pub fn any_diverged(&self) -> bool {
        self.runs.iter().any(|r| r.diverged)
    }

    /// First non-divergence error, if any.
    pub fn first_error(&self) -> Option<&str> {
        self.runs.iter().filter(|r| !r.diverged).find_map(|r| r.error.as_deref())
    }
}

fn summarize(
    seed: u64,
    task_seed: u64,
    gt: &GroundTruth,
    csv: String,
    out: &Result<RunOutput>,
    cutoff: Cutoff,
) -> RunSummary {
    let c = gt.constants();
    let mut s = RunSummary {
        seed,
        task_seed,
        k_p: c.k_p,
        k_q: c.k_q,
        csv,
        alpha_v: None,
        alpha_a: None,
        final_dist_v_mu: None,
        final_dist_a_mu: None,
        post_norm_dist_v_mu: None,
        post_norm_dist_a_mu: None,
        diverged: false,
        divergence_step: None,
        negative_hits: 0,
        separated_at_rounding: None,
        lambda0: None,
        stages: Vec::new(),
        first_step_ratio: None,
        warnings: Vec::new(),
        error: None,
    };
    match out {
        Ok(run) => {
            let (dv, da) = distances(&run.params, gt);
            s.final_dist_v_mu = Some(dv);
            s.final_dist_a_mu = Some(da);
            if let Ok(p) = project(&run.params, gt) {
                s.alpha_v = Some(p.alpha_v);
                s.alpha_a = Some(p.alpha_a);
                let post = normalized_distances(&run.params, gt, cutoff.resolve(p.alpha_v, gt.dims.q));
                match post {
                    Ok((pv, pa)) => {
                        s.post_norm_dist_v_mu = Some(pv);
                        s.post_norm_dist_a_mu = Some(pa);
                    }
                    Err(e) => s.warnings.push(format!("post-normalization: {e}")),
                }
            }
            s.negative_hits = run.negative_hits;
            s.separated_at_rounding = run.separated_at_rounding;
            s.lambda0 = run.lambda0_used;
            s.stages = run.stages.clone();
        }
        Err(e) => {
            if let ScbError::Divergence { step, .. } = e {
                s.diverged = true;
                s.divergence_step = Some(*step);
            }
            s.error = Some(e.to_string());
        }
    }
    s
}

fn out_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = match (out, &cfg.out) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => cfg.base_dir.join(o),
        (None, None) => return Err(ScbError::Config("no output directory given".into())),
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Runs `command` and writes its artifacts to `out` (or the config's `out`).
pub fn run_command(command: Command, cfg: &ExperimentConfig, out: Option<&Path>, opts: RunOptions) -> Result<CommandReport> {
    let dir = out_dir(cfg, out)?;
    match command {
        Command::Generate => cmd_generate(cfg, &dir).map(CommandReport::Generate),
        Command::Train => cmd_train(cfg, &dir, opts).map(CommandReport::Train),
        Command::Simulate => cmd_simulate(cfg, &dir).map(CommandReport::Simulate),
        Command::Transfer => cmd_transfer(cfg, &dir, opts).map(CommandReport::Train),
        Command::OracleCheck => cmd_oracle_check(cfg, &dir).map(CommandReport::Oracle),
        Command::SoftmaxCompare => cmd_softmax_compare(cfg, &dir).map(CommandReport::Softmax),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CommandReport {
    Generate(GenerateSummary),
    Train(TrainSummary),
    Simulate(SimulateSummary),
    Oracle(MomentReport),
    Softmax(SoftmaxSummary),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTask {
    pub task_seed: u64,
    pub file: String,
    pub k_p: f64,
    pub k_q: f64,
    pub mu_norm_sq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub tasks: Vec<GeneratedTask>,
}

/// Writes `ground_truth_seed<g>.json` for every distinct generation seed.
pub fn cmd_generate(cfg: &ExperimentConfig, dir: &Path) -> Result<GenerateSummary> {
    let mut seeds: Vec<u64> = cfg.seeds.iter().map(|&s| cfg.task.task_seed(s)).collect();
    seeds.dedup();
    let mut tasks = Vec::new();
    for g in seeds {
        let gt = generate_ground_truth(cfg.task.dims()?, RngSeed::new(g), cfg.task.max_tries)?;
        let file = format!("ground_truth_seed{g}.json");
        fs::write(dir.join(&file), gt.to_json()?)?;
        if cfg.generate.samples > 0 {
            let samples = sample_batch(&gt, cfg.generate.samples, &mut RngSeed::new(g).stream("samples"))?;
            write_jsonl(&samples, fs::File::create(dir.join(format!("samples_seed{g}.jsonl")))?)?;
        }
        let c = gt.constants();
        tasks.push(GeneratedTask { task_seed: g, file, k_p: c.k_p, k_q: c.k_q, mu_norm_sq: c.mu_norm_sq });
    }
    let summary = GenerateSummary { tasks };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn trainer_for<'g>(cfg: &ExperimentConfig, gt: &'g GroundTruth, seed: u64, source: GradSource, total: usize) -> Result<Trainer<'g>> {
    let mut trainer = Trainer::new(gt, RngSeed::new(seed).child("train"), source)?;
    trainer.rule = cfg.rule;
    trainer.log_every = cfg.log_every(total);
    trainer.post_norm_cutoff = Some(cfg.schedule.stage3_cutoff);
    Ok(trainer)
}

fn train_one(cfg: &ExperimentConfig, dir: &Path, seed: u64, opts: RunOptions) -> RunSummary {
    let task_seed = cfg.task.task_seed(seed);
    let csv = format!("{}_seed{seed}.csv", cfg.mode.name());
    let gt = match cfg.task.load(&cfg.base_dir, seed) {
        Ok(gt) => gt,
        Err(e) => return failed_summary(seed, task_seed, csv, e),
    };
    let sched = &cfg.schedule;
    let schedule = sched.build(&cfg.rates, &gt);
    let source = match (cfg.mode, cfg.population_noise_sigma) {
        (Mode::Population, Some(sigma)) => GradSource::PopulationNoise { sigma },
        (Mode::Population, None) => GradSource::Population,
        _ => GradSource::Minibatch,
    };
    let stage1_len = schedule.stage1.stop.max_steps();
    let total = stage1_len + sched.stage2_steps + sched.stage3_steps;
    let trainer = match trainer_for(cfg, &gt, seed, source, total) {
        Ok(t) => t,
        Err(e) => return failed_summary(seed, task_seed, csv, e),
    };
    let mut rows = Vec::new();
    let out = (|| -> Result<RunOutput> {
        match cfg.mode {
            Mode::Prox | Mode::Population => run_algorithm1(&trainer, &schedule, ModelParams::init(&gt), &mut rows),
            Mode::Sgd | Mode::SgdSmallLr => {
                let mut state = TrainState::new(ModelParams::init(&gt));
                rows.push(trainer.row(&state.params, 0, 1, f64::NAN)?);
                let s1 = trainer.run_stage(&mut state, &schedule.stage1, 1, &mut rows)?;
                let eta = if cfg.mode == Mode::Sgd { sched.eta2 } else { sched.eta2_small };
                let phase = sched.stage2_at(eta, 0.0, &cfg.rates, &gt);
                continue_vanilla_sgd(&trainer, &[phase], state, &mut rows, vec![s1])
            }
            other => Err(ScbError::Config(format!("mode {} is not a training mode", other.name()))),
        }
    })();
    finish_run(dir, &gt, seed, task_seed, csv, &rows, &out, sched.stage3_cutoff, opts)
}

fn failed_summary(seed: u64, task_seed: u64, csv: String, e: ScbError) -> RunSummary {
    RunSummary {
        seed,
        task_seed,
        k_p: f64::NAN,
        k_q: f64::NAN,
        csv,
        alpha_v: None,
        alpha_a: None,
        final_dist_v_mu: None,
        final_dist_a_mu: None,
        post_norm_dist_v_mu: None,
        post_norm_dist_a_mu: None,
        diverged: false,
        divergence_step: None,
        negative_hits: 0,
        separated_at_rounding: None,
        lambda0: None,
        stages: Vec::new(),
        first_step_ratio: None,
        warnings: Vec::new(),
        error: Some(e.to_string()),
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_run(
    dir: &Path,
    gt: &GroundTruth,
    seed: u64,
    task_seed: u64,
    csv: String,
    rows: &[TrajRow],
    out: &Result<RunOutput>,
    cutoff: Cutoff,
    opts: RunOptions,
) -> RunSummary {
    let mut s = summarize(seed, task_seed, gt, csv, out, cutoff);
    if let (Err(_), Some(last)) = (out, rows.last()) {
        s.alpha_v = Some(last.alpha_v);
        s.alpha_a = Some(last.alpha_a);
        s.final_dist_v_mu = Some(last.dist_v_mu);
        s.final_dist_a_mu = Some(last.dist_a_mu);
    }
    let metrics: Vec<MetricsRow> = rows.iter().map(|r| MetricsRow::from_traj(r, opts)).collect();
    if let Err(e) = write_csv(&dir.join(&s.csv), &metrics) {
        s.error.get_or_insert(e.to_string());
    }
    s
}

fn write_train_summary(dir: &Path, command: &str, mode: Mode, runs: Vec<RunSummary>) -> Result<TrainSummary> {
    let summary = TrainSummary { command: command.into(), mode, runs };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Trains every seed in parallel in the configured mode. Divergence and other
/// per-seed failures are recorded in the summary, not raised.
pub fn cmd_train(cfg: &ExperimentConfig, dir: &Path, opts: RunOptions) -> Result<TrainSummary> {
    if !matches!(cfg.mode, Mode::Prox | Mode::Sgd | Mode::SgdSmallLr | Mode::Population) {
        return Err(ScbError::Config(format!("train does not run mode {}; use its own command", cfg.mode.name())));
    }
    let runs: Vec<RunSummary> = cfg.seeds.par_iter().map(|&s| train_one(cfg, dir, s, opts)).collect();
    write_train_summary(dir, "train", cfg.mode, runs)
}

fn transfer_one(cfg: &ExperimentConfig, section: &TransferSection, dir: &Path, seed: u64, opts: RunOptions) -> RunSummary {
    let task_seed = cfg.task.task_seed(seed);
    let csv = format!("transfer_seed{seed}.csv");
    let gt = match cfg.task.load(&cfg.base_dir, seed) {
        Ok(gt) => gt,
        Err(e) => return failed_summary(seed, task_seed, csv, e),
    };
    let pretrained = match &section.pretrained_file {
        Some(f) => {
            let path = if f.is_absolute() { f.clone() } else { cfg.base_dir.join(f) };
            fs::read_to_string(path).map_err(ScbError::from).and_then(|s| PretrainedTask::from_json(&s, &gt))
        }
        None => gen_pretrained(&gt, section.cfg.gamma, &mut RngSeed::new(seed).stream("pretrained")),
    };
    let pretrained = match pretrained {
        Ok(p) => p,
        Err(e) => return failed_summary(seed, task_seed, csv, e),
    };
    let schedule = cfg.schedule.build(&cfg.rates, &gt);
    let total = 1 + cfg.schedule.stage2_steps + cfg.schedule.stage3_steps;
    let trainer = match trainer_for(cfg, &gt, seed, GradSource::Minibatch, total) {
        Ok(t) => t,
        Err(e) => return failed_summary(seed, task_seed, csv, e),
    };
    let mut rows = Vec::new();
    let out = run_transfer_pipeline(&trainer, &pretrained, &section.cfg, &schedule, &mut rows);
    let (run, first) = match out {
        Ok(o) => (Ok(o.run), Some(o.first_step)),
        Err(e) => (Err(e), None),
    };
    let mut s = finish_run(dir, &gt, seed, task_seed, csv, &rows, &run, cfg.schedule.stage3_cutoff, opts);
    if let Some(f) = first {
        s.first_step_ratio = Some(f.ratio);
        s.warnings.extend(f.warnings);
    }
    s
}

/// Runs the transfer pipeline for every seed.
pub fn cmd_transfer(cfg: &ExperimentConfig, dir: &Path, opts: RunOptions) -> Result<TrainSummary> {
    let section = cfg.transfer.as_ref().ok_or_else(|| ScbError::Config("transfer needs a [transfer] section".into()))?;
    let runs: Vec<RunSummary> = cfg.seeds.par_iter().map(|&s| transfer_one(cfg, section, dir, s, opts)).collect();
    write_train_summary(dir, "transfer", Mode::Transfer, runs)
}

/// Reduced-simulation CSV row; distances follow from the scalars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedRow {
    pub step: usize,
    pub stage: u8,
    #[serde(rename = "alpha_V")]
    pub alpha_v: f64,
    #[serde(rename = "alpha_A")]
    pub alpha_a: f64,
    #[serde(rename = "delta_V_mu")]
    pub delta_v_mu: f64,
    #[serde(rename = "delta_A_mu")]
    pub delta_a_mu: f64,
    #[serde(rename = "dist_V_mu")]
    pub dist_v_mu: f64,
    #[serde(rename = "dist_A_mu")]
    pub dist_a_mu: f64,
}

impl ReducedRow {
    pub fn new(step: usize, switch_step: usize, s: &ReducedState, c: &ReducedConsts) -> Self {
        let dist = |alpha: f64, k: f64, d: f64| ((1.0 - alpha).powi(2) * k + d).max(0.0).sqrt();
        ReducedRow {
            step,
            stage: if step <= switch_step { 1 } else { 2 },
            alpha_v: s.alpha_v,
            alpha_a: s.alpha_a,
            delta_v_mu: s.delta_v_sq.max(0.0).sqrt(),
            delta_a_mu: s.delta_a_sq.max(0.0).sqrt(),
            dist_v_mu: dist(s.alpha_v, c.k_p, s.delta_v_sq),
            dist_a_mu: dist(s.alpha_a, c.k_q, s.delta_a_sq),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateRun {
    pub seed: u64,
    pub mode: ReducedMode,
    pub csv: String,
    pub final_state: Option<ReducedState>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub consts: ReducedConsts,
    pub runs: Vec<SimulateRun>,
}

impl SimulateSummary {
    /// Final `||Delta_A||^2` of `mode` at `seed`.
    pub fn final_delta_a_sq(&self, seed: u64, mode: ReducedMode) -> Option<f64> {
        self.runs.iter().find(|r| r.seed == seed && r.mode == mode)?.final_state.map(|s| s.delta_a_sq)
    }
}

/// Reduced four-scalar simulation for every seed and mode. Both modes of a
/// seed draw from the same stream.
pub fn cmd_simulate(cfg: &ExperimentConfig, dir: &Path) -> Result<SimulateSummary> {
    let r = cfg.reduced.as_ref().ok_or_else(|| ScbError::Config("simulate needs a [reduced] section".into()))?;
    let consts = if r.consts_from_task {
        ReducedConsts::from_ground_truth(&cfg.task.load(&cfg.base_dir, cfg.seeds[0])?)
    } else {
        ReducedConsts::typical(cfg.task.t, cfg.task.n, cfg.task.q)
    };
    let jobs: Vec<(u64, ReducedMode)> = cfg.seeds.iter().flat_map(|&s| r.modes.iter().map(move |&m| (s, m))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(seed, mode)| -> Result<SimulateRun> {
            let rc = ReducedConfig {
                consts,
                mode,
                steps: r.steps,
                eta1: r.eta1,
                eta2: r.eta2,
                switch_step: r.switch_step,
                batch: r.batch,
                sigma_scale: r.sigma_scale,
                noise_const: r.noise_const,
                noise_const_v: r.noise_const_v,
            };
            let name = match mode {
                ReducedMode::Sgd => "sgd",
                ReducedMode::Prox => "prox",
            };
            let csv = format!("reduced_{name}_seed{seed}.csv");
            let init = ReducedState { alpha_v: r.init_alpha, alpha_a: r.init_alpha, ..ReducedState::origin() };
            let traj = reduced_noise_simulate(&rc, init, &mut RngSeed::new(seed).stream("reduced"));
            let (final_state, error, rows) = match traj {
                Ok(t) => {
                    let rows: Vec<ReducedRow> = t
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % r.log_every.max(1) == 0 || *i + 1 == t.len())
                        .map(|(i, s)| ReducedRow::new(i, r.switch_step, s, &consts))
                        .collect();
                    (t.last().copied(), None, rows)
                }
                Err(e) => (None, Some(e.to_string()), Vec::new()),
            };
            write_csv(&dir.join(&csv), &rows)?;
            Ok(SimulateRun { seed, mode, csv, final_state, error })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = SimulateSummary { consts, runs };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Enumerates every configured instance and writes the identity report.
/// Fails with a formula mismatch when any discrepancy exceeds the tolerance.
pub fn cmd_oracle_check(cfg: &ExperimentConfig, dir: &Path) -> Result<MomentReport> {
    let oc = cfg.oracle.as_ref().ok_or_else(|| ScbError::Config("oracle-check needs an [oracle] section".into()))?;
    let budget = EnumBudget { max_outcomes: oc.max_outcomes };
    let seed = RngSeed::new(oc.seed);
    let mut report = MomentReport::default();
    for inst in &oc.instances {
        for i in 0..inst.count {
            let s = seed.child(&format!("n{}-t{}-{i}", inst.n, inst.t));
            let q = 1 + i % inst.t.min(2);
            let gt = generate_structural_task(Dims::new(inst.t, inst.n, q, 2.0)?, s.child("task"))?;
            budget.check(&gt)?;
            let params = random_feasible_params(&gt, oc.param_scale, &mut s.stream("params"));
            report.merge(&exact_moment_checks(&gt, &params, &budget)?);
        }
    }
    write_json(&dir.join(ORACLE_REPORT_FILE), &report.max_abs_diff)?;
    if !report.passes(oc.tolerance) {
        let (lemma, diff) = report
            .max_abs_diff
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.clone(), *v))
            .unwrap_or_default();
        return Err(ScbError::FormulaMismatch { lemma, diff });
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxRun {
    pub seed: u64,
    pub csv: String,
    pub final_loss_linear: f64,
    pub final_loss_softmax: f64,
    pub cos_linear: f64,
    pub cos_softmax: f64,
    pub optimal_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxSummary {
    pub runs: Vec<SoftmaxRun>,
}

/// Paired linear and softmax training for every seed.
pub fn cmd_softmax_compare(cfg: &ExperimentConfig, dir: &Path) -> Result<SoftmaxSummary> {
    let sc = cfg.softmax.as_ref().ok_or_else(|| ScbError::Config("softmax-compare needs a [softmax] section".into()))?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<SoftmaxRun> {
            let gt = cfg.task.load(&cfg.base_dir, seed)?;
            let (eta_a, eta_v) = cfg.rates.split(sc.eta_linear, &gt);
            let stage = StageConfig {
                eta_a,
                eta_v,
                lambda: sc.lambda_linear,
                batch_size: sc.batch_size,
                stop: StopRule::FixedSteps { steps: sc.steps },
            };
            let out = run_softmax_compare(&gt, sc, &stage, cfg.rule, RngSeed::new(seed).child("softmax"))?;
            let csv = format!("softmax_compare_seed{seed}.csv");
            write_csv(&dir.join(&csv), &out.rows)?;
            Ok(SoftmaxRun {
                seed,
                csv,
                final_loss_linear: out.final_loss_linear,
                final_loss_softmax: out.final_loss_softmax,
                cos_linear: out.cos_linear,
                cos_softmax: out.cos_softmax,
                optimal_loss: out.optimal_loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = SoftmaxSummary { runs };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Stage 1 once, then both continuations from the same state: the proximal
/// pipeline and vanilla SGD at `eta`. Useful for paired comparisons without
/// repeating the signal-boosting stage.
pub fn branch_after_stage1(
    cfg: &ExperimentConfig,
    gt: &GroundTruth,
    seed: u64,
    sgd_etas: &[f64],
) -> Result<(RunOutput, Vec<Result<RunOutput>>)> {
    let schedule = cfg.schedule.build(&cfg.rates, gt);
    let trainer = trainer_for(cfg, gt, seed, GradSource::Minibatch, 0)?;
    let mut state = TrainState::new(ModelParams::init(gt));
    let s1 = trainer.run_stage(&mut state, &schedule.stage1, 1, &mut Vec::new())?;
    let sgd = sgd_etas
        .iter()
        .map(|&eta| {
            let phase = cfg.schedule.stage2_at(eta, 0.0, &cfg.rates, gt);
            continue_vanilla_sgd(&trainer, &[phase], state.clone(), &mut Vec::new(), vec![s1])
        })
        .collect();
    let prox = run_from_stage2(&trainer, &schedule, state, &mut Vec::new(), vec![s1])?;
    Ok((prox, sgd))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
mode = "prox"
seeds = [0, 1]
[task]
t = 20
n = 3
q = 2
[schedule]
batch_size = 8
stage1_steps = 5
stage2_steps = 5
"#;

    #[test]
    fn defaults_fill_the_schedule() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.schedule.eta1, 0.01);
        assert_eq!(cfg.schedule.lambda, 1e-5);
        assert_eq!(cfg.schedule.lambda0, Cutoff::SignalScaled { c: 0.5 });
        assert_eq!(cfg.rule, StepRule::default());
        assert_eq!(cfg.rates.convention, RateConvention::Normalized);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{BASE}\nbogus = 1\n");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(ScbError::Config(_))));
    }

    #[test]
    fn missing_sections_are_rejected() {
        let bad = BASE.replace("mode = \"prox\"", "mode = \"transfer\"");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn rate_conventions() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        let gt = cfg.task.load(Path::new("."), 0).unwrap();
        let c = gt.constants();
        let raw = RateConfig { convention: RateConvention::Raw, scale: 10.0 };
        assert_eq!(raw.split(0.01, &gt), (0.1, 0.1));
        let norm = RateConfig::default();
        let (a, v) = norm.split(0.01, &gt);
        assert!((a - 0.01 / c.k_p).abs() < 1e-15 && (v - 0.01 / c.k_q).abs() < 1e-15);
    }

    #[test]
    fn signal_stop_when_no_fixed_length() {
        let text = BASE.replace("stage1_steps = 5\n", "");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let gt = cfg.task.load(Path::new("."), 0).unwrap();
        let s = cfg.schedule.stage1(&cfg.rates, &gt);
        assert_eq!(s.stop, StopRule::SignalThreshold { threshold: 0.5 / 6.0, max_steps: 100_000 });
    }

    #[test]
    fn log_cadence() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.log_every(9_999), 1);
        assert_eq!(cfg.log_every(10_000), 10);
    }

    #[test]
    fn commands_parse() {
        for (s, c) in [("generate", Command::Generate), ("oracle-check", Command::OracleCheck), ("softmax-compare", Command::SoftmaxCompare)] {
            assert_eq!(s.parse::<Command>().unwrap(), c);
        }
        assert!("fit".parse::<Command>().is_err());
    }
}
