//! Update rules, inter-stage rounding and the three-stage training loop.
//!
//! Every step evaluates both gradients at the current `(V, A)` on one shared
//! minibatch, then updates `V` with the preconditioned gradient and `A` with
//! a preconditioned gradient step, soft-thresholding and a column-sum
//! projection.

use std::io::Write;
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Sampler;
use crate::error::{Result, ScbError};
use crate::geometry::{GroundTruth, Mat, ModelParams, Vector};
use crate::model::{batch_grads_with, precondition_v, GradPair};
use crate::population::{decompose, distances, expected_raw_grads, population_loss, population_v_refit};
use crate::rng::{sample_stream, RngSeed};

/// `max |V_ij|` above which a run is declared divergent.
pub const DIVERGENCE_BOUND: f64 = 1e3;
/// Steps between exact re-projections onto the constraint set.
pub const REPROJECT_EVERY: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopRule {
    FixedSteps { steps: usize },
    /// Stop once `max(alpha_V, alpha_A) >= threshold`, or after `max_steps`.
    SignalThreshold { threshold: f64, max_steps: usize },
}

impl StopRule {
    pub fn max_steps(&self) -> usize {
        match *self {
            StopRule::FixedSteps { steps } => steps,
            StopRule::SignalThreshold { max_steps, .. } => max_steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub eta_a: f64,
    pub eta_v: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub stop: StopRule,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_a >= 0.0 && self.eta_v >= 0.0 && self.lambda >= 0.0) {
            return Err(ScbError::Parameter("rates and lambda must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(ScbError::Parameter("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Threshold that is either fixed or proportional to the current signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cutoff {
    Absolute { value: f64 },
    /// `c * alpha_V / Q` at the moment the cutoff is applied.
    SignalScaled { c: f64 },
    /// `c / Q`.
    SparsityScaled { c: f64 },
}

impl Cutoff {
    pub fn resolve(&self, alpha_v: f64, q: usize) -> f64 {
        match *self {
            Cutoff::Absolute { value } => value,
            Cutoff::SignalScaled { c } => c * alpha_v / q as f64,
            Cutoff::SparsityScaled { c } => c / q as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage3Mode {
    /// Train `V` alone with the stage-3 rates.
    #[default]
    Train,
    /// Replace `V` by the population least-squares solution for the rounded `A`.
    PopulationRefit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub stage1: StageConfig,
    pub lambda0: Cutoff,
    pub stage2: StageConfig,
    pub stage3_cutoff: Cutoff,
    pub stage3: StageConfig,
    #[serde(default)]
    pub stage3_mode: Stage3Mode,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        for s in [&self.stage1, &self.stage2, &self.stage3] {
            s.validate()?;
        }
        if self.stage3.eta_a != 0.0 || self.stage3.lambda != 0.0 {
            return Err(ScbError::Parameter("stage 3 must have eta_A = 0 and lambda = 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradSource {
    Minibatch,
    Population,
    /// Population gradient plus i.i.d. Gaussian entries of std `sigma / sqrt(B)`
    /// added to the raw gradients.
    PopulationNoise { sigma: f64 },
}

/// What happens to entries that fall below `-lambda` in the proximal step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    /// Shrink toward zero by `lambda`.
    #[default]
    Symmetric,
    /// Set to zero.
    Clip,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    /// Centering, `1/mu` rescaling and the `mu`-projection.
    #[default]
    Full,
    /// Only the projections needed to keep the constraints; no `1/mu` weighting.
    ProjectOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepRule {
    /// Center each attention gradient column before the proximal step.
    pub center_a: bool,
    pub negative: NegativePolicy,
    pub precond: Preconditioner,
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule { center_a: true, negative: NegativePolicy::Symmetric, precond: Preconditioner::Full }
    }
}

/// Soft-thresholds `x` in place; returns how many entries were below `-lambda`.
pub fn soft_threshold(x: &mut [f64], lambda: f64, policy: NegativePolicy) -> usize {
    let mut below = 0;
    for v in x.iter_mut() {
        if *v >= lambda {
            *v -= lambda;
        } else if *v >= -lambda {
            *v = 0.0;
        } else {
            below += 1;
            *v = match policy {
                NegativePolicy::Symmetric => *v + lambda,
                NegativePolicy::Clip => 0.0,
            };
        }
    }
    below
}

/// `V - eta_V G`.
pub fn step_v(v: &Mat, g_pre: &Mat, eta_v: f64) -> Mat {
    v - g_pre * eta_v
}

/// Gradient step, soft-threshold at `lambda`, then restore unit column sums
/// by adding `(1 - 1^T a) / T` to every entry. With `lambda = 0` the
/// threshold is skipped under the symmetric policy; under `Clip` negative
/// entries are still zeroed. Returns the new matrix and the number of entries
/// that fell below `-lambda`.
pub fn step_a_proximal(a: &Mat, g_step: &Mat, eta_a: f64, lambda: f64, policy: NegativePolicy) -> (Mat, usize) {
    let mut next = a - g_step * eta_a;
    let t = a.nrows() as f64;
    let mut below = 0;
    for mut col in next.column_iter_mut() {
        if lambda > 0.0 || policy == NegativePolicy::Clip {
            below += soft_threshold(col.as_mut_slice(), lambda, policy);
        }
        let shift = (1.0 - col.sum()) / t;
        col.add_scalar_mut(shift);
    }
    (next, below)
}

/// Keep entries `>= lambda0`, zero the rest, then add `(1 - 1^T b) / T`.
pub fn thresholding_projection(a: &Mat, lambda0: f64) -> Mat {
    let t = a.nrows() as f64;
    let mut out = a.map(|v| if v >= lambda0 { v } else { 0.0 });
    for mut col in out.column_iter_mut() {
        let shift = (1.0 - col.sum()) / t;
        col.add_scalar_mut(shift);
    }
    out
}

/// Keep entries `>= cutoff` and renormalize each column to sum to one.
pub fn thresholding_normalization(a: &Mat, cutoff: f64) -> Result<Mat> {
    let mut out = a.map(|v| if v >= cutoff { v } else { 0.0 });
    for (k, mut col) in out.column_iter_mut().enumerate() {
        let s = col.sum();
        if !(s > 0.0) {
            return Err(ScbError::Rounding { column: k, cutoff });
        }
        col /= s;
    }
    Ok(out)
}

/// Project back onto `1^T V = 1^T`, `V mu = mu`, `1^T A = 1^T`.
pub fn reproject(params: &mut ModelParams, mu: &Vector) {
    let n = mu.len();
    let base = crate::geometry::trivial_transition(mu);
    let offset = &params.v - &base;
    // `precondition_v` of `M diag(mu)` is exactly the two-sided projection of `M`.
    let proj = precondition_v(&(offset * Mat::from_diagonal(mu)), mu).expect("positive mu");
    params.v = base + proj;
    debug_assert_eq!(params.v.ncols(), n);
    let t = params.a.nrows() as f64;
    for mut col in params.a.column_iter_mut() {
        let shift = (1.0 - col.sum()) / t;
        col.add_scalar_mut(shift);
    }
}

/// Largest `|a_t|` outside the target support, over all columns.
pub fn off_support_max(a: &Mat, gt: &GroundTruth) -> f64 {
    let mut m: f64 = 0.0;
    for k in 0..a.ncols() {
        for t in 0..a.nrows() {
            if gt.qmat[(t, k)] == 0.0 {
                m = m.max(a[(t, k)].abs());
            }
        }
    }
    m
}

/// Whether every on-support entry exceeds every off-support entry, per column.
pub fn supports_separated(a: &Mat, gt: &GroundTruth) -> bool {
    (0..a.ncols()).all(|k| {
        let mut on = f64::INFINITY;
        let mut off = f64::NEG_INFINITY;
        for t in 0..a.nrows() {
            if gt.qmat[(t, k)] != 0.0 {
                on = on.min(a[(t, k)]);
            } else {
                off = off.max(a[(t, k)]);
            }
        }
        off < on
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub step: usize,
    /// Entries that fell below `-lambda` in a proximal step.
    pub negative_hits: usize,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        TrainState { params, step: 0, negative_hits: 0 }
    }
}

pub const TRAJECTORY_HEADER: [&str; 10] = [
    "step",
    "stage",
    "loss_est",
    "alpha_V",
    "alpha_A",
    "delta_V_mu",
    "delta_A_mu",
    "dist_V_mu",
    "dist_A_mu",
    "off_support_max",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajRow {
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
    /// Distances after rounding `A` and refitting `V`; not part of the CSV.
    #[serde(skip)]
    pub post_norm: Option<(f64, f64)>,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

pub fn write_trajectory_csv<W: Write>(rows: &[TrajRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(TRAJECTORY_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Result of one step, exposed for instrumentation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    /// Preconditioned `V` gradient and the attention step direction before
    /// thresholding.
    pub direction: GradPair,
    /// `-(A_next - A) / eta_A`, or the attention direction when `eta_A = 0`.
    pub effective_a: Mat,
    pub loss: f64,
}

/// Training context: the task, the sampler and the seeded streams.
pub struct Trainer<'g> {
    gt: &'g GroundTruth,
    sampler: Sampler,
    batch_key: u64,
    noise_seed: RngSeed,
    pub source: GradSource,
    pub rule: StepRule,
    pub log_every: usize,
    /// If set, rows also carry distances after rounding at this cutoff
    /// (resolved with the row's `alpha_V`) and refitting `V`.
    pub post_norm_cutoff: Option<Cutoff>,
    started: Instant,
}

impl<'g> Trainer<'g> {
    pub fn new(gt: &'g GroundTruth, seed: RngSeed, source: GradSource) -> Result<Self> {
        Ok(Trainer {
            gt,
            sampler: Sampler::new(gt)?,
            batch_key: seed.key("minibatch"),
            noise_seed: seed.child("gradient-noise"),
            source,
            rule: StepRule::default(),
            log_every: 1,
            post_norm_cutoff: None,
            started: Instant::now(),
        })
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        self.gt
    }

    /// Raw (unpreconditioned) mean gradient and loss estimate at `params`.
    pub fn raw_gradients(&self, params: &ModelParams, step: usize, batch: usize) -> Result<(GradPair, f64)> {
        match self.source {
            GradSource::Minibatch => {
                let key = self.batch_key;
                let b = batch_grads_with(params, batch, |i| {
                    self.sampler.sample(&mut sample_stream(key, step as u64, i as u64))
                })?;
                Ok((b.raw, b.loss))
            }
            GradSource::Population => Ok((expected_raw_grads(params, self.gt), population_loss(params, self.gt))),
            GradSource::PopulationNoise { sigma } => {
                let mut g = expected_raw_grads(params, self.gt);
                let sd = sigma / (batch as f64).sqrt();
                if sd > 0.0 {
                    let normal = Normal::new(0.0, sd).map_err(|e| ScbError::Parameter(e.to_string()))?;
                    let mut rng = self.noise_seed.indexed("step", step as u64);
                    g.v.iter_mut().chain(g.a.iter_mut()).for_each(|x| *x += normal.sample(&mut rng));
                }
                Ok((g, population_loss(params, self.gt)))
            }
        }
    }

    /// Step directions for `V` and `A` from a raw gradient.
    pub fn directions(&self, raw: &GradPair, rule: &StepRule) -> Result<GradPair> {
        let mu = &self.gt.mu;
        let (v, mut a) = match rule.precond {
            Preconditioner::Full => {
                let mut a = raw.a.clone();
                for (k, mut col) in a.column_iter_mut().enumerate() {
                    col /= mu[k];
                }
                (precondition_v(&raw.v, mu)?, a)
            }
            Preconditioner::ProjectOnly => {
                (precondition_v(&(&raw.v * Mat::from_diagonal(mu)), mu)?, raw.a.clone())
            }
        };
        if rule.center_a {
            let t = a.nrows() as f64;
            for mut col in a.column_iter_mut() {
                let mean = col.sum() / t;
                col.add_scalar_mut(-mean);
            }
        }
        Ok(GradPair { v, a })
    }

    /// One simultaneous update of `(V, A)`.
    pub fn step(&self, state: &mut TrainState, cfg: &StageConfig) -> Result<StepInfo> {
        self.step_with(state, cfg, &self.rule)
    }

    fn step_with(&self, state: &mut TrainState, cfg: &StageConfig, rule: &StepRule) -> Result<StepInfo> {
        let (raw, loss) = self.raw_gradients(&state.params, state.step, cfg.batch_size)?;
        let direction = self.directions(&raw, rule)?;
        let v = step_v(&state.params.v, &direction.v, cfg.eta_v);
        let effective_a = if cfg.eta_a > 0.0 {
            let (a, below) = step_a_proximal(&state.params.a, &direction.a, cfg.eta_a, cfg.lambda, rule.negative);
            state.negative_hits += below;
            let eff = (&state.params.a - &a) / cfg.eta_a;
            state.params.a = a;
            eff
        } else {
            direction.a.clone()
        };
        state.params.v = v;
        state.step += 1;
        if state.step % REPROJECT_EVERY == 0 {
            reproject(&mut state.params, &self.gt.mu);
        }
        let norm = state.params.v.amax();
        if !(norm <= DIVERGENCE_BOUND) || !state.params.a.iter().all(|x| x.is_finite()) {
            return Err(ScbError::Divergence { step: state.step, norm });
        }
        Ok(StepInfo { direction, effective_a, loss })
    }

    pub fn row(&self, params: &ModelParams, step: usize, stage: u8, loss_est: f64) -> Result<TrajRow> {
        let d = decompose(params, self.gt)?;
        let (dist_v_mu, dist_a_mu) = distances(params, self.gt);
        let post_norm = match self.post_norm_cutoff {
            Some(c) => normalized_distances(params, self.gt, c.resolve(d.proj.alpha_v, self.gt.dims.q)).ok(),
            None => None,
        };
        Ok(TrajRow {
            step,
            stage,
            loss_est,
            alpha_v: d.proj.alpha_v,
            alpha_a: d.proj.alpha_a,
            delta_v_mu: d.proj.delta_v_mu(),
            delta_a_mu: d.proj.delta_a_mu(),
            dist_v_mu,
            dist_a_mu,
            off_support_max: off_support_max(&params.a, self.gt),
            post_norm,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Runs one stage until its stop rule fires. Rows are appended every
    /// `log_every` steps and at the end of the stage.
    pub fn run_stage(&self, state: &mut TrainState, cfg: &StageConfig, stage: u8, rows: &mut Vec<TrajRow>) -> Result<StageSummary> {
        self.run_stage_with(state, cfg, stage, rows, &self.rule)
    }

    fn run_stage_with(
        &self,
        state: &mut TrainState,
        cfg: &StageConfig,
        stage: u8,
        rows: &mut Vec<TrajRow>,
        rule: &StepRule,
    ) -> Result<StageSummary> {
        cfg.validate()?;
        let max = cfg.stop.max_steps();
        let start = state.step;
        let mut last_loss = f64::NAN;
        let mut reached = matches!(cfg.stop, StopRule::FixedSteps { .. });
        for i in 0..max {
            if let StopRule::SignalThreshold { threshold, .. } = cfg.stop {
                let p = decompose(&state.params, self.gt)?.proj;
                if p.alpha_v.max(p.alpha_a) >= threshold {
                    reached = true;
                    break;
                }
            }
            let info = self.step_with(state, cfg, rule)?;
            last_loss = info.loss;
            if (i + 1) % self.log_every.max(1) == 0 || i + 1 == max {
                rows.push(self.row(&state.params, state.step, stage, last_loss)?);
            }
        }
        if let StopRule::SignalThreshold { threshold, .. } = cfg.stop {
            if !reached {
                let p = decompose(&state.params, self.gt)?.proj;
                reached = p.alpha_v.max(p.alpha_a) >= threshold;
            }
        }
        if rows.last().map(|r| r.step) != Some(state.step) && state.step > start {
            rows.push(self.row(&state.params, state.step, stage, last_loss)?);
        }
        Ok(StageSummary { stage, steps: state.step - start, reached })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u8,
    pub steps: usize,
    /// Whether the stop rule's target was met (always true for fixed steps).
    pub reached: bool,
}

/// Rounds `A` at `cutoff`, refits `V` on the population loss and returns
/// `(||V - P||_mu, ||A - Q||_mu)`.
pub fn normalized_distances(params: &ModelParams, gt: &GroundTruth, cutoff: f64) -> Result<(f64, f64)> {
    let p = normalize_and_refit(params, gt, cutoff)?;
    Ok(distances(&p, gt))
}

pub fn normalize_and_refit(params: &ModelParams, gt: &GroundTruth, cutoff: f64) -> Result<ModelParams> {
    let a = thresholding_normalization(&params.a, cutoff)?;
    let v = population_v_refit(&a, gt)?;
    Ok(ModelParams { v, a })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub params: ModelParams,
    pub stages: Vec<StageSummary>,
    pub negative_hits: usize,
    /// Support separation observed right before the thresholding projection.
    pub separated_at_rounding: Option<bool>,
    /// Cutoff actually used by the thresholding projection.
    pub lambda0_used: Option<f64>,
}

/// Thresholding projection, Stage 2, thresholding normalization and Stage 3,
/// starting from `state`.
pub fn run_from_stage2(
    trainer: &Trainer,
    schedule: &Schedule,
    mut state: TrainState,
    rows: &mut Vec<TrajRow>,
    stages: Vec<StageSummary>,
) -> Result<RunOutput> {
    schedule.validate()?;
    let gt = trainer.ground_truth();
    let proj = decompose(&state.params, gt)?.proj;
    let separated = supports_separated(&state.params.a, gt);
    let lambda0 = schedule.lambda0.resolve(proj.alpha_v, gt.dims.q);
    state.params.a = thresholding_projection(&state.params.a, lambda0);
    finish_from_stage2(trainer, schedule, state, rows, stages, Some(separated), Some(lambda0))
}

/// Stage 2, thresholding normalization and Stage 3.
pub fn finish_from_stage2(
    trainer: &Trainer,
    schedule: &Schedule,
    mut state: TrainState,
    rows: &mut Vec<TrajRow>,
    mut stages: Vec<StageSummary>,
    separated_at_rounding: Option<bool>,
    lambda0_used: Option<f64>,
) -> Result<RunOutput> {
    schedule.validate()?;
    let gt = trainer.ground_truth();
    rows.push(trainer.row(&state.params, state.step, 2, f64::NAN)?);
    stages.push(trainer.run_stage(&mut state, &schedule.stage2, 2, rows)?);
    let proj = decompose(&state.params, gt)?.proj;
    let cutoff = schedule.stage3_cutoff.resolve(proj.alpha_v, gt.dims.q);
    state.params.a = thresholding_normalization(&state.params.a, cutoff)?;
    match schedule.stage3_mode {
        Stage3Mode::Train => {
            rows.push(trainer.row(&state.params, state.step, 3, f64::NAN)?);
            stages.push(trainer.run_stage(&mut state, &schedule.stage3, 3, rows)?);
        }
        Stage3Mode::PopulationRefit => {
            state.params.v = population_v_refit(&state.params.a, gt)?;
            rows.push(trainer.row(&state.params, state.step, 3, population_loss(&state.params, gt))?);
            stages.push(StageSummary { stage: 3, steps: 0, reached: true });
        }
    }
    Ok(RunOutput {
        params: state.params,
        stages,
        negative_hits: state.negative_hits,
        separated_at_rounding,
        lambda0_used,
    })
}

/// The full three-stage algorithm from `init`. Trajectory rows are appended
/// to `rows` as they are produced, so they survive a failed run.
pub fn run_algorithm1(trainer: &Trainer, schedule: &Schedule, init: ModelParams, rows: &mut Vec<TrajRow>) -> Result<RunOutput> {
    schedule.validate()?;
    let mut state = TrainState::new(init);
    rows.push(trainer.row(&state.params, 0, 1, f64::NAN)?);
    let s1 = trainer.run_stage(&mut state, &schedule.stage1, 1, rows)?;
    run_from_stage2(trainer, schedule, state, rows, vec![s1])
}

/// Baseline: the same loop with `lambda = 0`, no clipping and no rounding,
/// over the given phases. The trainer's preconditioner choice is kept.
pub fn run_vanilla_sgd(trainer: &Trainer, phases: &[StageConfig], init: ModelParams, rows: &mut Vec<TrajRow>) -> Result<RunOutput> {
    let state = TrainState::new(init);
    rows.push(trainer.row(&state.params, 0, 1, f64::NAN)?);
    continue_vanilla_sgd(trainer, phases, state, rows, Vec::new())
}

pub fn continue_vanilla_sgd(
    trainer: &Trainer,
    phases: &[StageConfig],
    mut state: TrainState,
    rows: &mut Vec<TrajRow>,
    mut stages: Vec<StageSummary>,
) -> Result<RunOutput> {
    let rule = StepRule { negative: NegativePolicy::Symmetric, ..trainer.rule };
    let first = stages.len();
    for (i, cfg) in phases.iter().enumerate() {
        let cfg = StageConfig { lambda: 0.0, ..*cfg };
        let stage = (first + i + 1).min(u8::MAX as usize) as u8;
        stages.push(trainer.run_stage_with(&mut state, &cfg, stage, rows, &rule)?);
    }
    Ok(RunOutput {
        params: state.params,
        stages,
        negative_hits: state.negative_hits,
        separated_at_rounding: None,
        lambda0_used: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_ground_truth;
    use crate::geometry::Dims;
    use crate::oracle::random_feasible_params;
    use crate::population::{expected_grads, project};
    use rand::Rng;

    fn gt(t: usize, seed: u64) -> GroundTruth {
        generate_ground_truth(Dims::new(t, 3, 2, 2.0).unwrap(), RngSeed::new(seed), 20_000).unwrap()
    }

    fn fixed(eta_a: f64, eta_v: f64, lambda: f64, batch: usize, steps: usize) -> StageConfig {
        StageConfig { eta_a, eta_v, lambda, batch_size: batch, stop: StopRule::FixedSteps { steps } }
    }

    #[test]
    fn soft_threshold_cases() {
        let lam = 0.1;
        let mut x = [0.5, 0.05, -0.05, 0.1, -0.3];
        let below = soft_threshold(&mut x, lam, NegativePolicy::Symmetric);
        assert_eq!(below, 1);
        let want = [0.4, 0.0, 0.0, 0.0, -0.2];
        for (a, b) in x.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut y = [-0.3];
        soft_threshold(&mut y, lam, NegativePolicy::Clip);
        assert_eq!(y, [0.0]);
    }

    #[test]
    fn soft_threshold_is_monotone_nonexpansive_and_shrinking() {
        let mut rng = RngSeed::new(1).stream("t");
        for _ in 0..1000 {
            let (x, y): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let lam = rng.random_range(0.0..0.3);
            let (mut fx, mut fy) = ([x], [y]);
            soft_threshold(&mut fx, lam, NegativePolicy::Symmetric);
            soft_threshold(&mut fy, lam, NegativePolicy::Symmetric);
            assert!((fx[0] - fy[0]) * (x - y) >= 0.0);
            assert!((fx[0] - fy[0]).abs() <= (x - y).abs() + 1e-15);
            assert!(fx[0].abs() <= x.abs());
        }
    }

    #[test]
    fn hand_evaluated_proximal_step() {
        let t = 4;
        let lam = 0.01;
        let a = Mat::from_column_slice(t, 1, &[0.5, lam / 2.0, lam / 2.0, 0.0]);
        let (next, below) = step_a_proximal(&a, &Mat::zeros(t, 1), 1.0, lam, NegativePolicy::Symmetric);
        assert_eq!(below, 0);
        let add = (1.0 - 0.5 + lam) / t as f64;
        let want = [0.5 - lam + add, add, add, add];
        for (i, w) in want.iter().enumerate() {
            assert!((next[(i, 0)] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lambda_step_is_projected_gradient_descent() {
        let g = gt(6, 2);
        let mut rng = RngSeed::new(2).stream("t");
        let p = random_feasible_params(&g, 0.3, &mut rng);
        let grad = Mat::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let centered = crate::model::precondition_a(&grad, &Vector::from_element(3, 1.0)).unwrap();
        let (next, _) = step_a_proximal(&p.a, &centered, 0.3, 0.0, NegativePolicy::Symmetric);
        assert!((next - (&p.a - &centered * 0.3)).amax() < 1e-15);
    }

    #[test]
    fn thresholding_projection_cases() {
        let a = Mat::from_element(5, 2, 0.2);
        let out = thresholding_projection(&a, 0.5);
        assert!((out - Mat::from_element(5, 2, 0.2)).amax() < 1e-15);
        // alpha q + (1 - alpha)/T with the support kept.
        let (t, alpha) = (10, 0.6);
        let mut q = Mat::zeros(t, 1);
        q[(2, 0)] = 0.7;
        q[(5, 0)] = 0.3;
        let col = &q * alpha + Mat::from_element(t, 1, (1.0 - alpha) / t as f64);
        let out = thresholding_projection(&col, 0.1);
        assert!((out.sum() - 1.0).abs() < 1e-15);
        let kept = alpha * 0.7 + (1.0 - alpha) / t as f64 + alpha * 0.3 + (1.0 - alpha) / t as f64;
        let add = (1.0 - kept) / t as f64;
        assert!((out[(0, 0)] - add).abs() < 1e-15);
        assert!((out[(2, 0)] - (col[(2, 0)] + add)).abs() < 1e-15);
    }

    #[test]
    fn thresholding_normalization_cases() {
        let g = gt(8, 3);
        let out = thresholding_normalization(&g.qmat, 0.1).unwrap();
        assert!((out - &g.qmat).amax() < 1e-15);
        let uniform = Mat::from_element(8, 3, 1.0 / 8.0);
        assert!(matches!(thresholding_normalization(&uniform, 0.2), Err(ScbError::Rounding { column: 0, .. })));
    }

    #[test]
    fn normalization_error_is_within_the_rounding_bound() {
        let g = gt(50, 4);
        let mut rng = RngSeed::new(4).stream("t");
        let noise = Mat::from_fn(50, 3, |_, _| rng.random_range(0.0..0.02));
        let a = &g.qmat * 0.95 + noise;
        let out = thresholding_normalization(&a, 0.1).unwrap();
        let mut delta = a.clone();
        for (k, mut col) in delta.column_iter_mut().enumerate() {
            for t in 0..50 {
                if g.qmat[(t, k)] != 0.0 {
                    col[t] = 0.0;
                }
            }
        }
        let eps = 0.05;
        let bound = 4.0 * (eps + delta.amax() * 2.0);
        for k in 0..3 {
            assert!((out.column(k) - g.qmat.column(k)).norm() <= bound);
        }
    }

    #[test]
    fn random_steps_preserve_constraints() {
        let g = gt(7, 5);
        let trainer = Trainer::new(&g, RngSeed::new(5), GradSource::Minibatch).unwrap();
        let mut rng = RngSeed::new(5).stream("params");
        let mut state = TrainState::new(random_feasible_params(&g, 0.3, &mut rng));
        for i in 0..200 {
            let cfg = fixed(rng.random_range(0.0..0.2), rng.random_range(0.0..0.2), [0.0, 0.01][i % 2], 8, 1);
            trainer.step(&mut state, &cfg).unwrap();
            assert!(state.params.residuals(&g.mu).max() < 1e-9);
        }
    }

    #[test]
    fn zero_rates_leave_params_unchanged() {
        let g = gt(6, 6);
        let trainer = Trainer::new(&g, RngSeed::new(6), GradSource::Minibatch).unwrap();
        let init = ModelParams::init(&g);
        let mut state = TrainState::new(init.clone());
        let mut rows = Vec::new();
        let s = trainer.run_stage(&mut state, &fixed(0.0, 0.0, 0.0, 4, 25), 1, &mut rows).unwrap();
        assert_eq!(s.steps, 25);
        assert_eq!(state.params, init);
        assert_eq!(rows.len(), 25);
    }

    #[test]
    fn population_step_at_init_moves_along_the_transition() {
        let g = gt(10, 7);
        let trainer = Trainer::new(&g, RngSeed::new(7), GradSource::Population).unwrap();
        let mut state = TrainState::new(ModelParams::init(&g));
        trainer.step(&mut state, &fixed(0.0, 0.5, 0.0, 1, 1)).unwrap();
        let base = crate::geometry::trivial_transition(&g.mu);
        let want = &base + (&g.p - &base) * (0.5 / 10.0);
        assert!((state.params.v - want).amax() < 1e-15);
    }

    #[test]
    fn update_is_linear_in_the_rate_without_threshold() {
        let g = gt(6, 8);
        let trainer = Trainer::new(&g, RngSeed::new(8), GradSource::Minibatch).unwrap();
        let init = random_feasible_params(&g, 0.2, &mut RngSeed::new(8).stream("p"));
        let (raw, _) = trainer.raw_gradients(&init, 0, 16).unwrap();
        let d = trainer.directions(&raw, &trainer.rule).unwrap();
        let half = step_v(&step_v(&init.v, &d.v, 0.05), &d.v, 0.05);
        assert!((half - step_v(&init.v, &d.v, 0.1)).amax() < 1e-15);
    }

    #[test]
    fn effective_update_reproduces_the_step() {
        let g = gt(6, 9);
        let trainer = Trainer::new(&g, RngSeed::new(9), GradSource::Minibatch).unwrap();
        let mut state = TrainState::new(ModelParams::init(&g));
        let before = state.params.a.clone();
        let info = trainer.step(&mut state, &fixed(0.2, 0.1, 0.01, 16, 1)).unwrap();
        assert!((&before - &info.effective_a * 0.2 - &state.params.a).amax() < 1e-15);
    }

    #[test]
    fn population_run_stays_on_the_line() {
        let g = gt(30, 10);
        let trainer = Trainer::new(&g, RngSeed::new(10), GradSource::Population).unwrap();
        let c = g.constants();
        let mut state = TrainState::new(ModelParams::init(&g));
        let mut rows = Vec::new();
        let cfg = fixed(0.1 / c.k_p, 0.1 / c.k_q, 0.0, 1, 300);
        trainer.run_stage(&mut state, &cfg, 1, &mut rows).unwrap();
        assert!(rows.iter().all(|r| r.delta_v_mu < 1e-9 && r.delta_a_mu < 1e-9));
        let p = project(&state.params, &g).unwrap();
        assert!(p.alpha_v > 0.5);
    }

    #[test]
    fn signal_threshold_stops_early() {
        let g = gt(30, 11);
        let trainer = Trainer::new(&g, RngSeed::new(11), GradSource::Population).unwrap();
        let c = g.constants();
        let mut state = TrainState::new(ModelParams::init(&g));
        let cfg = StageConfig {
            eta_a: 0.1 / c.k_p,
            eta_v: 0.1 / c.k_q,
            lambda: 0.0,
            batch_size: 1,
            stop: StopRule::SignalThreshold { threshold: 0.2, max_steps: 10_000 },
        };
        let s = trainer.run_stage(&mut state, &cfg, 1, &mut Vec::new()).unwrap();
        assert!(s.reached && s.steps < 10_000);
        let p = project(&state.params, &g).unwrap();
        assert!(p.alpha_v.max(p.alpha_a) >= 0.2);
    }

    #[test]
    fn divergence_is_reported() {
        let g = gt(6, 12);
        let trainer = Trainer::new(&g, RngSeed::new(12), GradSource::Minibatch).unwrap();
        let mut state = TrainState::new(random_feasible_params(&g, 0.5, &mut RngSeed::new(1).stream("p")));
        let err = trainer
            .run_stage(&mut state, &fixed(500.0, 500.0, 0.0, 4, 200), 1, &mut Vec::new())
            .unwrap_err();
        assert!(matches!(err, ScbError::Divergence { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn population_algorithm_recovers_the_task() {
        let g = gt(60, 13);
        let trainer = Trainer::new(&g, RngSeed::new(13), GradSource::Population).unwrap();
        let c = g.constants();
        let eta = 0.2;
        let stage = |steps| fixed(eta / c.k_p, eta / c.k_q, 0.0, 1, steps);
        let schedule = Schedule {
            stage1: StageConfig {
                stop: StopRule::SignalThreshold { threshold: 0.5 / 6.0, max_steps: 100_000 },
                ..stage(0)
            },
            lambda0: Cutoff::SignalScaled { c: 0.5 },
            stage2: StageConfig { lambda: 1e-6, ..stage(3000) },
            stage3_cutoff: Cutoff::SparsityScaled { c: 0.25 },
            stage3: StageConfig { eta_a: 0.0, ..stage(3000) },
            stage3_mode: Stage3Mode::Train,
        };
        let out = run_algorithm1(&trainer, &schedule, ModelParams::init(&g), &mut Vec::new()).unwrap();
        let (dv, da) = distances(&out.params, &g);
        assert!(dv * dv <= 1e-4 && da * da <= 1e-4, "{dv} {da}");
        assert_eq!(out.separated_at_rounding, Some(true));
    }

    #[test]
    fn zero_rates_pass_through_the_roundings() {
        let g = gt(6, 14);
        let trainer = Trainer::new(&g, RngSeed::new(14), GradSource::Minibatch).unwrap();
        let z = fixed(0.0, 0.0, 0.0, 2, 3);
        let schedule = Schedule {
            stage1: z,
            lambda0: Cutoff::Absolute { value: 0.5 },
            stage2: z,
            stage3_cutoff: Cutoff::Absolute { value: 0.01 },
            stage3: z,
            stage3_mode: Stage3Mode::Train,
        };
        let out = run_algorithm1(&trainer, &schedule, ModelParams::init(&g), &mut Vec::new()).unwrap();
        let init = ModelParams::init(&g);
        assert!((out.params.v - init.v).amax() < 1e-15 && (out.params.a - init.a).amax() < 1e-15);
    }

    #[test]
    fn vanilla_zero_lambda_matches_proximal_reduction() {
        let g = gt(6, 15);
        let trainer = Trainer::new(&g, RngSeed::new(15), GradSource::Minibatch).unwrap();
        let cfg = fixed(0.1, 0.1, 0.0, 8, 20);
        let sgd = run_vanilla_sgd(&trainer, &[cfg], ModelParams::init(&g), &mut Vec::new()).unwrap();
        let mut state = TrainState::new(ModelParams::init(&g));
        trainer.run_stage(&mut state, &cfg, 1, &mut Vec::new()).unwrap();
        assert_eq!(sgd.params, state.params);
    }

    #[test]
    fn expected_gradient_surrogate_is_zero_at_truth() {
        let g = gt(6, 16);
        let e = expected_grads(&ModelParams::ground_truth(&g), &g);
        assert!(e.v.amax() < 1e-14);
    }

    #[test]
    fn trajectory_csv_has_the_documented_header() {
        let row = TrajRow {
            step: 1,
            stage: 2,
            loss_est: 0.5,
            alpha_v: 0.1,
            alpha_a: 0.2,
            delta_v_mu: 0.0,
            delta_a_mu: 0.0,
            dist_v_mu: 1.0,
            dist_a_mu: 1.0,
            off_support_max: 0.0,
            post_norm: None,
            wall_clock_s: 0.0,
        };
        let mut buf = Vec::new();
        write_trajectory_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRAJECTORY_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "1,2,0.5,0.1,0.2,0.0,0.0,1.0,1.0,0.0");
    }
}
