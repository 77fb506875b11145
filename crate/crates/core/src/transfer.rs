//! Transfer learning: start `V` from a correlated pretrained transition,
//! replace Stage 1 with one large step on `A`, then continue from Stage 2.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::metropolis_kernel;
use crate::error::{Result, ScbError};
use crate::geometry::{trivial_transition, uniform_attention, weighted_dot, weighted_norm_sq, GroundTruth, Mat, ModelParams, CONSTRAINT_TOL};
use crate::population::project;
use crate::trainer::{finish_from_stage2, thresholding_projection, RunOutput, Schedule, TrainState, Trainer, TrajRow};

pub const PRETRAINED_ROLE: &str = "pretrained";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    /// Mixing weight of the pretrained transition in `V_0`.
    pub theta: f64,
    /// Weight of the downstream `P` in the generated pretrained transition.
    pub gamma: f64,
    /// Target relative accuracy of the first step.
    pub eps_tmp: f64,
    pub first_step_batch: usize,
    /// Constant `c` in the first-step threshold `c * theta / (N K_P)`.
    pub threshold_const: f64,
    /// Rate of the first step, in units of `1 / K_P`.
    #[serde(default = "one")]
    pub first_step_eta: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig { theta: 0.3, gamma: 1.0, eps_tmp: 0.1, first_step_batch: 5000, threshold_const: 0.2, first_step_eta: 1.0 }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(ScbError::Parameter(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ScbError::Parameter(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.eps_tmp > 0.0 && self.threshold_const > 0.0 && self.first_step_eta > 0.0) || self.first_step_batch == 0 {
            return Err(ScbError::Parameter("eps_tmp, threshold_const, first_step_eta and first_step_batch must be positive".into()));
        }
        Ok(())
    }

    /// `c * theta / (N K_P)`, floored at `2 / T`.
    pub fn threshold(&self, gt: &GroundTruth) -> f64 {
        let k_p = gt.constants().k_p;
        (self.threshold_const * self.theta / (gt.n() as f64 * k_p)).max(2.0 / gt.t() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedTask {
    pub p_hat: Mat,
}

impl PretrainedTask {
    /// `<P_hat, P>_mu - ||mu||^2`.
    pub fn correlation(&self, gt: &GroundTruth) -> f64 {
        weighted_dot(&self.p_hat, &gt.p, &gt.mu) - gt.mu.norm_squared()
    }

    /// `||P_hat||_mu^2 / ||P||_mu^2`.
    pub fn norm_ratio(&self, gt: &GroundTruth) -> f64 {
        weighted_norm_sq(&self.p_hat, &gt.mu) / weighted_norm_sq(&gt.p, &gt.mu)
    }

    /// Checks shape, stochasticity, `P_hat mu = mu`, the correlation margin
    /// and the norm ratio.
    pub fn check(&self, gt: &GroundTruth) -> Result<()> {
        let n = gt.n();
        if self.p_hat.shape() != (n, n) {
            return Err(ScbError::dim("pretrained transition", format!("({n}, {n})"), format!("{:?}", self.p_hat.shape())));
        }
        let as_task = self.as_ground_truth(gt);
        as_task.validate_structure()?;
        let fix = (&self.p_hat * &gt.mu - &gt.mu).amax();
        if fix > CONSTRAINT_TOL {
            return Err(ScbError::Validation(format!("pretrained transition moves mu by {fix:e}")));
        }
        let margin = self.correlation(gt);
        let required = gt.mu.norm_squared();
        if margin < required {
            return Err(ScbError::TransferInfeasible { margin, required });
        }
        let ratio = self.norm_ratio(gt);
        if !(0.25..=4.0).contains(&ratio) {
            return Err(ScbError::Validation(format!("pretrained norm ratio {ratio} outside [1/4, 4]")));
        }
        Ok(())
    }

    /// The task with `P` replaced by `P_hat`, for serialization.
    pub fn as_ground_truth(&self, gt: &GroundTruth) -> GroundTruth {
        GroundTruth::from_parts_unchecked(gt.dims, self.p_hat.clone(), gt.mu.clone(), gt.qmat.clone())
    }

    pub fn to_json(&self, gt: &GroundTruth) -> Result<String> {
        self.as_ground_truth(gt).to_json_with_role(Some(PRETRAINED_ROLE))
    }

    /// Reads a pretrained transition written by [`PretrainedTask::to_json`].
    pub fn from_json(s: &str, gt: &GroundTruth) -> Result<Self> {
        let (task, role) = GroundTruth::from_json_with_role(s)?;
        if role.as_deref() != Some(PRETRAINED_ROLE) {
            return Err(ScbError::Validation(format!("expected role \"{PRETRAINED_ROLE}\", found {role:?}")));
        }
        if (&task.mu - &gt.mu).amax() > CONSTRAINT_TOL {
            return Err(ScbError::Validation("pretrained task has a different stationary distribution".into()));
        }
        let p = PretrainedTask { p_hat: task.p };
        p.check(gt)?;
        Ok(p)
    }
}

/// `gamma P + (1 - gamma) R` for a given `R` fixing `mu`.
pub fn pretrained_mixture(gt: &GroundTruth, gamma: f64, r: &Mat) -> Result<PretrainedTask> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(ScbError::Parameter(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let task = PretrainedTask { p_hat: &gt.p * gamma + r * (1.0 - gamma) };
    task.check(gt)?;
    Ok(task)
}

/// Random symmetric proposal with zero-free off-diagonal entries.
fn symmetric_proposal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Mat {
    let mut w = Mat::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = rng.random_range(0.05..1.0);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    let max_col = w.column_iter().map(|c| c.sum()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    w /= max_col;
    for j in 0..n {
        w[(j, j)] = 1.0 - w.column(j).sum();
    }
    w
}

/// `gamma P + (1 - gamma) R` where `R` is a Metropolis-Hastings chain with
/// target `mu` and a random symmetric proposal.
pub fn gen_pretrained<R: Rng + ?Sized>(gt: &GroundTruth, gamma: f64, rng: &mut R) -> Result<PretrainedTask> {
    let r = metropolis_kernel(&gt.mu, &symmetric_proposal(gt.n(), rng));
    pretrained_mixture(gt, gamma, &r)
}

/// `V_0 = theta P_hat + (1 - theta) mu 1^T`, `A_0 = 1 1^T / T`.
pub fn init_transfer(p_hat: &PretrainedTask, gt: &GroundTruth, theta: f64) -> ModelParams {
    let v = &p_hat.p_hat * theta + trivial_transition(&gt.mu) * (1.0 - theta);
    ModelParams { v, a: uniform_attention(gt.t(), gt.n()) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FirstStepReport {
    pub alpha_v: f64,
    pub alpha_a: f64,
    pub ratio: f64,
    pub threshold: f64,
    /// Set when `eps_tmp` exceeds `1 / (N K_P)`.
    pub warnings: Vec<String>,
}

/// One preconditioned step on `A` alone with rate `first_step_eta / K_P`,
/// then thresholding projection at [`TransferConfig::threshold`]. Fails when
/// `alpha_A / alpha_V` leaves `[1 - 5 eps, 1 + 5 eps]`.
pub fn transfer_first_step(trainer: &Trainer, state: &mut TrainState, cfg: &TransferConfig) -> Result<FirstStepReport> {
    cfg.validate()?;
    let gt = trainer.ground_truth();
    let k_p = gt.constants().k_p;
    let mut warnings = Vec::new();
    let eps_cap = 1.0 / (gt.n() as f64 * k_p);
    if cfg.eps_tmp > eps_cap {
        warnings.push(format!("eps_tmp {} exceeds 1/(N K_P) = {eps_cap:.4}", cfg.eps_tmp));
    }
    let (raw, _) = trainer.raw_gradients(&state.params, state.step, cfg.first_step_batch)?;
    let dir = trainer.directions(&raw, &trainer.rule)?;
    let stepped = &state.params.a - &dir.a * (cfg.first_step_eta / k_p);
    let threshold = cfg.threshold(gt);
    state.params.a = thresholding_projection(&stepped, threshold);
    state.step += 1;
    let p = project(&state.params, gt)?;
    let ratio = p.alpha_a / p.alpha_v;
    let (lo, hi) = (1.0 - 5.0 * cfg.eps_tmp, 1.0 + 5.0 * cfg.eps_tmp);
    if !(ratio >= lo && ratio <= hi) {
        return Err(ScbError::FirstStep { ratio, lo, hi });
    }
    Ok(FirstStepReport { alpha_v: p.alpha_v, alpha_a: p.alpha_a, ratio, threshold, warnings })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferOutput {
    pub first_step: FirstStepReport,
    pub run: RunOutput,
}

/// Initialization, first step, Stage 2, thresholding normalization and
/// Stage 3. `schedule.stage1` and `schedule.lambda0` are not used. Rows are
/// appended to `rows` as they are produced.
pub fn run_transfer_pipeline(
    trainer: &Trainer,
    p_hat: &PretrainedTask,
    cfg: &TransferConfig,
    schedule: &Schedule,
    rows: &mut Vec<TrajRow>,
) -> Result<TransferOutput> {
    let gt = trainer.ground_truth();
    p_hat.check(gt)?;
    let mut state = TrainState::new(init_transfer(p_hat, gt, cfg.theta));
    rows.push(trainer.row(&state.params, 0, 1, f64::NAN)?);
    let first_step = transfer_first_step(trainer, &mut state, cfg)?;
    rows.push(trainer.row(&state.params, state.step, 1, f64::NAN)?);
    let run = finish_from_stage2(trainer, schedule, state, rows, Vec::new(), None, None)?;
    Ok(TransferOutput { first_step, run })
}
