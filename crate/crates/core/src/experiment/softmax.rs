//! Paired training of linear and softmax attention on the same minibatches.

use serde::{Deserialize, Serialize};

use crate::data::{Sample, Sampler};
use crate::error::{Result, ScbError};
use crate::geometry::{GroundTruth, Mat, ModelParams};
use crate::model::{batch_grads, softmax_batch_grads, softmax_loss, SoftmaxModel};
use crate::rng::RngSeed;
use crate::trainer::{StageConfig, StepRule, TrainState, Trainer};
use crate::trainer::GradSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftmaxCompareConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Linear-attention rate before the rate convention is applied.
    pub eta_linear: f64,
    #[serde(default)]
    pub lambda_linear: f64,
    pub eta_softmax_v: f64,
    pub eta_softmax_w: f64,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_steps() -> usize {
    20_000
}
fn default_batch() -> usize {
    64
}
fn default_test_size() -> usize {
    4096
}
fn default_log_every() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub step: usize,
    pub loss_linear: f64,
    pub loss_softmax: f64,
    pub cos_linear: f64,
    pub cos_softmax: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareOutput {
    pub rows: Vec<CompareRow>,
    pub final_loss_linear: f64,
    pub final_loss_softmax: f64,
    pub cos_linear: f64,
    pub cos_softmax: f64,
    /// Held-out loss of the ground-truth parameters.
    pub optimal_loss: f64,
}

/// Frobenius cosine between an attention matrix and the target pattern.
pub fn attention_cosine(a: &Mat, qmat: &Mat) -> f64 {
    a.dot(qmat) / (a.norm() * qmat.norm())
}

fn linear_loss(params: &ModelParams, test: &[Sample]) -> Result<f64> {
    Ok(batch_grads(params, test)?.loss)
}

fn softmax_test_loss(model: &SoftmaxModel, test: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in test {
        total += softmax_loss(model, s)?;
    }
    Ok(total / test.len() as f64)
}

/// Trains both models for `cfg.steps` steps on identical minibatches and logs
/// held-out losses and attention similarity every `cfg.log_every` steps.
/// `linear` carries the linear model's rates after the rate convention.
pub fn run_softmax_compare(
    gt: &GroundTruth,
    cfg: &SoftmaxCompareConfig,
    linear: &StageConfig,
    rule: StepRule,
    seed: RngSeed,
) -> Result<CompareOutput> {
    if cfg.batch_size == 0 || cfg.test_size == 0 {
        return Err(ScbError::Parameter("batch and test sizes must be positive".into()));
    }
    let sampler = Sampler::new(gt)?;
    let test: Vec<Sample> = {
        let key = seed.key("held-out");
        sampler.batch(key, 0, cfg.test_size)
    };
    let mut trainer = Trainer::new(gt, seed, GradSource::Minibatch)?;
    trainer.rule = rule;
    let batch_key = seed.key("minibatch");
    let stage = StageConfig { batch_size: cfg.batch_size, ..*linear };
    let mut lin = TrainState::new(ModelParams::init(gt));
    let mut soft = SoftmaxModel::init(&gt.mu, gt.t());
    let mut rows = Vec::new();
    let log_every = cfg.log_every.max(1);
    let record = |step: usize, lin: &TrainState, soft: &SoftmaxModel, rows: &mut Vec<CompareRow>| -> Result<()> {
        rows.push(CompareRow {
            step,
            loss_linear: linear_loss(&lin.params, &test)?,
            loss_softmax: softmax_test_loss(soft, &test)?,
            cos_linear: attention_cosine(&lin.params.a, &gt.qmat),
            cos_softmax: attention_cosine(&soft.attention(), &gt.qmat),
        });
        Ok(())
    };
    record(0, &lin, &soft, &mut rows)?;
    for step in 0..cfg.steps {
        trainer.step(&mut lin, &stage)?;
        let batch = sampler.batch(batch_key, step as u64, cfg.batch_size);
        let (g_v, g_w, _) = softmax_batch_grads(&soft, &batch)?;
        soft.v -= g_v * cfg.eta_softmax_v;
        soft.w -= g_w * cfg.eta_softmax_w;
        if !(soft.v.iter().chain(soft.w.iter()).all(|x| x.is_finite())) {
            return Err(ScbError::Divergence { step: step + 1, norm: f64::INFINITY });
        }
        if (step + 1) % log_every == 0 || step + 1 == cfg.steps {
            record(step + 1, &lin, &soft, &mut rows)?;
        }
    }
    let last = rows.last().expect("at least the initial row").clone();
    Ok(CompareOutput {
        rows,
        final_loss_linear: last.loss_linear,
        final_loss_softmax: last.loss_softmax,
        cos_linear: last.cos_linear,
        cos_softmax: last.cos_softmax,
        optimal_loss: linear_loss(&ModelParams::ground_truth(gt), &test)?,
    })
}
