//! Three-stage proximal training on minibatches: signal boosting, l1-regularized
//! learning, then rounding and a value refit.

use scb::data::generate_ground_truth;
use scb::population::distances;
use scb::trainer::{
    run_algorithm1, Cutoff, GradSource, NegativePolicy, Schedule, Stage3Mode, StageConfig, StepRule, StopRule, Trainer,
};
use scb::{Dims, ModelParams, RngSeed};

fn main() -> scb::Result<()> {
    let gt = generate_ground_truth(Dims::new(5000, 3, 2, 2.0)?, RngSeed::new(0), 20_000)?;
    let stage = |eta: f64, lambda: f64, steps: usize| StageConfig {
        eta_a: 10.0 * eta,
        eta_v: 10.0 * eta,
        lambda,
        batch_size: 64,
        stop: StopRule::FixedSteps { steps },
    };
    let schedule = Schedule {
        stage1: stage(0.01, 0.0, 400),
        lambda0: Cutoff::SignalScaled { c: 0.5 },
        stage2: stage(0.005, 1e-5, 600),
        stage3_cutoff: Cutoff::SparsityScaled { c: 0.25 },
        stage3: StageConfig { eta_a: 0.0, ..stage(0.005, 0.0, 0) },
        stage3_mode: Stage3Mode::PopulationRefit,
    };
    let mut trainer = Trainer::new(&gt, RngSeed::new(0).child("train"), GradSource::Minibatch)?;
    trainer.rule = StepRule { negative: NegativePolicy::Clip, ..StepRule::default() };
    trainer.log_every = 100;
    let mut rows = Vec::new();
    let out = run_algorithm1(&trainer, &schedule, ModelParams::init(&gt), &mut rows)?;
    for r in &rows {
        println!(
            "step {:>4} stage {}: alpha_V {:.3} alpha_A {:.3} dist_V {:.3} dist_A {:.3}",
            r.step, r.stage, r.alpha_v, r.alpha_a, r.dist_v_mu, r.dist_a_mu
        );
    }
    let (dv, da) = distances(&out.params, &gt);
    println!("final: ||V - P||_mu = {dv:.4}, ||A - Q||_mu = {da:.4}, supports separated: {:?}", out.separated_at_rounding);
    Ok(())
}
