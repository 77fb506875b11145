//! Skip signal boosting by starting from a correlated pretrained transition.

use scb::data::generate_ground_truth;
use scb::population::distances;
use scb::transfer::{gen_pretrained, run_transfer_pipeline, TransferConfig};
use scb::trainer::{Cutoff, GradSource, NegativePolicy, Schedule, Stage3Mode, StageConfig, StepRule, StopRule, Trainer};
use scb::{Dims, RngSeed};

fn main() -> scb::Result<()> {
    let gt = generate_ground_truth(Dims::new(1000, 3, 2, 2.0)?, RngSeed::new(4), 20_000)?;
    let pretrained = gen_pretrained(&gt, 1.0, &mut RngSeed::new(4).stream("pretrained"))?;
    println!("pretrained correlation {:.3}", pretrained.correlation(&gt));
    let stage = |eta_a: f64, steps: usize| StageConfig {
        eta_a,
        eta_v: 0.05,
        lambda: 1e-5,
        batch_size: 64,
        stop: StopRule::FixedSteps { steps },
    };
    let schedule = Schedule {
        stage1: stage(0.0, 0),
        lambda0: Cutoff::SignalScaled { c: 0.5 },
        stage2: stage(0.05, 600),
        stage3_cutoff: Cutoff::SparsityScaled { c: 0.25 },
        stage3: StageConfig { eta_a: 0.0, lambda: 0.0, ..stage(0.0, 0) },
        stage3_mode: Stage3Mode::PopulationRefit,
    };
    let mut trainer = Trainer::new(&gt, RngSeed::new(5), GradSource::Minibatch)?;
    trainer.rule = StepRule { negative: NegativePolicy::Clip, ..StepRule::default() };
    let cfg = TransferConfig::default();
    let out = run_transfer_pipeline(&trainer, &pretrained, &cfg, &schedule, &mut Vec::new())?;
    let f = &out.first_step;
    println!("first step: alpha_V {:.3}, alpha_A {:.3}, ratio {:.3}, threshold {:.2e}", f.alpha_v, f.alpha_a, f.ratio, f.threshold);
    let (dv, da) = distances(&out.run.params, &gt);
    println!("final: ||V - P||_mu = {dv:.4}, ||A - Q||_mu = {da:.4}");
    Ok(())
}
