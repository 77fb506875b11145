//! Train linear and softmax attention side by side on the same minibatches.

use scb::data::generate_ground_truth;
use scb::experiment::softmax::{run_softmax_compare, SoftmaxCompareConfig};
use scb::trainer::{StageConfig, StepRule, StopRule};
use scb::{Dims, RngSeed};

fn main() -> scb::Result<()> {
    let gt = generate_ground_truth(Dims::new(50, 10, 2, 2.0)?, RngSeed::new(0), 20_000)?;
    let cfg = SoftmaxCompareConfig {
        steps: 10_000,
        batch_size: 64,
        eta_linear: 0.05,
        lambda_linear: 0.0,
        eta_softmax_v: 0.5,
        eta_softmax_w: 5.0,
        test_size: 2048,
        log_every: 2000,
    };
    let linear = StageConfig {
        eta_a: 0.05,
        eta_v: 0.05,
        lambda: 0.0,
        batch_size: 64,
        stop: StopRule::FixedSteps { steps: cfg.steps },
    };
    let out = run_softmax_compare(&gt, &cfg, &linear, StepRule::default(), RngSeed::new(1))?;
    for r in &out.rows {
        println!(
            "step {:>5}: loss linear {:.4} softmax {:.4}; cosine to Q linear {:.3} softmax {:.3}",
            r.step, r.loss_linear, r.loss_softmax, r.cos_linear, r.cos_softmax
        );
    }
    println!("ground-truth loss {:.4}", out.optimal_loss);
    Ok(())
}
