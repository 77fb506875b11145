//! Train with exact expected gradients: the iterates stay on the population
//! lines and the projected coordinates follow the scalar recursion.

use scb::data::generate_ground_truth;
use scb::population::{alpha_recursion_step, project};
use scb::trainer::{GradSource, StageConfig, StopRule, TrainState, Trainer};
use scb::{Dims, ModelParams, RngSeed};

fn main() -> scb::Result<()> {
    let gt = generate_ground_truth(Dims::new(500, 3, 2, 2.0)?, RngSeed::new(0), 20_000)?;
    let c = gt.constants();
    let eta = 0.05;
    let trainer = Trainer::new(&gt, RngSeed::new(0), GradSource::Population)?;
    let cfg = StageConfig {
        eta_a: eta / c.k_p,
        eta_v: eta / c.k_q,
        lambda: 0.0,
        batch_size: 1,
        stop: StopRule::FixedSteps { steps: 1 },
    };
    let mut state = TrainState::new(ModelParams::init(&gt));
    let mut alphas = (0.0, 0.0);
    for step in 1..=2000 {
        trainer.step(&mut state, &cfg)?;
        alphas = alpha_recursion_step(alphas, eta, c.k_p, c.k_q, gt.t());
        if step % 250 == 0 {
            let p = project(&state.params, &gt)?;
            println!(
                "step {step:>4}: alpha_V {:.6} (recursion {:.6}), alpha_A {:.6}, |Delta_V| {:.1e}, |Delta_A| {:.1e}",
                p.alpha_v,
                alphas.0,
                p.alpha_a,
                p.delta_v_mu(),
                p.delta_a_mu()
            );
        }
    }
    Ok(())
}
