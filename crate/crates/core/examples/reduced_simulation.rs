//! Evolve only the four projection scalars, with Gaussian surrogates for the
//! minibatch noise, under plain SGD and under proximal steps.

use scb::population::{reduced_noise_simulate, ReducedConfig, ReducedConsts, ReducedMode, ReducedState};
use scb::RngSeed;

fn main() -> scb::Result<()> {
    for mode in [ReducedMode::Sgd, ReducedMode::Prox] {
        let cfg = ReducedConfig {
            consts: ReducedConsts::typical(100_000, 100, 2),
            mode,
            steps: 2000,
            eta1: 0.01,
            eta2: 0.005,
            switch_step: 1000,
            batch: 64,
            sigma_scale: 1.0,
            noise_const: 1e-9,
            noise_const_v: 1e-9,
        };
        let init = ReducedState { alpha_v: 0.01, alpha_a: 0.01, ..ReducedState::origin() };
        let traj = reduced_noise_simulate(&cfg, init, &mut RngSeed::new(0).stream("reduced"))?;
        for (step, s) in traj.iter().enumerate().step_by(500) {
            println!(
                "{mode:?} step {step:>4}: alpha_V {:.3} alpha_A {:.3} |Delta_A| {:.2e}",
                s.alpha_v,
                s.alpha_a,
                s.delta_a_sq.sqrt()
            );
        }
    }
    Ok(())
}
