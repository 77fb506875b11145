//! One shared signal-boosting stage, then proximal training next to vanilla
//! SGD at two rates.

use scb::experiment::{branch_after_stage1, ExperimentConfig};
use scb::population::distances;

const CONFIG: &str = r#"
[task]
t = 1000
n = 3
q = 2
seed = 3
[rates]
convention = "raw"
scale = 10.0
[schedule]
stage1_steps = 400
stage2_steps = 600
stage3_mode = "population_refit"
[rule]
negative = "clip"
"#;

fn main() -> scb::Result<()> {
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    let gt = cfg.task.load(".".as_ref(), 0)?;
    let etas = [cfg.schedule.eta2, cfg.schedule.eta2_small];
    let (prox, sgd) = branch_after_stage1(&cfg, &gt, 1003, &etas)?;
    println!("prox (rounded, refit): ||A - Q||_mu = {:.4}", distances(&prox.params, &gt).1);
    for (eta, run) in etas.iter().zip(sgd) {
        match run {
            Ok(r) => println!("sgd eta {eta}: ||A - Q||_mu = {:.4}", distances(&r.params, &gt).1),
            Err(e) => println!("sgd eta {eta}: {e}"),
        }
    }
    Ok(())
}
