//! Compare closed-form moments and expected gradients with exhaustive
//! enumeration on a tiny task.

use scb::data::generate_structural_task;
use scb::oracle::{exact_moment_checks, random_feasible_params, EnumBudget, MOMENT_TOL};
use scb::{Dims, RngSeed};

fn main() -> scb::Result<()> {
    let gt = generate_structural_task(Dims::new(4, 3, 2, 2.0)?, RngSeed::new(1))?;
    let budget = EnumBudget::default();
    println!("enumerating {} outcomes", budget.check(&gt)?);
    let params = random_feasible_params(&gt, 0.3, &mut RngSeed::new(2).stream("params"));
    let report = exact_moment_checks(&gt, &params, &budget)?;
    for (identity, diff) in &report.max_abs_diff {
        println!("{identity:>36}: {diff:.2e}");
    }
    println!("all within {MOMENT_TOL:e}: {}", report.passes(MOMENT_TOL));
    Ok(())
}
