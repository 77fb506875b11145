//! Generate a sparse contextual bigram task, print its constants and draw a
//! few samples.

use scb::data::{generate_ground_truth, sample_batch};
use scb::{Dims, RngSeed};

fn main() -> scb::Result<()> {
    let dims = Dims::new(200, 4, 2, 2.0)?;
    let gt = generate_ground_truth(dims, RngSeed::new(7), 20_000)?;
    let c = gt.constants();
    println!("mu = {:.4}", gt.mu.transpose());
    println!("K_P = {:.4}, K_Q = {:.4}, ||mu||^2 = {:.4}", c.k_p, c.k_q, c.mu_norm_sq);
    for k in 0..gt.n() {
        println!("token {k} attends to positions {:?}", gt.support(k));
    }
    let samples = sample_batch(&gt, 3, &mut RngSeed::new(7).stream("samples"))?;
    for s in &samples {
        println!("last token {}, label {}, first tokens {:?}", s.x_last, s.x_out, &s.x[..8]);
    }
    let json = gt.to_json()?;
    println!("ground truth serializes to {} bytes of JSON", json.len());
    Ok(())
}
