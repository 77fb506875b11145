//! Task generation and sampling of sparse contextual bigram data.
//!
//! A data point is `T` context tokens and a query token drawn i.i.d. from the
//! stationary distribution `mu`, plus an output token produced by picking a
//! position `s ~ q^(query)` and taking one step of the chain `P` from `x_s`.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScbError};
use crate::geometry::{Dims, GroundTruth, Mat, Vector};
use crate::rng::{sample_stream, RngSeed};

/// One data point: context `x`, query token `x_last` and label `x_out`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<usize>,
    #[serde(rename = "k")]
    pub x_last: usize,
    #[serde(rename = "o")]
    pub x_out: usize,
}

impl Sample {
    pub fn check(&self, t: usize, n: usize) -> Result<()> {
        if self.x.len() != t {
            return Err(ScbError::dim("sample length", t, self.x.len()));
        }
        if self.x_last >= n || self.x_out >= n || self.x.iter().any(|&v| v >= n) {
            return Err(ScbError::Parameter(format!("token index outside [0, {n})")));
        }
        Ok(())
    }
}

/// Power iteration for the fixed point of `v -> P v`.
///
/// Two starts (uniform and `e_0`) must converge to the same vector; chains
/// whose fixed point is not unique, or that oscillate, are reported as
/// convergence errors.
pub fn stationary_dist(p: &Mat, tol: f64, max_iters: usize) -> Result<Vector> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(ScbError::dim("stationary_dist", "square", format!("{:?}", p.shape())));
    }
    let run = |mut v: Vector| -> Result<Vector> {
        for _ in 0..max_iters {
            let next = p * &v;
            let resid = (&next - &v).amax();
            v = next;
            if resid <= tol {
                let s = v.sum();
                return Ok(v / s);
            }
        }
        Err(ScbError::Convergence(format!(
            "no fixed point within {max_iters} iterations (reducible or periodic chain?)"
        )))
    };
    let a = run(Vector::from_element(n, 1.0 / n as f64))?;
    let mut e0 = Vector::zeros(n);
    e0[0] = 1.0;
    let b = run(e0)?;
    if (&a - &b).amax() > 1e3 * tol.max(1e-15) {
        return Err(ScbError::Convergence(
            "stationary distribution is not unique".into(),
        ));
    }
    Ok(a)
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R, conc: f64, len: usize) -> Vec<f64> {
    let gamma = Gamma::new(conc, 1.0).expect("positive concentration");
    loop {
        let mut w: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
        let s: f64 = w.iter().sum();
        if s > 0.0 && s.is_finite() {
            w.iter_mut().for_each(|x| *x /= s);
            return w;
        }
    }
}

/// Symmetrized Metropolis-Hastings chain with uniform target and proposal `P`.
/// It is doubly stochastic, so mixing it into `P` pulls `mu` toward uniform.
fn metropolis_uniform(p: &Mat) -> Mat {
    let n = p.nrows();
    let mut m = Mat::zeros(n, n);
    for j in 0..n {
        let mut off = 0.0;
        for i in 0..n {
            if i != j {
                m[(i, j)] = p[(i, j)].min(p[(j, i)]);
                off += m[(i, j)];
            }
        }
        m[(j, j)] = 1.0 - off;
    }
    m
}

/// Metropolis-Hastings kernel with target `mu` and symmetric proposal
/// `proposal` (columns are proposal distributions). Fixes `mu` exactly.
pub fn metropolis_kernel(mu: &Vector, proposal: &Mat) -> Mat {
    let n = mu.len();
    let mut m = Mat::zeros(n, n);
    for j in 0..n {
        let mut off = 0.0;
        for i in 0..n {
            if i != j && mu[j] > 0.0 {
                m[(i, j)] = proposal[(i, j)] * (mu[i] / mu[j]).min(1.0);
                off += m[(i, j)];
            }
        }
        m[(j, j)] = 1.0 - off;
    }
    m
}

const STATIONARY_TOL: f64 = 1e-14;
const STATIONARY_ITERS: usize = 200_000;

/// Draws a random column-stochastic `P` with its stationary `mu` such that
/// `mu` is `C`-conditioned and `||P||_mu^2 - ||mu||^2 >= ||mu||^2`.
///
/// Columns come from a symmetric Dirichlet(1). After a third of the budget,
/// candidates are mixed with a uniform-target Metropolis chain, and after half
/// the column concentration drops so that larger vocabularies still produce
/// peaked transitions.
pub fn gen_transition(n: usize, c: f64, max_tries: usize, seed: RngSeed) -> Result<(Mat, Vector)> {
    if n < 2 {
        return Err(ScbError::Parameter("N must be at least 2".into()));
    }
    if !(c >= 1.0) {
        return Err(ScbError::Parameter(format!("C = {c} must be >= 1")));
    }
    let mut rng = seed.stream("ground-truth/transition");
    let mut failures: HashMap<&'static str, usize> = HashMap::new();
    let (lo, hi) = (1.0 / (c * n as f64), c / n as f64);
    for attempt in 0..max_tries {
        let conc = if attempt < max_tries / 2 { 1.0 } else { (2.0 / n as f64).min(1.0) };
        let mut p = Mat::zeros(n, n);
        for j in 0..n {
            let col = dirichlet(&mut rng, conc, n);
            p.set_column(j, &Vector::from_vec(col));
        }
        if attempt >= max_tries / 3 {
            let w = [0.25, 0.5, 0.75, 1.0][attempt % 4];
            p = &p * (1.0 - w) + metropolis_uniform(&p) * w;
        }
        let mu = match stationary_dist(&p, STATIONARY_TOL, STATIONARY_ITERS) {
            Ok(mu) => mu,
            Err(_) => {
                *failures.entry("stationary convergence").or_default() += 1;
                continue;
            }
        };
        if mu.iter().any(|&m| m < lo || m > hi) {
            *failures.entry("mu conditioning").or_default() += 1;
            continue;
        }
        let mu_sq = mu.norm_squared();
        let k_p = crate::geometry::weighted_norm_sq(&p, &mu) - mu_sq;
        if k_p < mu_sq {
            *failures.entry("nontrivial transition").or_default() += 1;
            continue;
        }
        return Ok((p, mu));
    }
    let constraint = failures
        .into_iter()
        .max_by_key(|&(name, count)| (count, name))
        .map(|(name, _)| name.to_string())
        .unwrap_or_else(|| "none attempted".into());
    Err(ScbError::Generation { constraint, tries: max_tries })
}

/// Attention targets: every column has exactly `Q` nonzeros at uniformly
/// chosen positions with Dirichlet(5) weights inside `[1/(CQ), C/Q]`.
pub fn gen_attention_targets(t: usize, n: usize, q: usize, c: f64, seed: RngSeed) -> Result<Mat> {
    if !(c >= 1.0) {
        return Err(ScbError::Parameter(format!("C = {c} must be >= 1")));
    }
    if q == 0 || q > t {
        return Err(ScbError::Parameter(format!("Q = {q} must lie in [1, T = {t}]")));
    }
    let mut rng = seed.stream("ground-truth/attention");
    let (lo, hi) = (1.0 / (c * q as f64), c / q as f64);
    let mut qmat = Mat::zeros(t, n);
    for k in 0..n {
        let positions = index::sample(&mut rng, t, q).into_vec();
        let weights = if q == 1 || c == 1.0 {
            vec![1.0 / q as f64; q]
        } else {
            let mut accepted = None;
            for _ in 0..100_000 {
                let w = dirichlet(&mut rng, 5.0, q);
                if w.iter().all(|&v| v >= lo && v <= hi) {
                    accepted = Some(w);
                    break;
                }
            }
            accepted.ok_or(ScbError::Generation {
                constraint: "attention weight conditioning".into(),
                tries: 100_000,
            })?
        };
        for (&pos, &w) in positions.iter().zip(&weights) {
            qmat[(pos, k)] = w;
        }
    }
    Ok(qmat)
}

/// Full task from one seed. Prints nothing; callers decide how to report the
/// long-sequence condition (see [`Dims::long_sequence_ok`]).
pub fn generate_ground_truth(dims: Dims, seed: RngSeed, max_tries: usize) -> Result<GroundTruth> {
    dims.validate()?;
    let (p, mu) = gen_transition(dims.n, dims.c, max_tries, seed)?;
    let qmat = gen_attention_targets(dims.t, dims.n, dims.q, dims.c, seed)?;
    GroundTruth::new(dims, p, mu, qmat)
}

/// Task that is only structurally valid: a Dirichlet(1) chain with its
/// stationary distribution and conditioned attention targets, without the
/// conditioning or nontrivial-transition requirements on `P`. With `N = 2`
/// no aperiodic irreducible chain satisfies the nontrivial-transition bound,
/// so exact-enumeration checks at that size use this.
pub fn generate_structural_task(dims: Dims, seed: RngSeed) -> Result<GroundTruth> {
    dims.validate()?;
    let mut rng = seed.stream("ground-truth/transition");
    let n = dims.n;
    for _ in 0..1000 {
        let mut p = Mat::zeros(n, n);
        for j in 0..n {
            p.set_column(j, &Vector::from_vec(dirichlet(&mut rng, 1.0, n)));
        }
        let Ok(mu) = stationary_dist(&p, STATIONARY_TOL, STATIONARY_ITERS) else {
            continue;
        };
        let qmat = gen_attention_targets(dims.t, n, dims.q, dims.c, seed)?;
        let gt = GroundTruth::from_parts_unchecked(dims, p, mu, qmat);
        gt.validate_structure()?;
        return Ok(gt);
    }
    Err(ScbError::Generation { constraint: "stationary convergence".into(), tries: 1000 })
}

/// Conditional law of the label given the context and query token:
/// `p_n = sum_t q^(k)_t P[n, x_t]`.
pub fn label_distribution(gt: &GroundTruth, x: &[usize], k: usize) -> Vector {
    let mut p = Vector::zeros(gt.n());
    for (t, &w) in gt.qmat.column(k).iter().enumerate() {
        if w != 0.0 {
            p += gt.p.column(x[t]) * w;
        }
    }
    p
}

/// Precomputed alias tables for fast sampling from a fixed task.
#[derive(Clone, Debug)]
pub struct Sampler {
    t: usize,
    tokens: WeightedAliasIndex<f64>,
    transitions: Vec<WeightedAliasIndex<f64>>,
    positions: Vec<(Vec<usize>, WeightedAliasIndex<f64>)>,
}

impl Sampler {
    pub fn new(gt: &GroundTruth) -> Result<Self> {
        let alias = |w: Vec<f64>| {
            WeightedAliasIndex::new(w).map_err(|e| ScbError::Parameter(format!("alias table: {e}")))
        };
        let tokens = alias(gt.mu.iter().map(|&m| m.max(0.0)).collect())?;
        let transitions = gt
            .p
            .column_iter()
            .map(|c| alias(c.iter().map(|&v| v.max(0.0)).collect()))
            .collect::<Result<Vec<_>>>()?;
        let positions = (0..gt.n())
            .map(|k| {
                let support = gt.support(k);
                let w = support.iter().map(|&t| gt.qmat[(t, k)].max(0.0)).collect();
                Ok((support, alias(w)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sampler { t: gt.t(), tokens, transitions, positions })
    }

    /// Draws one point: position first, then one chain step from the token there.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let x: Vec<usize> = (0..self.t).map(|_| self.tokens.sample(rng)).collect();
        let x_last = self.tokens.sample(rng);
        let (support, weights) = &self.positions[x_last];
        let s = support[weights.sample(rng)];
        let x_out = self.transitions[x[s]].sample(rng);
        Sample { x, x_last, x_out }
    }

    /// Label only, for a fixed context and query.
    pub fn sample_label<R: Rng + ?Sized>(&self, x: &[usize], k: usize, rng: &mut R) -> usize {
        let (support, weights) = &self.positions[k];
        let s = support[weights.sample(rng)];
        self.transitions[x[s]].sample(rng)
    }

    /// Minibatch for `step`: sample `i` is drawn from its own stream derived
    /// from `(key, step, i)`, so the result does not depend on thread count.
    pub fn batch(&self, key: u64, step: u64, size: usize) -> Vec<Sample> {
        (0..size as u64)
            .into_par_iter()
            .map(|i| self.sample(&mut sample_stream(key, step, i)))
            .collect()
    }
}

pub fn sample_instance<R: Rng + ?Sized>(gt: &GroundTruth, rng: &mut R) -> Result<Sample> {
    Ok(Sampler::new(gt)?.sample(rng))
}

pub fn sample_batch<R: Rng + ?Sized>(gt: &GroundTruth, size: usize, rng: &mut R) -> Result<Vec<Sample>> {
    let sampler = Sampler::new(gt)?;
    Ok((0..size).map(|_| sampler.sample(rng)).collect())
}

/// One JSON object per line: `{"x": [...], "k": .., "o": ..}`.
pub fn write_jsonl<W: Write>(samples: &[Sample], mut out: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::task_constants;

    #[test]
    fn symmetric_chain_has_uniform_stationary() {
        let p = Mat::from_element(2, 2, 0.5);
        let mu = stationary_dist(&p, 1e-14, 1000).unwrap();
        assert!((mu[0] - 0.5).abs() < 1e-15 && (mu[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_chain_is_not_unique() {
        let p = Mat::identity(2, 2);
        assert!(matches!(stationary_dist(&p, 1e-12, 1000), Err(ScbError::Convergence(_))));
    }

    #[test]
    fn periodic_chain_does_not_converge() {
        let p = Mat::from_column_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(stationary_dist(&p, 1e-12, 1000), Err(ScbError::Convergence(_))));
    }

    #[test]
    fn sticky_two_state_chain_fails_nontrivial_transition() {
        // ||P||_mu^2 = 0.82 so K_P = 0.32 < ||mu||^2 = 0.5.
        let p = Mat::from_column_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]);
        let mu = stationary_dist(&p, 1e-14, 10_000).unwrap();
        let mut q = Mat::zeros(2, 2);
        q[(0, 0)] = 1.0;
        q[(1, 1)] = 1.0;
        let gt = GroundTruth::from_parts_unchecked(Dims { t: 2, n: 2, q: 1, c: 2.0 }, p, mu, q);
        let tc = gt.constants();
        assert!((tc.k_p - 0.32).abs() < 1e-12);
        assert!(task_constants(&gt).is_err());
        assert!(gt.validate().is_err());
    }

    #[test]
    fn generated_transition_passes_validation() {
        let (p, mu) = gen_transition(3, 2.0, 10_000, RngSeed::new(1)).unwrap();
        let q = gen_attention_targets(4, 3, 1, 2.0, RngSeed::new(1)).unwrap();
        GroundTruth::new(Dims { t: 4, n: 3, q: 1, c: 2.0 }, p, mu, q).unwrap();
    }

    #[test]
    fn nearly_unconditioned_two_state_generation_fails() {
        let err = gen_transition(2, 1.0001, 2000, RngSeed::new(0)).unwrap_err();
        assert!(matches!(err, ScbError::Generation { .. }), "{err}");
    }

    #[test]
    fn single_sparse_target_is_a_basis_vector() {
        let q = gen_attention_targets(10, 4, 1, 2.0, RngSeed::new(3)).unwrap();
        for col in q.column_iter() {
            assert_eq!(col.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(col.sum(), 1.0);
        }
    }

    #[test]
    fn two_sparse_targets_respect_bounds() {
        let q = gen_attention_targets(50, 5, 2, 2.0, RngSeed::new(4)).unwrap();
        for col in q.column_iter() {
            let nz: Vec<f64> = col.iter().copied().filter(|&v| v != 0.0).collect();
            assert_eq!(nz.len(), 2);
            assert!(nz.iter().all(|&v| (0.25..=1.0).contains(&v)));
            assert!((col.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_conditioning_constant_is_rejected() {
        assert!(matches!(
            gen_attention_targets(5, 2, 2, 0.5, RngSeed::new(0)),
            Err(ScbError::Parameter(_))
        ));
    }

    #[test]
    fn label_distribution_with_single_position() {
        let (p, mu) = gen_transition(3, 2.0, 10_000, RngSeed::new(9)).unwrap();
        let mut q = Mat::zeros(4, 3);
        for k in 0..3 {
            q[(0, k)] = 1.0;
        }
        let gt = GroundTruth::from_parts_unchecked(Dims { t: 4, n: 3, q: 1, c: 2.0 }, p, mu, q);
        let x = [2, 0, 1, 1];
        let d = label_distribution(&gt, &x, 1);
        assert!((&d - gt.p.column(2)).amax() < 1e-15);
    }

    #[test]
    fn uniform_attention_on_constant_context_gives_transition_column() {
        let (p, mu) = gen_transition(3, 2.0, 10_000, RngSeed::new(9)).unwrap();
        let q = Mat::from_element(5, 3, 0.2);
        let gt = GroundTruth::from_parts_unchecked(Dims { t: 5, n: 3, q: 5, c: 2.0 }, p, mu, q);
        let d = label_distribution(&gt, &[1; 5], 0);
        assert!((&d - gt.p.column(1)).amax() < 1e-15);
        assert!((d.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_mu_gives_constant_tokens() {
        let p = Mat::from_column_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let mu = Vector::from_vec(vec![1.0, 0.0]);
        let mut q = Mat::zeros(3, 2);
        q[(1, 0)] = 1.0;
        q[(1, 1)] = 1.0;
        let gt = GroundTruth::from_parts_unchecked(Dims { t: 3, n: 2, q: 1, c: 2.0 }, p, mu, q);
        let mut rng = RngSeed::new(0).stream("data");
        for s in sample_batch(&gt, 50, &mut rng).unwrap() {
            assert!(s.x.iter().all(|&v| v == 0));
            assert_eq!((s.x_last, s.x_out), (0, 0));
        }
    }

    #[test]
    fn batches_replay_and_ignore_thread_count() {
        let gt = generate_ground_truth(Dims::new(20, 3, 2, 2.0).unwrap(), RngSeed::new(5), 10_000).unwrap();
        let s = Sampler::new(&gt).unwrap();
        let a = s.batch(77, 3, 40);
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| s.batch(77, 3, 40));
        assert_eq!(a, b);
        assert_ne!(a, s.batch(77, 4, 40));
    }

    #[test]
    fn jsonl_export_uses_short_keys() {
        let s = Sample { x: vec![0, 1], x_last: 1, x_out: 0 };
        let mut buf = Vec::new();
        write_jsonl(&[s], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "{\"x\":[0,1],\"k\":1,\"o\":0}\n");
    }
}
