//! Brute-force enumeration of every `(x, x_last, x_out)` at tiny sizes.
//!
//! Outcome probabilities are rebuilt from the sampling procedure itself
//! (draw a position, then one Markov step from the token there), not from the
//! label-distribution formula, so the two derivations check each other.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Result, ScbError};
use crate::geometry::{trivial_transition, weighted_dot, weighted_norm_sq, GroundTruth, Mat, ModelParams};
use crate::model::{grad_pair, precondition, GradPair};
use crate::population::{expected_grads, expected_raw_grads};

/// Agreement tolerance for probabilities.
pub const PROB_TOL: f64 = 1e-12;
/// Agreement tolerance for moments and gradients.
pub const MOMENT_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumBudget {
    pub max_outcomes: u128,
}

impl Default for EnumBudget {
    fn default() -> Self {
        EnumBudget { max_outcomes: 1_000_000 }
    }
}

impl EnumBudget {
    /// `N^(T+1) * N` outcomes, or an error if that exceeds the cap.
    pub fn check(&self, gt: &GroundTruth) -> Result<u128> {
        let n = gt.n() as u128;
        let needed = (0..=gt.t()).try_fold(n, |acc, _| acc.checked_mul(n)).unwrap_or(u128::MAX);
        if needed > self.max_outcomes {
            return Err(ScbError::Budget { needed, max: self.max_outcomes });
        }
        Ok(needed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub x: Vec<usize>,
    pub k: usize,
    pub out: usize,
    pub prob: f64,
}

/// Calls `f(x, k, out, prob)` for every outcome with `x_1 = first`.
fn for_each_with_first<F: FnMut(&[usize], usize, usize, f64)>(gt: &GroundTruth, first: usize, mut f: F) {
    let (n, t) = (gt.n(), gt.t());
    let mut x = vec![0usize; t];
    x[0] = first;
    loop {
        let px: f64 = x.iter().map(|&m| gt.mu[m]).product();
        for k in 0..n {
            let pk = px * gt.mu[k];
            for out in 0..n {
                let mut cond = 0.0;
                for (s, &tok) in x.iter().enumerate() {
                    cond += gt.qmat[(s, k)] * gt.p[(out, tok)];
                }
                f(&x, k, out, pk * cond);
            }
        }
        // Odometer over positions 1..T.
        let mut pos = 1;
        loop {
            if pos >= t {
                return;
            }
            x[pos] += 1;
            if x[pos] < n {
                break;
            }
            x[pos] = 0;
            pos += 1;
        }
    }
}

pub fn for_each_outcome<F: FnMut(&[usize], usize, usize, f64)>(
    gt: &GroundTruth,
    budget: &EnumBudget,
    mut f: F,
) -> Result<()> {
    budget.check(gt)?;
    if gt.t() == 0 {
        return Err(ScbError::Parameter("empty context".into()));
    }
    for first in 0..gt.n() {
        for_each_with_first(gt, first, &mut f);
    }
    Ok(())
}

pub fn enumerate_outcomes(gt: &GroundTruth, budget: &EnumBudget) -> Result<Vec<Outcome>> {
    let mut all = Vec::new();
    for_each_outcome(gt, budget, |x, k, out, prob| all.push(Outcome { x: x.to_vec(), k, out, prob }))?;
    Ok(all)
}

/// An enumerated value next to its closed form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbCheck {
    pub enumerated: f64,
    pub closed_form: f64,
}

impl ProbCheck {
    pub fn diff(&self) -> f64 {
        (self.enumerated - self.closed_form).abs()
    }

    fn verified(self, lemma: &str) -> Result<Self> {
        if self.diff() > PROB_TOL {
            return Err(ScbError::FormulaMismatch { lemma: lemma.into(), diff: self.diff() });
        }
        Ok(self)
    }
}

fn check_index(gt: &GroundTruth, tokens: &[usize], positions: &[usize]) -> Result<()> {
    if tokens.iter().any(|&v| v >= gt.n()) || positions.iter().any(|&p| p >= gt.t()) {
        return Err(ScbError::Parameter("index out of range".into()));
    }
    Ok(())
}

/// `P(x_out = n, x_t = m | x_last = k)` against
/// `q_t P_{n,m} mu_m + (1 - q_t) mu_n mu_m`.
pub fn exact_joint_prob(gt: &GroundTruth, n: usize, m: usize, t: usize, k: usize, budget: &EnumBudget) -> Result<ProbCheck> {
    check_index(gt, &[n, m, k], &[t])?;
    let mut joint = 0.0;
    let mut given = 0.0;
    for_each_outcome(gt, budget, |x, kk, out, p| {
        if kk == k {
            given += p;
            if out == n && x[t] == m {
                joint += p;
            }
        }
    })?;
    let q = gt.qmat[(t, k)];
    let closed_form = q * gt.p[(n, m)] * gt.mu[m] + (1.0 - q) * gt.mu[n] * gt.mu[m];
    ProbCheck { enumerated: joint / given, closed_form }.verified("joint probability")
}

/// `P(x_out = n | x_last = k, x_s = m, x_t = l)` for `s != t` against
/// `q_s P_{n,m} + q_t P_{n,l} + (1 - q_s - q_t) mu_n`.
#[allow(clippy::too_many_arguments)]
pub fn exact_cond_prob(
    gt: &GroundTruth,
    n: usize,
    k: usize,
    s: usize,
    m: usize,
    t: usize,
    l: usize,
    budget: &EnumBudget,
) -> Result<ProbCheck> {
    check_index(gt, &[n, k, m, l], &[s, t])?;
    if s == t {
        return Err(ScbError::Parameter("positions must differ".into()));
    }
    let mut joint = 0.0;
    let mut given = 0.0;
    for_each_outcome(gt, budget, |x, kk, out, p| {
        if kk == k && x[s] == m && x[t] == l {
            given += p;
            if out == n {
                joint += p;
            }
        }
    })?;
    let (qs, qt) = (gt.qmat[(s, k)], gt.qmat[(t, k)]);
    let closed_form = qs * gt.p[(n, m)] + qt * gt.p[(n, l)] + (1.0 - qs - qt) * gt.mu[n];
    ProbCheck { enumerated: joint / given, closed_form }.verified("conditional probability")
}

/// Enumerated expectation of the per-sample raw gradient.
pub fn exact_expected_grads(gt: &GroundTruth, params: &ModelParams, budget: &EnumBudget) -> Result<GradPair> {
    budget.check(gt)?;
    let (n, t) = (gt.n(), gt.t());
    let parts: Vec<Result<GradPair>> = (0..n)
        .into_par_iter()
        .map(|first| {
            let mut acc = GradPair { v: Mat::zeros(n, n), a: Mat::zeros(t, n) };
            let mut err = None;
            for_each_with_first(gt, first, |x, k, out, p| {
                if err.is_some() || p == 0.0 {
                    return;
                }
                let s = Sample { x: x.to_vec(), x_last: k, x_out: out };
                match grad_pair(params, &s) {
                    Ok(g) => {
                        acc.v += g.v * p;
                        let mut col = acc.a.column_mut(k);
                        col += g.a_col * p;
                    }
                    Err(e) => err = Some(e),
                }
            });
            match err {
                Some(e) => Err(e),
                None => Ok(acc),
            }
        })
        .collect();
    let mut total = GradPair { v: Mat::zeros(n, n), a: Mat::zeros(t, n) };
    for part in parts {
        let part = part?;
        total.v += part.v;
        total.a += part.a;
    }
    Ok(total)
}

/// Max absolute discrepancy between enumeration and closed form, per identity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub max_abs_diff: BTreeMap<String, f64>,
}

impl MomentReport {
    pub fn worst(&self) -> f64 {
        self.max_abs_diff.values().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() <= tol
    }

    fn record(&mut self, key: &str, diff: f64) {
        let slot = self.max_abs_diff.entry(key.to_string()).or_insert(0.0);
        *slot = slot.max(diff);
    }

    pub fn merge(&mut self, other: &MomentReport) {
        for (k, &v) in &other.max_abs_diff {
            self.record(k, v);
        }
    }
}

pub const KEY_JOINT: &str = "joint_probability";
pub const KEY_COND: &str = "conditional_probability";
pub const KEY_TOKEN_MOMENT: &str = "token_second_moment";
pub const KEY_VALUE_MOMENT: &str = "value_column_products";
pub const KEY_OUTPUT_MOMENT: &str = "value_at_output";
pub const KEY_RAW_GRAD: &str = "expected_gradients";
pub const KEY_PRECOND_GRAD: &str = "expected_preconditioned_gradients";

/// Enumerated conditional moments given `x_last = k`, accumulated in one pass.
struct Moments {
    n: usize,
    t: usize,
    /// `P(x_last = k)`.
    pk: Vec<f64>,
    /// `[k][(o * t + pos) * n + m]`: `P(x_out = o, x_pos = m, x_last = k)`.
    joint: Vec<Vec<f64>>,
    /// `[k][((s * t + u) * n + i) * n + j]`: `P(x_s = i, x_u = j, x_last = k)` for `s != u`.
    pair: Vec<Vec<f64>>,
    /// `[k][((s * t + u) * n + i) * n + j]`, with `x_out = o`, stored per `o` as `cond[o][k]`.
    cond: Vec<Vec<Vec<f64>>>,
}

impl Moments {
    fn collect(gt: &GroundTruth, budget: &EnumBudget) -> Result<Self> {
        let (n, t) = (gt.n(), gt.t());
        let mut m = Moments {
            n,
            t,
            pk: vec![0.0; n],
            joint: vec![vec![0.0; n * t * n]; n],
            pair: vec![vec![0.0; t * t * n * n]; n],
            cond: vec![vec![vec![0.0; t * t * n * n]; n]; n],
        };
        for_each_outcome(gt, budget, |x, k, out, p| {
            m.pk[k] += p;
            for (pos, &tok) in x.iter().enumerate() {
                m.joint[k][(out * t + pos) * n + tok] += p;
            }
            for (s, &i) in x.iter().enumerate() {
                for (u, &j) in x.iter().enumerate() {
                    if s != u {
                        let idx = ((s * t + u) * n + i) * n + j;
                        m.pair[k][idx] += p;
                        m.cond[out][k][idx] += p;
                    }
                }
            }
        })?;
        Ok(m)
    }
}

/// Enumerates every moment and probability identity used by the gradient
/// formulas and reports the largest discrepancy for each.
///
/// The value-moment identities assume `V mu = mu`, so `params` should satisfy
/// the model constraints.
pub fn exact_moment_checks(gt: &GroundTruth, params: &ModelParams, budget: &EnumBudget) -> Result<MomentReport> {
    let mo = Moments::collect(gt, budget)?;
    let (n, t) = (mo.n, mo.t);
    let mu = &gt.mu;
    let mu_sq = mu.norm_squared();
    let mut rep = MomentReport::default();

    for k in 0..n {
        let pk = mo.pk[k];
        for o in 0..n {
            for pos in 0..t {
                for m in 0..n {
                    let q = gt.qmat[(pos, k)];
                    let closed = q * gt.p[(o, m)] * mu[m] + (1.0 - q) * mu[o] * mu[m];
                    rep.record(KEY_JOINT, (mo.joint[k][(o * t + pos) * n + m] / pk - closed).abs());
                }
            }
        }
        for s in 0..t {
            for u in 0..t {
                if s == u {
                    continue;
                }
                let (qs, qu) = (gt.qmat[(s, k)], gt.qmat[(u, k)]);
                for i in 0..n {
                    for j in 0..n {
                        let idx = ((s * t + u) * n + i) * n + j;
                        let given = mo.pair[k][idx];
                        for o in 0..n {
                            let closed = qs * gt.p[(o, i)] + qu * gt.p[(o, j)] + (1.0 - qs - qu) * mu[o];
                            rep.record(KEY_COND, (mo.cond[o][k][idx] / given - closed).abs());
                        }
                    }
                }
            }
        }
    }

    // Token moments and value-column products, marginalized over everything else.
    let v = &params.v;
    let v_sq = weighted_norm_sq(v, mu);
    for s in 0..t {
        for u in 0..t {
            let mut second = Mat::zeros(n, n);
            for k in 0..n {
                if s == u {
                    for o in 0..n {
                        for i in 0..n {
                            second[(i, i)] += mo.joint[k][(o * t + s) * n + i];
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..n {
                            second[(i, j)] += mo.pair[k][((s * t + u) * n + i) * n + j];
                        }
                    }
                }
            }
            let closed = if s == u { Mat::from_diagonal(mu) } else { mu * mu.transpose() };
            rep.record(KEY_TOKEN_MOMENT, (&second - closed).amax());
            let products: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| second[(i, j)] * v.column(i).dot(&v.column(j)))
                .sum();
            let closed = if s == u { v_sq } else { mu_sq };
            rep.record(KEY_VALUE_MOMENT, (products - closed).abs());
        }
    }

    let vp = weighted_dot(v, &gt.p, mu);
    for k in 0..n {
        for pos in 0..t {
            let mut e = 0.0;
            for o in 0..n {
                for m in 0..n {
                    e += mo.joint[k][(o * t + pos) * n + m] * v[(o, m)];
                }
            }
            let q = gt.qmat[(pos, k)];
            rep.record(KEY_OUTPUT_MOMENT, (e / mo.pk[k] - (q * vp + (1.0 - q) * mu_sq)).abs());
        }
    }

    let raw = exact_expected_grads(gt, params, budget)?;
    let closed = expected_raw_grads(params, gt);
    rep.record(KEY_RAW_GRAD, (&raw.v - &closed.v).amax().max((&raw.a - &closed.a).amax()));
    let pre = precondition(&raw.v, &raw.a, mu)?;
    let closed = expected_grads(params, gt);
    rep.record(KEY_PRECOND_GRAD, (&pre.v - &closed.v).amax().max((&pre.a - &closed.a).amax()));
    Ok(rep)
}

/// Random `(V, A)` satisfying the affine constraints: `V` is a random
/// perturbation of `mu 1^T` projected onto the constraint set, and each
/// column of `A` is shifted to sum to one.
pub fn random_feasible_params<R: Rng + ?Sized>(gt: &GroundTruth, scale: f64, rng: &mut R) -> ModelParams {
    let (n, t) = (gt.n(), gt.t());
    let raw = Mat::from_fn(n, n, |_, _| rng.random_range(-scale..scale));
    let centered = crate::model::precondition_v(&(raw * Mat::from_diagonal(&gt.mu)), &gt.mu)
        .expect("mu is positive for a valid task");
    let v = trivial_transition(&gt.mu) + centered;
    let mut a = Mat::from_fn(t, n, |_, _| rng.random_range(-scale..scale));
    for mut col in a.column_iter_mut() {
        let shift = (1.0 - col.sum()) / t as f64;
        col.add_scalar_mut(shift);
    }
    ModelParams { v, a }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_structural_task, label_distribution};
    use crate::geometry::{Dims, Vector};
    use crate::rng::RngSeed;

    fn gt(t: usize, n: usize, seed: u64) -> GroundTruth {
        generate_structural_task(Dims::new(t, n, 2.min(t), 2.0).unwrap(), RngSeed::new(seed)).unwrap()
    }

    #[test]
    fn single_token_vocabulary_has_one_outcome() {
        let dims = Dims { t: 3, n: 1, q: 1, c: 1.0 };
        let mut qmat = Mat::zeros(3, 1);
        qmat[(0, 0)] = 1.0;
        let g = GroundTruth::from_parts_unchecked(dims, Mat::identity(1, 1), Vector::from_element(1, 1.0), qmat);
        let all = enumerate_outcomes(&g, &EnumBudget::default()).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].prob, 1.0);
    }

    #[test]
    fn small_enumeration_sums_to_one() {
        let g = gt(2, 2, 1);
        let all = enumerate_outcomes(&g, &EnumBudget::default()).unwrap();
        assert_eq!(all.len(), 16);
        let total: f64 = all.iter().map(|o| o.prob).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn budget_is_enforced() {
        let g = gt(12, 3, 2);
        let err = enumerate_outcomes(&g, &EnumBudget::default()).unwrap_err();
        assert!(matches!(err, ScbError::Budget { needed, .. } if needed == 3u128.pow(14)));
    }

    #[test]
    fn enumerated_label_frequencies_match_the_label_formula() {
        let g = gt(3, 2, 3);
        let mut per_context = std::collections::HashMap::new();
        for_each_outcome(&g, &EnumBudget::default(), |x, k, o, p| {
            let e = per_context.entry((x.to_vec(), k)).or_insert_with(|| Vector::zeros(2));
            e[o] += p;
        })
        .unwrap();
        for ((x, k), v) in per_context {
            let want = label_distribution(&g, &x, k);
            let total = v.sum();
            assert!((v / total - want).amax() < 1e-14);
        }
    }

    #[test]
    fn one_hot_target_gives_transition_joint() {
        let base = gt(3, 2, 4);
        let mut qmat = Mat::zeros(3, 2);
        qmat[(1, 0)] = 1.0;
        qmat[(2, 1)] = 1.0;
        let g = GroundTruth::from_parts_unchecked(base.dims, base.p.clone(), base.mu.clone(), qmat);
        let c = exact_joint_prob(&g, 1, 0, 1, 0, &EnumBudget::default()).unwrap();
        assert!((c.enumerated - g.p[(1, 0)] * g.mu[0]).abs() < 1e-14);
    }

    #[test]
    fn off_support_conditional_is_stationary() {
        let g = gt(4, 2, 5);
        let k = 0;
        let off: Vec<usize> = (0..4).filter(|&t| g.qmat[(t, k)] == 0.0).collect();
        let c = exact_cond_prob(&g, 1, k, off[0], 0, off[1], 1, &EnumBudget::default()).unwrap();
        assert!((c.enumerated - g.mu[1]).abs() < 1e-12);
    }

    #[test]
    fn every_identity_holds_on_random_instances() {
        for (t, n) in [(3, 2), (4, 3)] {
            let g = gt(t, n, 6);
            let mut rng = RngSeed::new(6).stream("params");
            for _ in 0..3 {
                let params = random_feasible_params(&g, 0.5, &mut rng);
                let rep = exact_moment_checks(&g, &params, &EnumBudget::default()).unwrap();
                assert_eq!(rep.max_abs_diff.len(), 7);
                assert!(rep.passes(MOMENT_TOL), "{rep:?}");
            }
        }
    }

    #[test]
    fn gradients_vanish_at_ground_truth() {
        let g = gt(3, 3, 7);
        let e = exact_expected_grads(&g, &ModelParams::ground_truth(&g), &EnumBudget::default()).unwrap();
        assert!(e.v.amax() < 1e-14 && e.a.amax() < 1e-14);
    }

    #[test]
    fn init_expectation_matches_closed_form() {
        let g = gt(3, 2, 8);
        let raw = exact_expected_grads(&g, &ModelParams::init(&g), &EnumBudget::default()).unwrap();
        let pre = precondition(&raw.v, &raw.a, &g.mu).unwrap();
        assert!(pre.a.amax() < 1e-14);
        let want = (&g.p - trivial_transition(&g.mu)) * (-1.0 / 3.0);
        assert!((pre.v - want).amax() < 1e-14);
    }

    #[test]
    fn random_params_are_feasible() {
        let g = gt(5, 3, 9);
        let p = random_feasible_params(&g, 1.0, &mut RngSeed::new(9).stream("p"));
        assert!(p.residuals(&g.mu).max() < 1e-13);
    }
}
