//! Population-level quantities: the projection of `(V, A)` onto the line
//! through the initialization and the ground truth, exact expected gradients,
//! the scalar recursions they induce, and a reduced simulator that evolves
//! only those scalars with Gaussian surrogates for minibatch noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScbError};
use crate::geometry::{
    trivial_transition, uniform_attention, weighted_dot, weighted_norm_sq, GroundTruth, Mat, ModelParams,
};
use crate::model::GradPair;

/// Coordinates of `(V, A)` relative to the population lines
/// `V = a_V P + (1 - a_V) mu 1^T` and `A = a_A Q + (1 - a_A) 1 1^T / T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationProjection {
    pub alpha_v: f64,
    pub alpha_a: f64,
    pub beta_v: f64,
    pub beta_a: f64,
    pub k_p: f64,
    pub k_q: f64,
    pub k_vp: f64,
    pub k_aq: f64,
    pub k_v: f64,
    pub k_a: f64,
    pub delta_v_mu_sq: f64,
    pub delta_a_mu_sq: f64,
}

impl PopulationProjection {
    pub fn delta_v_mu(&self) -> f64 {
        self.delta_v_mu_sq.max(0.0).sqrt()
    }

    pub fn delta_a_mu(&self) -> f64 {
        self.delta_a_mu_sq.max(0.0).sqrt()
    }

    /// Normalized squared errors `||Delta_V||^2 / K_P` and `||Delta_A||^2 / K_Q`.
    pub fn delta_sq_normalized(&self) -> (f64, f64) {
        (self.delta_v_mu_sq / self.k_p, self.delta_a_mu_sq / self.k_q)
    }

    pub fn scalars(&self) -> ReducedState {
        ReducedState {
            alpha_v: self.alpha_v,
            alpha_a: self.alpha_a,
            delta_v_sq: self.delta_v_mu_sq,
            delta_a_sq: self.delta_a_mu_sq,
        }
    }
}

/// Projection together with the residual matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub proj: PopulationProjection,
    pub delta_v: Mat,
    pub delta_a: Mat,
}

/// Signal constants at or below this are treated as zero.
pub const DEGENERATE_TOL: f64 = 1e-12;

pub fn project(params: &ModelParams, gt: &GroundTruth) -> Result<PopulationProjection> {
    decompose(params, gt).map(|d| d.proj)
}

pub fn decompose(params: &ModelParams, gt: &GroundTruth) -> Result<Decomposition> {
    let mu = &gt.mu;
    let t = gt.t() as f64;
    let mu_sq = mu.norm_squared();
    let k_p = weighted_norm_sq(&gt.p, mu) - mu_sq;
    let k_q = weighted_norm_sq(&gt.qmat, mu) - 1.0 / t;
    if !(k_p > DEGENERATE_TOL) || !(k_q > DEGENERATE_TOL) {
        return Err(ScbError::DegenerateTask(format!("K_P = {k_p:e}, K_Q = {k_q:e}")));
    }
    if params.v.shape() != gt.p.shape() || params.a.shape() != gt.qmat.shape() {
        return Err(ScbError::dim(
            "project",
            format!("V {:?}, A {:?}", gt.p.shape(), gt.qmat.shape()),
            format!("V {:?}, A {:?}", params.v.shape(), params.a.shape()),
        ));
    }
    let k_vp = weighted_dot(&params.v, &gt.p, mu) - mu_sq;
    let k_aq = weighted_dot(&params.a, &gt.qmat, mu) - 1.0 / t;
    let k_v = weighted_norm_sq(&params.v, mu) - mu_sq;
    let k_a = weighted_norm_sq(&params.a, mu) - 1.0 / t;
    let alpha_v = k_vp / k_p;
    let alpha_a = k_aq / k_q;
    let base_v = trivial_transition(mu);
    let base_a = uniform_attention(gt.t(), gt.n());
    let delta_v = &params.v - &base_v - (&gt.p - &base_v) * alpha_v;
    let delta_a = &params.a - &base_a - (&gt.qmat - &base_a) * alpha_a;
    let proj = PopulationProjection {
        alpha_v,
        alpha_a,
        beta_v: 1.0 - alpha_v,
        beta_a: 1.0 - alpha_a,
        k_p,
        k_q,
        k_vp,
        k_aq,
        k_v,
        k_a,
        delta_v_mu_sq: weighted_norm_sq(&delta_v, mu),
        delta_a_mu_sq: weighted_norm_sq(&delta_a, mu),
    };
    Ok(Decomposition { proj, delta_v, delta_a })
}

/// `||V - P||_mu` and `||A - Q||_mu`.
pub fn distances(params: &ModelParams, gt: &GroundTruth) -> (f64, f64) {
    let dv = &params.v - &gt.p;
    let da = &params.a - &gt.qmat;
    (weighted_norm_sq(&dv, &gt.mu).sqrt(), weighted_norm_sq(&da, &gt.mu).sqrt())
}

/// Expected preconditioned gradients:
/// `||A||^2 (V - mu 1^T) - <Q, A> (P - mu 1^T)` and
/// `K_V (a - 1/T) - K_VP (q - 1/T)` per column.
pub fn expected_grads(params: &ModelParams, gt: &GroundTruth) -> GradPair {
    let mu = &gt.mu;
    let t = gt.t() as f64;
    let mu_sq = mu.norm_squared();
    let a_sq = weighted_norm_sq(&params.a, mu);
    let qa = weighted_dot(&gt.qmat, &params.a, mu);
    let base = trivial_transition(mu);
    let v = (&params.v - &base) * a_sq - (&gt.p - &base) * qa;
    let k_v = weighted_norm_sq(&params.v, mu) - mu_sq;
    let k_vp = weighted_dot(&params.v, &gt.p, mu) - mu_sq;
    let a = params.a.add_scalar(-1.0 / t) * k_v - gt.qmat.add_scalar(-1.0 / t) * k_vp;
    GradPair { v, a }
}

/// Expected raw gradients, valid for any `(V, A)`:
/// `V M - C` with `M = E[Xa (Xa)^T]`, `C = E[e_o (Xa)^T]`, and per column
/// `mu_k (a_t ||V||^2 + (1^T a - a_t) ||V mu||^2 - q_t <V, P> - (1 - q_t) mu^T V mu)`.
pub fn expected_raw_grads(params: &ModelParams, gt: &GroundTruth) -> GradPair {
    let mu = &gt.mu;
    let n = gt.n();
    let (m, c) = second_moments(params, gt);
    let v = &params.v * m - c;
    let v_sq = weighted_norm_sq(&params.v, mu);
    let v_mu = &params.v * mu;
    let vmu_sq = v_mu.norm_squared();
    let mu_v_mu = mu.dot(&v_mu);
    let vp = weighted_dot(&params.v, &gt.p, mu);
    let mut a = Mat::zeros(gt.t(), n);
    for k in 0..n {
        let col_sum = params.a.column(k).sum();
        for t in 0..gt.t() {
            let at = params.a[(t, k)];
            let qt = gt.qmat[(t, k)];
            a[(t, k)] = mu[k] * (at * v_sq + (col_sum - at) * vmu_sq - qt * vp - (1.0 - qt) * mu_v_mu);
        }
    }
    GradPair { v, a }
}

/// `E[Xa (Xa)^T]` and `E[e_o (Xa)^T]`, averaged over the query token.
fn second_moments(params: &ModelParams, gt: &GroundTruth) -> (Mat, Mat) {
    let mu = &gt.mu;
    let n = gt.n();
    let diag = Mat::from_diagonal(mu);
    let outer = mu * mu.transpose();
    let p_diag = &gt.p * &diag;
    let mut m = Mat::zeros(n, n);
    let mut c = Mat::zeros(n, n);
    for k in 0..n {
        let a = params.a.column(k);
        let a_sq = a.norm_squared();
        let s = a.sum();
        let qa = gt.qmat.column(k).dot(&a);
        m += (&diag * a_sq + &outer * (s * s - a_sq)) * mu[k];
        c += (&p_diag * qa + &outer * (s - qa)) * mu[k];
    }
    (m, c)
}

/// Exact expected loss `E[1/2 ||e_o - V X a||^2]`.
pub fn population_loss(params: &ModelParams, gt: &GroundTruth) -> f64 {
    let mu = &gt.mu;
    let v_sq = weighted_norm_sq(&params.v, mu);
    let v_mu = &params.v * mu;
    let vmu_sq = v_mu.norm_squared();
    let mu_v_mu = mu.dot(&v_mu);
    let vp = weighted_dot(&params.v, &gt.p, mu);
    let mut total = 0.0;
    for k in 0..gt.n() {
        let a = params.a.column(k);
        let q = gt.qmat.column(k);
        let a_sq = a.norm_squared();
        let s = a.sum();
        let qa = q.dot(&a);
        let cross = qa * vp + (s - qa) * mu_v_mu;
        total += mu[k] * (1.0 - 2.0 * cross + a_sq * v_sq + (s * s - a_sq) * vmu_sq);
    }
    0.5 * total
}

/// Minimizer of the population loss over `V` with `A` held fixed.
pub fn population_v_refit(a: &Mat, gt: &GroundTruth) -> Result<Mat> {
    let params = ModelParams { v: gt.p.clone(), a: a.clone() };
    let (m, c) = second_moments(&params, gt);
    let lu = m.transpose().lu();
    let vt = lu
        .solve(&c.transpose())
        .ok_or_else(|| ScbError::DegenerateTask("singular attention second moment".into()))?;
    Ok(vt.transpose())
}

/// One step of the noiseless two-dimensional recursion with `eta_V = eta/K_Q`
/// and `eta_A = eta/K_P`.
///
/// `k_p` only enters through the rate split, so it does not appear in the update.
pub fn alpha_recursion_step(alphas: (f64, f64), eta: f64, _k_p: f64, k_q: f64, t: usize) -> (f64, f64) {
    let (av, aa) = alphas;
    let gap = 1.0 - av * aa;
    (av + eta * gap * aa + (eta / k_q) * (1.0 - av) / t as f64, aa + eta * gap * av)
}

/// The four scalars tracked along a trajectory. `delta_*_sq` are squared
/// mu-norms, not normalized by `K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    pub alpha_v: f64,
    pub alpha_a: f64,
    pub delta_v_sq: f64,
    pub delta_a_sq: f64,
}

impl ReducedState {
    pub fn origin() -> Self {
        ReducedState { alpha_v: 0.0, alpha_a: 0.0, delta_v_sq: 0.0, delta_a_sq: 0.0 }
    }
}

/// Task constants the scalar dynamics depend on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedConsts {
    pub t: usize,
    pub n: usize,
    pub q: usize,
    pub k_p: f64,
    pub k_q: f64,
}

impl ReducedConsts {
    pub fn from_ground_truth(gt: &GroundTruth) -> Self {
        let c = gt.constants();
        ReducedConsts { t: gt.t(), n: gt.n(), q: gt.dims.q, k_p: c.k_p, k_q: c.k_q }
    }

    /// Constants of a typical task: equal attention weights and a transition
    /// whose columns carry about twice the mass of `mu` in `mu`-norm.
    pub fn typical(t: usize, n: usize, q: usize) -> Self {
        ReducedConsts { t, n, q, k_p: 2.0 / n as f64, k_q: 1.0 / q as f64 - 1.0 / t as f64 }
    }
}

/// Scalar noise functionals entering the projection recursions.
/// For the attention block, `h` is the effective update direction minus the
/// expected preconditioned gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseTerms {
    /// `<h_V, P>_mu`
    pub hv_p: f64,
    /// `<h_A, Q>_mu`
    pub ha_q: f64,
    /// `<Delta_V, h_V>_mu`
    pub dv_hv: f64,
    /// `<Delta_A, h_A>_mu`
    pub da_ha: f64,
    /// `||h_V||_mu^2`
    pub hv_sq: f64,
    /// `||h_A||_mu^2`
    pub ha_sq: f64,
}

/// Exact one-step update of `(alpha_V, alpha_A, ||Delta_V||^2, ||Delta_A||^2)`
/// under a simultaneous step `V -= eta_V (E grad_V + h_V)`,
/// `A -= eta_A (E grad_A + h_A)`.
pub fn projection_dynamics_step(
    s: &ReducedState,
    noise: &NoiseTerms,
    eta_v: f64,
    eta_a: f64,
    k_p: f64,
    k_q: f64,
    t: usize,
) -> ReducedState {
    let inv_t = 1.0 / t as f64;
    let (av, aa) = (s.alpha_v, s.alpha_a);
    let gap = 1.0 - av * aa;
    let alpha_v = av + eta_v * k_q * aa * gap + eta_v * (1.0 - av) * inv_t
        - eta_v * av * s.delta_a_sq
        - (eta_v / k_p) * noise.hv_p;
    let alpha_a = aa + eta_a * k_p * av * gap - eta_a * aa * s.delta_v_sq - (eta_a / k_q) * noise.ha_q;
    let c_v = 1.0 - eta_v * (aa * aa * k_q + s.delta_a_sq + inv_t);
    let c_a = 1.0 - eta_a * (av * av * k_p + s.delta_v_sq);
    let delta_v_sq = c_v * c_v * s.delta_v_sq - 2.0 * eta_v * c_v * noise.dv_hv
        + eta_v * eta_v * (noise.hv_sq - noise.hv_p * noise.hv_p / k_p);
    let delta_a_sq = c_a * c_a * s.delta_a_sq - 2.0 * eta_a * c_a * noise.da_ha
        + eta_a * eta_a * (noise.ha_sq - noise.ha_q * noise.ha_q / k_q);
    ReducedState { alpha_v, alpha_a, delta_v_sq, delta_a_sq }
}

/// Deviation of a step direction from the expected preconditioned gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDiagnostics {
    pub h_v: Mat,
    pub h_a: Mat,
    /// Effective proximal direction minus the expected gradient, when the
    /// attention step was not a plain gradient step.
    pub hhat_a: Option<Mat>,
    pub terms: NoiseTerms,
}

/// `batch` is the preconditioned minibatch gradient; `effective_a`, if given,
/// is `-(A_next - A) / eta_A` and replaces `h_A` in the scalar terms.
pub fn noise_diagnostics(
    batch: &GradPair,
    effective_a: Option<&Mat>,
    params: &ModelParams,
    gt: &GroundTruth,
) -> Result<NoiseDiagnostics> {
    let expected = expected_grads(params, gt);
    let d = decompose(params, gt)?;
    let mu = &gt.mu;
    let h_v = &batch.v - &expected.v;
    let h_a = &batch.a - &expected.a;
    let hhat_a = effective_a.map(|g| g - &expected.a);
    let ha = hhat_a.as_ref().unwrap_or(&h_a);
    let terms = NoiseTerms {
        hv_p: weighted_dot(&h_v, &gt.p, mu),
        ha_q: weighted_dot(ha, &gt.qmat, mu),
        dv_hv: weighted_dot(&d.delta_v, &h_v, mu),
        da_ha: weighted_dot(&d.delta_a, ha, mu),
        hv_sq: weighted_norm_sq(&h_v, mu),
        ha_sq: weighted_norm_sq(ha, mu),
    };
    Ok(NoiseDiagnostics { h_v, h_a, hhat_a, terms })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducedMode {
    /// Plain gradient noise over all `T N` attention coordinates.
    Sgd,
    /// Proximal steps: off-support noise is removed, leaving `Q N` coordinates.
    Prox,
}

/// Reduced simulation settings. Rates are the normalized `eta`, split as
/// `eta_V = eta / K_Q`, `eta_A = eta / K_P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedConfig {
    pub consts: ReducedConsts,
    pub mode: ReducedMode,
    pub steps: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub switch_step: usize,
    pub batch: usize,
    pub sigma_scale: f64,
    /// `B E||h_A||_mu^2 = noise_const * w * N^2`, where `w` is `T` or `Q`.
    pub noise_const: f64,
    /// `B E||h_V||_mu^2 = noise_const_v * N^2`.
    pub noise_const_v: f64,
}

impl ReducedConfig {
    pub fn eta_at(&self, step: usize) -> f64 {
        if step < self.switch_step { self.eta1 } else { self.eta2 }
    }
}

/// Isotropic Gaussian surrogate for `h` in `dim` coordinates with total
/// second moment `total`. Draws the components along the signal direction and
/// the residual direction explicitly and the remainder by its mean, so that
/// the squared errors stay nonnegative.
fn surrogate_terms<R: Rng + ?Sized>(
    rng: &mut R,
    total: f64,
    dim: f64,
    k: f64,
    delta_sq: f64,
) -> (f64, f64, f64) {
    let coord = (total / dim).sqrt();
    let z_sig: f64 = rng.sample::<f64, _>(StandardNormal) * coord;
    let z_res: f64 = rng.sample::<f64, _>(StandardNormal) * coord;
    let rest = total * (dim - 2.0).max(0.0) / dim;
    let signal = z_sig * k.sqrt();
    let cross = z_res * delta_sq.max(0.0).sqrt();
    let norm_sq = z_sig * z_sig + z_res * z_res + rest;
    (signal, cross, norm_sq)
}

/// Evolves the four scalars with the projection recursions, replacing each
/// minibatch noise functional by an independent Gaussian draw whose variance
/// scales as `sigma_scale^2 / B`.
pub fn reduced_noise_simulate<R: Rng + ?Sized>(
    cfg: &ReducedConfig,
    init: ReducedState,
    rng: &mut R,
) -> Result<Vec<ReducedState>> {
    if cfg.batch == 0 {
        return Err(ScbError::Parameter("batch size must be positive".into()));
    }
    let c = cfg.consts;
    if !(c.k_p > 0.0 && c.k_q > 0.0) {
        return Err(ScbError::DegenerateTask(format!("K_P = {}, K_Q = {}", c.k_p, c.k_q)));
    }
    let n = c.n as f64;
    let (dim_a, width) = match cfg.mode {
        ReducedMode::Sgd => ((c.t * c.n) as f64, c.t as f64),
        ReducedMode::Prox => ((c.q * c.n) as f64, c.q as f64),
    };
    let scale = cfg.sigma_scale * cfg.sigma_scale / cfg.batch as f64;
    let total_a = scale * cfg.noise_const * width * n * n;
    let total_v = scale * cfg.noise_const_v * n * n;
    let dim_v = n * n;
    let mut out = Vec::with_capacity(cfg.steps + 1);
    let mut s = init;
    out.push(s);
    for step in 0..cfg.steps {
        let eta = cfg.eta_at(step);
        let noise = if scale > 0.0 {
            let (hv_p, dv_hv, hv_sq) = surrogate_terms(rng, total_v, dim_v, c.k_p, s.delta_v_sq);
            let (ha_q, da_ha, ha_sq) = surrogate_terms(rng, total_a, dim_a, c.k_q, s.delta_a_sq);
            NoiseTerms { hv_p, ha_q, dv_hv, da_ha, hv_sq, ha_sq }
        } else {
            NoiseTerms::default()
        };
        s = projection_dynamics_step(&s, &noise, eta / c.k_q, eta / c.k_p, c.k_p, c.k_q, c.t);
        if ![s.alpha_v, s.alpha_a, s.delta_v_sq, s.delta_a_sq].iter().all(|x| x.is_finite()) {
            return Err(ScbError::Divergence { step, norm: f64::INFINITY });
        }
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_ground_truth;
    use crate::geometry::Dims;
    use crate::model::precondition;
    use crate::rng::RngSeed;

    fn gt(t: usize, seed: u64) -> GroundTruth {
        generate_ground_truth(Dims::new(t, 3, 2, 2.0).unwrap(), RngSeed::new(seed), 20_000).unwrap()
    }

    /// Random parameters satisfying the affine constraints.
    fn feasible(gt: &GroundTruth, seed: u64) -> ModelParams {
        let mut rng = RngSeed::new(seed).stream("feasible");
        let n = gt.n();
        let raw_v = Mat::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        let raw_a = Mat::from_fn(gt.t(), n, |_, _| rng.random_range(-0.5..0.5));
        let v = trivial_transition(&gt.mu) + precondition(&raw_v, &raw_a, &gt.mu).unwrap().v;
        let mut a = raw_a;
        for mut col in a.column_iter_mut() {
            let shift = (1.0 - col.sum()) / col.len() as f64;
            col.add_scalar_mut(shift);
        }
        ModelParams { v, a }
    }

    #[test]
    fn endpoints_project_to_zero_and_one() {
        let g = gt(8, 1);
        let p = project(&ModelParams::ground_truth(&g), &g).unwrap();
        assert!((p.alpha_v - 1.0).abs() < 1e-12 && (p.alpha_a - 1.0).abs() < 1e-12);
        assert!(p.delta_v_mu_sq < 1e-24 && p.delta_a_mu_sq < 1e-24);
        let p = project(&ModelParams::init(&g), &g).unwrap();
        assert!(p.alpha_v.abs() < 1e-12 && p.alpha_a.abs() < 1e-12);
        assert!(p.delta_v_mu_sq < 1e-24 && p.delta_a_mu_sq < 1e-24);
    }

    fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - r * (hi - lo);
            let b = lo + r * (hi - lo);
            if f(a) < f(b) { hi = b } else { lo = a }
        }
        // Golden section stalls near sqrt(eps); finish with one parabolic step.
        let (x, h) = (0.5 * (lo + hi), 1e-2);
        let (fl, fm, fr) = (f(x - h), f(x), f(x + h));
        x + 0.5 * h * (fl - fr) / (fl - 2.0 * fm + fr)
    }

    #[test]
    fn alpha_minimizes_distance_to_the_line() {
        let g = gt(7, 2);
        for seed in 0..5 {
            let params = feasible(&g, seed);
            let proj = project(&params, &g).unwrap();
            let base = trivial_transition(&g.mu);
            let fv = |al: f64| weighted_norm_sq(&(&g.p * al + &base * (1.0 - al) - &params.v), &g.mu);
            assert!((golden_section(fv, -20.0, 20.0) - proj.alpha_v).abs() < 1e-8);
            let ua = uniform_attention(7, 3);
            let fa = |al: f64| weighted_norm_sq(&(&g.qmat * al + &ua * (1.0 - al) - &params.a), &g.mu);
            let found = golden_section(fa, -20.0, 20.0);
            assert!((found - proj.alpha_a).abs() < 1e-8, "{found} vs {}", proj.alpha_a);
        }
    }

    #[test]
    fn residuals_are_orthogonal_and_constants_decompose() {
        let g = gt(9, 3);
        for seed in 0..5 {
            let params = feasible(&g, seed);
            let d = decompose(&params, &g).unwrap();
            assert!(weighted_dot(&d.delta_v, &g.p, &g.mu).abs() < 1e-10);
            assert!(weighted_dot(&d.delta_a, &g.qmat, &g.mu).abs() < 1e-10);
            let p = d.proj;
            assert!((p.k_v - (p.alpha_v.powi(2) * p.k_p + p.delta_v_mu_sq)).abs() < 1e-10);
            assert!((p.k_a - (p.alpha_a.powi(2) * p.k_q + p.delta_a_mu_sq)).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_targets_are_degenerate() {
        let g = gt(6, 4);
        let flat = GroundTruth::from_parts_unchecked(g.dims, g.p.clone(), g.mu.clone(), uniform_attention(6, 3));
        assert!(matches!(project(&ModelParams::init(&g), &flat), Err(ScbError::DegenerateTask(_))));
    }

    #[test]
    fn expected_gradient_at_init_points_along_the_transition() {
        let g = gt(10, 5);
        let e = expected_grads(&ModelParams::init(&g), &g);
        assert!(e.a.amax() < 1e-15);
        let want = (&g.p - trivial_transition(&g.mu)) * (-1.0 / 10.0);
        assert!((e.v - want).amax() < 1e-15);
    }

    #[test]
    fn expected_gradients_vanish_at_ground_truth() {
        let g = gt(10, 6);
        let gp = ModelParams::ground_truth(&g);
        let e = expected_grads(&gp, &g);
        assert!(e.v.amax() < 1e-14 && e.a.amax() < 1e-14);
        let r = expected_raw_grads(&gp, &g);
        assert!(r.v.amax() < 1e-14 && r.a.amax() < 1e-14);
    }

    #[test]
    fn preconditioning_the_raw_expectation_gives_the_closed_form() {
        let g = gt(6, 7);
        for seed in 0..5 {
            let params = feasible(&g, seed);
            let raw = expected_raw_grads(&params, &g);
            let pre = precondition(&raw.v, &raw.a, &g.mu).unwrap();
            let closed = expected_grads(&params, &g);
            assert!((pre.v - closed.v).amax() < 1e-12);
            assert!((pre.a - closed.a).amax() < 1e-12);
        }
    }

    #[test]
    fn population_loss_is_minimal_at_ground_truth() {
        let g = gt(6, 8);
        let best = population_loss(&ModelParams::ground_truth(&g), &g);
        for seed in 0..5 {
            assert!(population_loss(&feasible(&g, seed), &g) > best);
        }
    }

    #[test]
    fn refit_recovers_p_from_q_and_keeps_constraints() {
        let g = gt(12, 9);
        let v = population_v_refit(&g.qmat, &g).unwrap();
        assert!((v - &g.p).amax() < 1e-10);
        let a = feasible(&g, 1).a;
        let v = population_v_refit(&a, &g).unwrap();
        let p = ModelParams { v, a };
        assert!(p.residuals(&g.mu).max() < 1e-10);
        let e = expected_raw_grads(&p, &g);
        assert!(e.v.amax() < 1e-10);
    }

    #[test]
    fn alpha_recursion_fixed_point_and_bootstrap() {
        assert_eq!(alpha_recursion_step((1.0, 1.0), 0.1, 0.5, 0.4, 100), (1.0, 1.0));
        let (av, aa) = alpha_recursion_step((0.0, 0.0), 0.1, 0.5, 0.4, 100);
        assert!((av - 0.1 / (0.4 * 100.0)).abs() < 1e-18);
        assert_eq!(aa, 0.0);
    }

    #[test]
    fn noiseless_dynamics_reduce_to_the_alpha_recursion() {
        let s = ReducedState { alpha_v: 0.3, alpha_a: 0.2, delta_v_sq: 0.0, delta_a_sq: 0.0 };
        let (eta, k_p, k_q, t) = (0.05, 0.6, 0.45, 50);
        let next = projection_dynamics_step(&s, &NoiseTerms::default(), eta / k_q, eta / k_p, k_p, k_q, t);
        let (av, aa) = alpha_recursion_step((0.3, 0.2), eta, k_p, k_q, t);
        assert!((next.alpha_v - av).abs() < 1e-15 && (next.alpha_a - aa).abs() < 1e-15);
        assert_eq!(next.delta_v_sq, 0.0);
    }

    #[test]
    fn attention_error_slows_value_signal() {
        let base = ReducedState { alpha_v: 0.3, alpha_a: 0.2, delta_v_sq: 0.0, delta_a_sq: 0.0 };
        let off = ReducedState { delta_a_sq: 0.05, ..base };
        let (ev, ea) = (0.1, 0.2);
        let a = projection_dynamics_step(&base, &NoiseTerms::default(), ev, ea, 0.6, 0.45, 50);
        let b = projection_dynamics_step(&off, &NoiseTerms::default(), ev, ea, 0.6, 0.45, 50);
        assert!((a.alpha_v - b.alpha_v - ev * 0.3 * 0.05).abs() < 1e-15);
    }

    #[test]
    fn symmetric_start_stays_symmetric_without_drift() {
        let (eta, k_p, k_q) = (0.05, 0.6, 0.45);
        let mut s = ReducedState { alpha_v: 0.1, alpha_a: 0.1, delta_v_sq: 0.0, delta_a_sq: 0.0 };
        for _ in 0..500 {
            // eta_V K_Q = eta_A K_P, and t = usize::MAX makes the drift vanish.
            s = projection_dynamics_step(&s, &NoiseTerms::default(), eta / k_q, eta / k_p, k_p, k_q, usize::MAX);
            assert!((s.alpha_v - s.alpha_a).abs() < 1e-14);
        }
    }

    #[test]
    fn signal_sum_increases_in_the_growth_phase() {
        let (eta, k_p, k_q, t) = (0.05, 0.6, 0.45, 1000);
        let mut s = ReducedState { alpha_v: 0.01, alpha_a: 0.0, delta_v_sq: 0.0, delta_a_sq: 0.0 };
        for _ in 0..2000 {
            let next = projection_dynamics_step(&s, &NoiseTerms::default(), eta / k_q, eta / k_p, k_p, k_q, t);
            if next.alpha_v >= 1.0 || next.alpha_a >= 1.0 {
                break;
            }
            assert!(next.alpha_v + next.alpha_a > s.alpha_v + s.alpha_a);
            s = next;
        }
    }

    fn reduced_cfg(mode: ReducedMode, batch: usize, sigma: f64) -> ReducedConfig {
        ReducedConfig {
            consts: ReducedConsts::typical(1000, 10, 2),
            mode,
            steps: 300,
            eta1: 0.05,
            eta2: 0.02,
            switch_step: 150,
            batch,
            sigma_scale: sigma,
            noise_const: 1.0,
            noise_const_v: 1.0,
        }
    }

    #[test]
    fn zero_noise_simulation_is_the_deterministic_iteration() {
        let cfg = reduced_cfg(ReducedMode::Sgd, 64, 0.0);
        let traj = reduced_noise_simulate(&cfg, ReducedState::origin(), &mut RngSeed::new(1).stream("n")).unwrap();
        let c = cfg.consts;
        let mut s = ReducedState::origin();
        for (step, got) in traj.iter().enumerate().skip(1) {
            let eta = cfg.eta_at(step - 1);
            s = projection_dynamics_step(&s, &NoiseTerms::default(), eta / c.k_q, eta / c.k_p, c.k_p, c.k_q, c.t);
            assert_eq!(*got, s);
        }
    }

    #[test]
    fn zero_batch_is_rejected() {
        let cfg = reduced_cfg(ReducedMode::Sgd, 0, 1.0);
        assert!(reduced_noise_simulate(&cfg, ReducedState::origin(), &mut RngSeed::new(1).stream("n")).is_err());
    }

    #[test]
    fn squared_errors_stay_nonnegative_under_heavy_noise() {
        let mut cfg = reduced_cfg(ReducedMode::Sgd, 2, 1.0);
        cfg.noise_const = 1e-3;
        let traj = reduced_noise_simulate(&cfg, ReducedState::origin(), &mut RngSeed::new(2).stream("n")).unwrap();
        assert!(traj.iter().all(|s| s.delta_a_sq >= 0.0 && s.delta_v_sq >= 0.0));
    }

    #[test]
    fn diagnostics_vanish_for_the_population_gradient() {
        let g = gt(6, 10);
        let params = feasible(&g, 3);
        let e = expected_grads(&params, &g);
        let d = noise_diagnostics(&e, None, &params, &g).unwrap();
        assert!(d.h_v.amax() == 0.0 && d.h_a.amax() == 0.0);
        assert_eq!(d.terms, NoiseTerms::default());
    }
}
