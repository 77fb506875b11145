//! Forward pass, squared loss and gradients of the one-layer linear attention
//! model `F(x, k) = V X a^(k)`, plus the softmax-attention comparison model.
//!
//! `X a` is never materialized as a `N x T` product: attention mass is
//! accumulated per token, and `(V X)^T r` is read off `V^T r` by token lookup.

use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Result, ScbError};
use crate::geometry::{Mat, ModelParams, Vector};

/// Gradients with respect to `V` and `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub v: Mat,
    pub a: Mat,
}

impl GradPair {
    pub fn zeros(n: usize, t: usize) -> Self {
        GradPair { v: Mat::zeros(n, n), a: Mat::zeros(t, n) }
    }

    pub fn scale(mut self, s: f64) -> Self {
        self.v *= s;
        self.a *= s;
        self
    }

    fn add_assign(&mut self, other: &GradPair) {
        self.v += &other.v;
        self.a += &other.a;
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(self.a.iter()).all(|x| x.is_finite())
    }
}

/// Gradient of one sample; only column `col` of the `A` gradient can be nonzero.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrad {
    pub v: Mat,
    pub col: usize,
    pub a_col: Vector,
    pub loss: f64,
}

impl SampleGrad {
    pub fn to_dense(&self) -> GradPair {
        let mut a = Mat::zeros(self.a_col.len(), self.v.ncols());
        a.set_column(self.col, &self.a_col);
        GradPair { v: self.v.clone(), a }
    }
}

/// `X a^(k)` as an N-vector: the attention mass landing on each token.
pub fn attended_counts(a: &Mat, x: &[usize], k: usize, n: usize) -> Vector {
    let mut xa = Vector::zeros(n);
    for (t, &tok) in x.iter().enumerate() {
        xa[tok] += a[(t, k)];
    }
    xa
}

fn check_inputs(params: &ModelParams, x: &[usize], k: usize) -> Result<()> {
    let n = params.n();
    if x.len() != params.t() {
        return Err(ScbError::dim("context length", params.t(), x.len()));
    }
    if k >= n || x.iter().any(|&v| v >= n) {
        return Err(ScbError::Parameter(format!("token index outside [0, {n})")));
    }
    Ok(())
}

pub fn forward(params: &ModelParams, x: &[usize], k: usize) -> Result<Vector> {
    check_inputs(params, x, k)?;
    Ok(&params.v * attended_counts(&params.a, x, k, params.n()))
}

/// `1/2 ||e_o - F(x, k)||^2`.
pub fn per_sample_loss(params: &ModelParams, sample: &Sample) -> Result<f64> {
    let mut r = forward(params, &sample.x, sample.x_last)?;
    r[sample.x_out] -= 1.0;
    Ok(0.5 * r.norm_squared())
}

/// Vanilla gradients of the squared loss for one sample.
pub fn grad_pair(params: &ModelParams, sample: &Sample) -> Result<SampleGrad> {
    check_inputs(params, &sample.x, sample.x_last)?;
    Ok(grad_unchecked(params, sample))
}

fn grad_unchecked(params: &ModelParams, sample: &Sample) -> SampleGrad {
    let n = params.n();
    let k = sample.x_last;
    let xa = attended_counts(&params.a, &sample.x, k, n);
    let mut r = &params.v * &xa;
    r[sample.x_out] -= 1.0;
    let loss = 0.5 * r.norm_squared();
    let v = &r * xa.transpose();
    let per_token = params.v.tr_mul(&r);
    let a_col = Vector::from_iterator(sample.x.len(), sample.x.iter().map(|&tok| per_token[tok]));
    SampleGrad { v, col: k, a_col, loss }
}

/// `(I - 11^T/N) G diag(1/mu) (I - mu mu^T/||mu||^2)`.
pub fn precondition_v(g: &Mat, mu: &Vector) -> Result<Mat> {
    check_mu(mu)?;
    let n = mu.len();
    if g.shape() != (n, n) {
        return Err(ScbError::dim("precondition_v", format!("({n}, {n})"), format!("{:?}", g.shape())));
    }
    let mut m = g.clone();
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col /= mu[j];
    }
    // Right projector: M - (M mu) mu^T / ||mu||^2.
    let m_mu = &m * mu;
    let mu_sq = mu.norm_squared();
    m -= &m_mu * (mu.transpose() / mu_sq);
    // Left projector: subtract column means.
    for mut col in m.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
    Ok(m)
}

/// Column `k` becomes `(1/mu_k) (I - 11^T/T) g_k`.
pub fn precondition_a(g: &Mat, mu: &Vector) -> Result<Mat> {
    check_mu(mu)?;
    if g.ncols() != mu.len() {
        return Err(ScbError::dim("precondition_a", mu.len(), g.ncols()));
    }
    let t = g.nrows() as f64;
    let mut m = g.clone();
    for (k, mut col) in m.column_iter_mut().enumerate() {
        let mean = col.sum() / t;
        col.add_scalar_mut(-mean);
        col /= mu[k];
    }
    Ok(m)
}

pub fn precondition(g_v: &Mat, g_a: &Mat, mu: &Vector) -> Result<GradPair> {
    Ok(GradPair { v: precondition_v(g_v, mu)?, a: precondition_a(g_a, mu)? })
}

fn check_mu(mu: &Vector) -> Result<()> {
    if mu.iter().any(|&m| !(m > 0.0)) {
        return Err(ScbError::Parameter("preconditioning needs every mu_k > 0".into()));
    }
    Ok(())
}

/// Mean raw gradient and mean loss over a minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGrads {
    pub raw: GradPair,
    pub loss: f64,
    pub size: usize,
}

impl BatchGrads {
    pub fn preconditioned(&self, mu: &Vector) -> Result<GradPair> {
        precondition(&self.raw.v, &self.raw.a, mu)
    }
}

/// Samples folded sequentially into one leaf accumulator.
const LEAF: usize = 32;
/// Leaves evaluated in parallel before being reduced.
const WAVE: usize = 64;

struct Acc {
    g: GradPair,
    loss: f64,
}

impl Acc {
    fn merge(mut self, other: Acc) -> Acc {
        self.g.add_assign(&other.g);
        self.loss += other.loss;
        self
    }
}

fn pairwise(mut items: Vec<Acc>) -> Acc {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a.merge(b),
                None => a,
            });
        }
        items = next;
    }
    items.pop().expect("nonempty")
}

/// Mean gradient over `size` samples produced on demand by `sample_at(i)`.
///
/// Samples are grouped into fixed leaves; leaves are summed by a fixed
/// pairwise tree, so the result is independent of the thread count.
pub fn batch_grads_with<F>(params: &ModelParams, size: usize, sample_at: F) -> Result<BatchGrads>
where
    F: Fn(usize) -> Sample + Sync,
{
    if size == 0 {
        return Err(ScbError::Parameter("empty batch".into()));
    }
    let (n, t) = (params.n(), params.t());
    let leaves = size.div_ceil(LEAF);
    let leaf = |l: usize| -> Result<Acc> {
        let mut acc = Acc { g: GradPair::zeros(n, t), loss: 0.0 };
        for i in l * LEAF..((l + 1) * LEAF).min(size) {
            let s = sample_at(i);
            check_inputs(params, &s.x, s.x_last)?;
            let g = grad_unchecked(params, &s);
            acc.g.v += &g.v;
            let mut col = acc.g.a.column_mut(g.col);
            col += &g.a_col;
            acc.loss += g.loss;
        }
        Ok(acc)
    };
    let mut waves = Vec::with_capacity(leaves.div_ceil(WAVE));
    for w in (0..leaves).step_by(WAVE) {
        let accs = (w..(w + WAVE).min(leaves))
            .into_par_iter()
            .map(leaf)
            .collect::<Result<Vec<_>>>()?;
        waves.push(pairwise(accs));
    }
    let total = pairwise(waves);
    let inv = 1.0 / size as f64;
    Ok(BatchGrads { raw: total.g.scale(inv), loss: total.loss * inv, size })
}

pub fn batch_grads(params: &ModelParams, batch: &[Sample]) -> Result<BatchGrads> {
    batch_grads_with(params, batch.len(), |i| batch[i].clone())
}

/// Softmax attention: column `k` of `w` holds the logits used for query `k`,
/// and `a_sigma^(k) = softmax(w^(k))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxModel {
    pub v: Mat,
    pub w: Mat,
}

pub fn softmax(w: &[f64]) -> Vector {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Vector::from_iterator(e.len(), e.into_iter().map(|x| x / s))
}

impl SoftmaxModel {
    /// Uniform attention and trivial transition.
    pub fn init(mu: &Vector, t: usize) -> Self {
        SoftmaxModel {
            v: crate::geometry::trivial_transition(mu),
            w: Mat::zeros(t, mu.len()),
        }
    }

    pub fn attention(&self) -> Mat {
        let mut a = Mat::zeros(self.w.nrows(), self.w.ncols());
        for k in 0..self.w.ncols() {
            a.set_column(k, &softmax(self.w.column(k).as_slice()));
        }
        a
    }

    fn as_linear(&self) -> ModelParams {
        ModelParams { v: self.v.clone(), a: self.attention() }
    }
}

pub fn softmax_forward(model: &SoftmaxModel, x: &[usize], k: usize) -> Result<Vector> {
    let a = softmax(model.w.column(k).as_slice());
    let n = model.v.nrows();
    if x.len() != a.len() {
        return Err(ScbError::dim("context length", a.len(), x.len()));
    }
    let mut xa = Vector::zeros(n);
    for (t, &tok) in x.iter().enumerate() {
        xa[tok] += a[t];
    }
    Ok(&model.v * xa)
}

pub fn softmax_loss(model: &SoftmaxModel, sample: &Sample) -> Result<f64> {
    let mut r = softmax_forward(model, &sample.x, sample.x_last)?;
    r[sample.x_out] -= 1.0;
    Ok(0.5 * r.norm_squared())
}

/// `(diag(a) - a a^T) (V X)^T r` for the active query column.
pub fn softmax_grad_w(model: &SoftmaxModel, sample: &Sample) -> Result<Vector> {
    let k = sample.x_last;
    let a = softmax(model.w.column(k).as_slice());
    let g = grad_pair(&ModelParams { v: model.v.clone(), a: one_column(&a, k, model.w.ncols()) }, sample)?;
    let u = g.a_col;
    let dot = a.dot(&u);
    Ok(a.component_mul(&u) - &a * dot)
}

fn one_column(a: &Vector, k: usize, n: usize) -> Mat {
    let mut m = Mat::zeros(a.len(), n);
    m.set_column(k, a);
    m
}

/// Mean `V` gradient and mean logit gradient of the softmax model.
pub fn softmax_batch_grads(model: &SoftmaxModel, batch: &[Sample]) -> Result<(Mat, Mat, f64)> {
    if batch.is_empty() {
        return Err(ScbError::Parameter("empty batch".into()));
    }
    let lin = model.as_linear();
    let (t, n) = (model.w.nrows(), model.w.ncols());
    let mut g_v = Mat::zeros(n, n);
    let mut g_w = Mat::zeros(t, n);
    let mut loss = 0.0;
    for s in batch {
        let g = grad_pair(&lin, s)?;
        let a = lin.a.column(s.x_last).into_owned();
        let dot = a.dot(&g.a_col);
        let gw = a.component_mul(&g.a_col) - &a * dot;
        g_v += &g.v;
        let mut col = g_w.column_mut(s.x_last);
        col += &gw;
        loss += g.loss;
    }
    let inv = 1.0 / batch.len() as f64;
    Ok((g_v * inv, g_w * inv, loss * inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_ground_truth, label_distribution, Sampler};
    use crate::geometry::{Dims, GroundTruth};
    use crate::rng::RngSeed;
    use rand::Rng;

    fn small_gt(seed: u64) -> GroundTruth {
        generate_ground_truth(Dims::new(6, 3, 2, 2.0).unwrap(), RngSeed::new(seed), 20_000).unwrap()
    }

    fn random_params<R: Rng>(rng: &mut R, n: usize, t: usize) -> ModelParams {
        ModelParams {
            v: Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)),
            a: Mat::from_fn(t, n, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    /// Dense `V X a` with `X` materialized.
    fn dense_forward(p: &ModelParams, x: &[usize], k: usize) -> Vector {
        let n = p.n();
        let xm = Mat::from_fn(n, x.len(), |i, t| if x[t] == i { 1.0 } else { 0.0 });
        &p.v * (xm * p.a.column(k))
    }

    #[test]
    fn identity_value_with_one_hot_attention_copies_first_token() {
        let mut a = Mat::zeros(4, 3);
        a.row_mut(0).fill(1.0);
        let p = ModelParams { v: Mat::identity(3, 3), a };
        let out = forward(&p, &[2, 0, 1, 1], 1).unwrap();
        assert_eq!(out, Vector::from_vec(vec![0.0, 0.0, 1.0]));
    }

    #[test]
    fn ground_truth_forward_is_label_distribution() {
        let gt = small_gt(2);
        let p = ModelParams::ground_truth(&gt);
        let mut rng = RngSeed::new(1).stream("t");
        let sampler = Sampler::new(&gt).unwrap();
        for _ in 0..20 {
            let s = sampler.sample(&mut rng);
            let f = forward(&p, &s.x, s.x_last).unwrap();
            assert!((f - label_distribution(&gt, &s.x, s.x_last)).amax() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_dense_product() {
        let mut rng = RngSeed::new(3).stream("t");
        for _ in 0..20 {
            let p = random_params(&mut rng, 4, 9);
            let x: Vec<usize> = (0..9).map(|_| rng.random_range(0..4)).collect();
            let k = rng.random_range(0..4);
            let diff = (forward(&p, &x, k).unwrap() - dense_forward(&p, &x, k)).amax();
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn loss_values_at_exact_and_zero_prediction() {
        let mut a = Mat::zeros(3, 2);
        a.row_mut(0).fill(1.0);
        let exact = ModelParams { v: Mat::identity(2, 2), a: a.clone() };
        let s = Sample { x: vec![1, 0, 0], x_last: 0, x_out: 1 };
        assert_eq!(per_sample_loss(&exact, &s).unwrap(), 0.0);
        let zero = ModelParams { v: Mat::zeros(2, 2), a };
        assert_eq!(per_sample_loss(&zero, &s).unwrap(), 0.5);
        let g = grad_pair(&exact, &s).unwrap();
        assert_eq!(g.v.amax(), 0.0);
        assert_eq!(g.a_col.amax(), 0.0);
    }

    #[test]
    fn gradient_of_inactive_columns_is_zero_and_active_column_matches_lookup() {
        let mut rng = RngSeed::new(4).stream("t");
        let p = random_params(&mut rng, 3, 5);
        let s = Sample { x: vec![0, 2, 2, 1, 0], x_last: 1, x_out: 2 };
        let g = grad_pair(&p, &s).unwrap().to_dense();
        assert_eq!(g.a.column(0).amax(), 0.0);
        assert_eq!(g.a.column(2).amax(), 0.0);
        let mut r = forward(&p, &s.x, 1).unwrap();
        r[2] -= 1.0;
        for (t, &tok) in s.x.iter().enumerate() {
            assert!((g.a[(t, 1)] - p.v.column(tok).dot(&r)).abs() < 1e-14);
        }
    }

    #[test]
    fn central_differences_agree_with_gradient() {
        let mut rng = RngSeed::new(5).stream("t");
        let h = 1e-5;
        for _ in 0..10 {
            let p = random_params(&mut rng, 3, 6);
            let s = Sample {
                x: (0..6).map(|_| rng.random_range(0..3)).collect(),
                x_last: rng.random_range(0..3),
                x_out: rng.random_range(0..3),
            };
            let g = grad_pair(&p, &s).unwrap().to_dense();
            let dv = Mat::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let da = Mat::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
            let shift = |e: f64| ModelParams { v: &p.v + &dv * e, a: &p.a + &da * e };
            let fd = (per_sample_loss(&shift(h), &s).unwrap() - per_sample_loss(&shift(-h), &s).unwrap()) / (2.0 * h);
            let an = g.v.dot(&dv) + g.a.dot(&da);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "fd {fd} vs {an}");
        }
    }

    /// Dense projector products, independent of the in-place implementation.
    fn dense_precondition_v(g: &Mat, mu: &Vector) -> Mat {
        let n = mu.len();
        let ones = Mat::from_element(n, n, 1.0 / n as f64);
        let left = Mat::identity(n, n) - ones;
        let inv = Mat::from_diagonal(&mu.map(|m| 1.0 / m));
        let right = Mat::identity(n, n) - mu * mu.transpose() / mu.norm_squared();
        left * g * inv * right
    }

    #[test]
    fn value_preconditioner_matches_dense_projectors() {
        let mut rng = RngSeed::new(6).stream("t");
        let mu = Vector::from_vec(vec![0.2, 0.5, 0.3]);
        for _ in 0..10 {
            let g = Mat::from_fn(3, 3, |_, _| rng.random_range(-2.0..2.0));
            let d = (precondition_v(&g, &mu).unwrap() - dense_precondition_v(&g, &mu)).amax();
            assert!(d <= 1e-13);
        }
        let c = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let g = &mu * c.transpose();
        let d = (precondition_v(&g, &mu).unwrap() - dense_precondition_v(&g, &mu)).amax();
        assert!(d <= 1e-13);
        let out = precondition_v(&g, &mu).unwrap();
        assert!((out.row_sum()).amax() < 1e-13);
        assert!((&out * &mu).amax() < 1e-13);
    }

    #[test]
    fn constant_attention_gradient_is_annihilated() {
        let mu = Vector::from_vec(vec![0.4, 0.6]);
        let g = Mat::from_fn(5, 2, |_, k| 3.0 + k as f64);
        assert_eq!(precondition_a(&g, &mu).unwrap().amax(), 0.0);
    }

    #[test]
    fn zero_mu_entry_is_rejected() {
        let mu = Vector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(precondition_v(&Mat::zeros(2, 2), &mu), Err(ScbError::Parameter(_))));
    }

    #[test]
    fn identical_samples_average_to_single_gradient() {
        let gt = small_gt(7);
        let p = ModelParams::init(&gt);
        let mut rng = RngSeed::new(7).stream("t");
        let s = Sampler::new(&gt).unwrap().sample(&mut rng);
        let batch = vec![s.clone(); 77];
        let b = batch_grads(&p, &batch).unwrap();
        let one = grad_pair(&p, &s).unwrap().to_dense();
        assert!((b.raw.v - one.v).amax() < 1e-14);
        assert!((b.raw.a - one.a).amax() < 1e-14);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let gt = small_gt(7);
        assert!(batch_grads(&ModelParams::init(&gt), &[]).is_err());
    }

    #[test]
    fn batch_order_barely_matters() {
        let gt = small_gt(8);
        let mut rng = RngSeed::new(8).stream("t");
        let p = random_params(&mut rng, 3, 6);
        let sampler = Sampler::new(&gt).unwrap();
        let mut batch: Vec<Sample> = (0..300).map(|_| sampler.sample(&mut rng)).collect();
        let a = batch_grads(&p, &batch).unwrap();
        batch.reverse();
        let b = batch_grads(&p, &batch).unwrap();
        assert!((a.raw.v - b.raw.v).amax() <= 1e-12);
        assert!((a.raw.a - b.raw.a).amax() <= 1e-12);
    }

    #[test]
    fn constant_logits_match_uniform_linear_model() {
        let gt = small_gt(9);
        let sm = SoftmaxModel { v: gt.p.clone(), w: Mat::from_element(6, 3, 0.7) };
        let lin = ModelParams { v: gt.p.clone(), a: crate::geometry::uniform_attention(6, 3) };
        let x = [0, 1, 2, 2, 1, 0];
        for k in 0..3 {
            let d = (softmax_forward(&sm, &x, k).unwrap() - forward(&lin, &x, k).unwrap()).amax();
            assert!(d < 1e-15);
        }
    }

    #[test]
    fn softmax_logit_gradient_matches_finite_differences() {
        let gt = small_gt(10);
        let mut rng = RngSeed::new(10).stream("t");
        let sampler = Sampler::new(&gt).unwrap();
        let h = 1e-5;
        for _ in 0..5 {
            let sm = SoftmaxModel {
                v: Mat::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)),
                w: Mat::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0)),
            };
            let s = sampler.sample(&mut rng);
            let g = softmax_grad_w(&sm, &s).unwrap();
            for t in 0..6 {
                let mut up = sm.clone();
                up.w[(t, s.x_last)] += h;
                let mut dn = sm.clone();
                dn.w[(t, s.x_last)] -= h;
                let fd = (softmax_loss(&up, &s).unwrap() - softmax_loss(&dn, &s).unwrap()) / (2.0 * h);
                assert!((fd - g[t]).abs() < 1e-8, "{fd} vs {}", g[t]);
            }
        }
    }

    #[test]
    fn near_uniform_softmax_jacobian_is_centering_over_t() {
        let t = 100;
        let mut rng = RngSeed::new(11).stream("t");
        let w: Vec<f64> = (0..t).map(|_| rng.random_range(-1e-3..1e-3)).collect();
        let a = softmax(&w);
        let jac = Mat::from_diagonal(&a) - &a * a.transpose();
        let centering = (Mat::identity(t, t) - Mat::from_element(t, t, 1.0 / t as f64)) / t as f64;
        assert!((jac - centering).amax() <= 1.0 / (t * t) as f64);
    }
}
