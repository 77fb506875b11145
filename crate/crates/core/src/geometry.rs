//! Task types and the stationary-weighted matrix geometry.
//!
//! Every matrix here is read column by column: column `k` of `P` is the
//! transition vector out of token `k`, column `k` of `Qmat` (and of `A`) is the
//! attention vector used when the last token is `k`. The weighted inner product
//! `<M1, M2>_mu = sum_k mu_k <M1[:, k], M2[:, k]>` is the geometry in which all
//! projections and distances are measured.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScbError};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Absolute tolerance for the affine constraints on parameters.
pub const CONSTRAINT_TOL: f64 = 1e-9;
/// Tolerance for `P mu = mu`.
pub const STATIONARITY_TOL: f64 = 1e-8;

/// Sequence length, vocabulary size, sparsity and conditioning constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub t: usize,
    pub n: usize,
    pub q: usize,
    pub c: f64,
}

impl Dims {
    pub fn new(t: usize, n: usize, q: usize, c: f64) -> Result<Self> {
        let d = Dims { t, n, q, c };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 1 {
            return Err(ScbError::Parameter("T must be at least 1".into()));
        }
        if self.n < 2 {
            return Err(ScbError::Parameter("N must be at least 2".into()));
        }
        if self.q < 1 || self.q > self.t {
            return Err(ScbError::Parameter(format!(
                "Q = {} must lie in [1, T = {}]",
                self.q, self.t
            )));
        }
        if !(self.c >= 1.0) {
            return Err(ScbError::Parameter(format!("C = {} must be >= 1", self.c)));
        }
        Ok(())
    }

    /// Long-sequence condition `T >= (NQ)^10`. Reported, never enforced.
    pub fn long_sequence_ok(&self) -> bool {
        let nq = (self.n * self.q) as f64;
        (self.t as f64) >= nq.powi(10)
    }
}

/// `Tr(M1 diag(mu) M2^T)`.
pub fn mu_inner(m1: &Mat, m2: &Mat, mu: &Vector) -> Result<f64> {
    if m1.shape() != m2.shape() {
        return Err(ScbError::dim(
            "mu_inner",
            format!("{:?}", m1.shape()),
            format!("{:?}", m2.shape()),
        ));
    }
    if m1.ncols() != mu.len() {
        return Err(ScbError::dim("mu_inner (weights)", m1.ncols(), mu.len()));
    }
    Ok(weighted_dot(m1, m2, mu))
}

/// `||M||_mu^2`.
pub fn mu_norm_sq(m: &Mat, mu: &Vector) -> Result<f64> {
    mu_inner(m, m, mu)
}

/// Unchecked weighted column inner product used on hot paths.
pub(crate) fn weighted_dot(m1: &Mat, m2: &Mat, mu: &Vector) -> f64 {
    debug_assert_eq!(m1.shape(), m2.shape());
    debug_assert_eq!(m1.ncols(), mu.len());
    let rows = m1.nrows();
    let a = m1.as_slice();
    let b = m2.as_slice();
    let mut total = 0.0;
    for (k, &w) in mu.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let col = k * rows..(k + 1) * rows;
        let dot: f64 = a[col.clone()].iter().zip(&b[col]).map(|(x, y)| x * y).sum();
        total += w * dot;
    }
    total
}

pub(crate) fn weighted_norm_sq(m: &Mat, mu: &Vector) -> f64 {
    weighted_dot(m, m, mu)
}

/// `mu 1^T`, the trivial transition.
pub fn trivial_transition(mu: &Vector) -> Mat {
    let n = mu.len();
    Mat::from_fn(n, n, |i, _| mu[i])
}

/// `1_T 1_N^T / T`, uniform attention.
pub fn uniform_attention(t: usize, n: usize) -> Mat {
    Mat::from_element(t, n, 1.0 / t as f64)
}

/// The signal constants `K_P = ||P||_mu^2 - ||mu||^2` and `K_Q = ||Q||_mu^2 - 1/T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConstants {
    pub k_p: f64,
    pub k_q: f64,
    pub mu_norm_sq: f64,
}

/// Sparse contextual bigram task: transition matrix, its stationary
/// distribution and the attention targets.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub dims: Dims,
    pub p: Mat,
    pub mu: Vector,
    pub qmat: Mat,
}

impl GroundTruth {
    /// Builds a task and checks every structural invariant plus the
    /// conditioning and nontrivial-transition requirements.
    pub fn new(dims: Dims, p: Mat, mu: Vector, qmat: Mat) -> Result<Self> {
        let gt = Self::from_parts_unchecked(dims, p, mu, qmat);
        gt.validate()?;
        Ok(gt)
    }

    /// Skips validation. Meant for degenerate fixtures (trivial transitions,
    /// uniform attention targets) that the checks would reject.
    pub fn from_parts_unchecked(dims: Dims, p: Mat, mu: Vector, qmat: Mat) -> Self {
        GroundTruth { dims, p, mu, qmat }
    }

    pub fn t(&self) -> usize {
        self.dims.t
    }

    pub fn n(&self) -> usize {
        self.dims.n
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        self.validate_conditioning()?;
        let tc = self.constants();
        if tc.k_p < tc.mu_norm_sq {
            return Err(ScbError::Validation(format!(
                "nontrivial transition violated: K_P = {:.6} < ||mu||^2 = {:.6}",
                tc.k_p, tc.mu_norm_sq
            )));
        }
        Ok(())
    }

    /// Shapes, stochasticity and stationarity only.
    pub fn validate_structure(&self) -> Result<()> {
        let Dims { t, n, .. } = self.dims;
        self.dims.validate()?;
        if self.p.shape() != (n, n) {
            return Err(ScbError::dim("P", format!("({n}, {n})"), format!("{:?}", self.p.shape())));
        }
        if self.mu.len() != n {
            return Err(ScbError::dim("mu", n, self.mu.len()));
        }
        if self.qmat.shape() != (t, n) {
            return Err(ScbError::dim("Qmat", format!("({t}, {n})"), format!("{:?}", self.qmat.shape())));
        }
        check_column_stochastic(&self.p, "P")?;
        check_probability(self.mu.as_slice(), "mu")?;
        check_column_stochastic(&self.qmat, "Qmat")?;
        let resid = (&self.p * &self.mu - &self.mu).amax();
        if resid > STATIONARITY_TOL {
            return Err(ScbError::Validation(format!(
                "P mu != mu (max residual {resid:e})"
            )));
        }
        Ok(())
    }

    fn validate_conditioning(&self) -> Result<()> {
        let Dims { n, q, c, .. } = self.dims;
        let (lo_mu, hi_mu) = (1.0 / (c * n as f64), c / n as f64);
        let slack = 1e-12;
        for (k, &m) in self.mu.iter().enumerate() {
            if m < lo_mu - slack || m > hi_mu + slack {
                return Err(ScbError::Validation(format!(
                    "mu[{k}] = {m} outside [{lo_mu}, {hi_mu}]"
                )));
            }
        }
        let (lo_q, hi_q) = (1.0 / (c * q as f64), c / q as f64);
        for k in 0..n {
            let col = self.qmat.column(k);
            let nnz = col.iter().filter(|&&v| v != 0.0).count();
            if nnz > q {
                return Err(ScbError::Validation(format!(
                    "column {k} of Qmat has {nnz} nonzeros, more than Q = {q}"
                )));
            }
            for (t, &v) in col.iter().enumerate() {
                if v != 0.0 && (v < lo_q - slack || v > hi_q + slack) {
                    return Err(ScbError::Validation(format!(
                        "Qmat[{t}, {k}] = {v} outside [{lo_q}, {hi_q}]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `K_P`, `K_Q` and `||mu||^2` without any validity check.
    pub fn constants(&self) -> TaskConstants {
        let mu_sq = self.mu.norm_squared();
        TaskConstants {
            k_p: weighted_norm_sq(&self.p, &self.mu) - mu_sq,
            k_q: weighted_norm_sq(&self.qmat, &self.mu) - 1.0 / self.t() as f64,
            mu_norm_sq: mu_sq,
        }
    }

    /// Support of `q^(k)`.
    pub fn support(&self, k: usize) -> Vec<usize> {
        self.qmat
            .column(k)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(t, _)| t)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        self.to_json_with_role(None)
    }

    pub fn to_json_with_role(&self, role: Option<&str>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GroundTruthDoc::from_gt(self, role))?)
    }

    /// Parses and fully re-validates a task document.
    pub fn from_json(s: &str) -> Result<Self> {
        let (gt, _) = Self::from_json_with_role(s)?;
        gt.validate()?;
        Ok(gt)
    }

    /// Parses a document, returning its role tag; only structural checks run
    /// here because pretrained transitions need not satisfy the task bounds.
    pub fn from_json_with_role(s: &str) -> Result<(Self, Option<String>)> {
        let doc: GroundTruthDoc = serde_json::from_str(s)?;
        let role = doc.role.clone();
        let gt = doc.into_gt()?;
        gt.validate_structure()?;
        Ok((gt, role))
    }
}

/// `K_P` and `K_Q` for a task satisfying the nontrivial-transition condition.
pub fn task_constants(gt: &GroundTruth) -> Result<TaskConstants> {
    let tc = gt.constants();
    if tc.k_p < tc.mu_norm_sq {
        return Err(ScbError::Validation(format!(
            "nontrivial transition violated: K_P = {:.6} < ||mu||^2 = {:.6}",
            tc.k_p, tc.mu_norm_sq
        )));
    }
    Ok(tc)
}

fn check_probability(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|&x| !(x >= -CONSTRAINT_TOL)) {
        return Err(ScbError::Validation(format!("{what} has a negative or NaN entry")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > CONSTRAINT_TOL {
        return Err(ScbError::Validation(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn check_column_stochastic(m: &Mat, what: &str) -> Result<()> {
    for (k, col) in m.column_iter().enumerate() {
        check_probability(col.as_slice(), &format!("column {k} of {what}"))?;
    }
    Ok(())
}

pub const GROUND_TRUTH_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GroundTruthDoc {
    version: u32,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "Q")]
    q: usize,
    #[serde(rename = "C")]
    c: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    role: Option<String>,
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    mu: Vec<f64>,
    #[serde(rename = "Qmat_sparse")]
    qmat_sparse: Vec<Vec<(usize, f64)>>,
}

impl GroundTruthDoc {
    fn from_gt(gt: &GroundTruth, role: Option<&str>) -> Self {
        GroundTruthDoc {
            version: GROUND_TRUTH_VERSION,
            t: gt.dims.t,
            n: gt.dims.n,
            q: gt.dims.q,
            c: gt.dims.c,
            role: role.map(str::to_owned),
            p: gt.p.column_iter().map(|c| c.iter().copied().collect()).collect(),
            mu: gt.mu.iter().copied().collect(),
            qmat_sparse: gt
                .qmat
                .column_iter()
                .map(|c| {
                    c.iter()
                        .enumerate()
                        .filter(|(_, &v)| v != 0.0)
                        .map(|(t, &v)| (t, v))
                        .collect()
                })
                .collect(),
        }
    }

    fn into_gt(self) -> Result<GroundTruth> {
        if self.version != GROUND_TRUTH_VERSION {
            return Err(ScbError::Validation(format!(
                "unsupported ground-truth version {}",
                self.version
            )));
        }
        let dims = Dims::new(self.t, self.n, self.q, self.c)?;
        let n = self.n;
        if self.p.len() != n || self.p.iter().any(|c| c.len() != n) {
            return Err(ScbError::dim("P columns", n, self.p.len()));
        }
        if self.qmat_sparse.len() != n {
            return Err(ScbError::dim("Qmat_sparse columns", n, self.qmat_sparse.len()));
        }
        let p = Mat::from_iterator(n, n, self.p.into_iter().flatten());
        let mu = Vector::from_vec(self.mu);
        let mut qmat = Mat::zeros(self.t, n);
        for (k, entries) in self.qmat_sparse.into_iter().enumerate() {
            for (t, v) in entries {
                if t >= self.t {
                    return Err(ScbError::dim("Qmat_sparse index", format!("< {}", self.t), t));
                }
                qmat[(t, k)] = v;
            }
        }
        Ok(GroundTruth::from_parts_unchecked(dims, p, mu, qmat))
    }
}

/// Trainable value matrix `V` (N x N) and attention matrix `A` (T x N).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub v: Mat,
    pub a: Mat,
}

/// Max-norm residuals of the three affine constraints.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConstraintResiduals {
    pub v_col_sum: f64,
    pub v_mu: f64,
    pub a_col_sum: f64,
}

impl ConstraintResiduals {
    pub fn max(&self) -> f64 {
        self.v_col_sum.max(self.v_mu).max(self.a_col_sum)
    }
}

impl ModelParams {
    /// `V = mu 1^T`, `A = 1 1^T / T`.
    pub fn init(gt: &GroundTruth) -> Self {
        ModelParams {
            v: trivial_transition(&gt.mu),
            a: uniform_attention(gt.t(), gt.n()),
        }
    }

    pub fn ground_truth(gt: &GroundTruth) -> Self {
        ModelParams {
            v: gt.p.clone(),
            a: gt.qmat.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.v.nrows()
    }

    pub fn t(&self) -> usize {
        self.a.nrows()
    }

    pub fn residuals(&self, mu: &Vector) -> ConstraintResiduals {
        let v_col_sum = self.v.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max);
        let v_mu = (&self.v * mu - mu).amax();
        let a_col_sum = self.a.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max);
        ConstraintResiduals { v_col_sum, v_mu, a_col_sum }
    }

    pub fn check_invariants(&self, mu: &Vector, tol: f64) -> Result<()> {
        let n = mu.len();
        if self.v.shape() != (n, n) || self.a.ncols() != n {
            return Err(ScbError::dim(
                "ModelParams",
                format!("V ({n}, {n}), A (_, {n})"),
                format!("V {:?}, A {:?}", self.v.shape(), self.a.shape()),
            ));
        }
        let r = self.residuals(mu);
        if r.max() > tol {
            return Err(ScbError::Validation(format!("parameter constraints violated: {r:?}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ParamsDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ParamsDoc = serde_json::from_str(s)?;
        doc.try_into()
    }
}

/// Checkpoint layout: matrices as lists of columns.
#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    #[serde(rename = "V")]
    v: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
}

impl From<&ModelParams> for ParamsDoc {
    fn from(p: &ModelParams) -> Self {
        let cols = |m: &Mat| m.column_iter().map(|c| c.iter().copied().collect()).collect();
        ParamsDoc { v: cols(&p.v), a: cols(&p.a) }
    }
}

impl TryFrom<ParamsDoc> for ModelParams {
    type Error = ScbError;

    fn try_from(doc: ParamsDoc) -> Result<Self> {
        let from_cols = |cols: Vec<Vec<f64>>, what: &'static str| -> Result<Mat> {
            let ncols = cols.len();
            let nrows = cols.first().map_or(0, Vec::len);
            if cols.iter().any(|c| c.len() != nrows) {
                return Err(ScbError::dim(what, "equal column lengths", "ragged"));
            }
            Ok(Mat::from_iterator(nrows, ncols, cols.into_iter().flatten()))
        };
        Ok(ModelParams {
            v: from_cols(doc.v, "V")?,
            a: from_cols(doc.a, "A")?,
        })
    }
}
