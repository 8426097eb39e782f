//! Affine score (Föllmer drift) model `b(x) = D(Σ̂ + εI)⁻¹(x − m̂)`.
//!
//! For Gaussian marginals the score is affine and the empirical minimiser of
//! the score-matching objective over affine fields is given in closed form by
//! the sample mean and covariance. That closed form is what the solver uses;
//! [`score_matching_objective`] exists to check it.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward_sim::TrajectoryBatch;
use crate::linalg::{from_rows, lane_dot, mat_vec, sym_eigenvalues};

/// Condition-number ceiling for `Σ̂ + εI`.
pub const MAX_CONDITION: f64 = 1e12;

/// Diagonal regularisation of the empirical covariance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Jitter {
    #[default]
    None,
    Absolute(f64),
    /// `ε = 10⁻⁹ Tr(Σ̂) / n`.
    TraceRelative,
}

impl Jitter {
    fn resolve(self, cov: &DMatrix<f64>) -> f64 {
        match self {
            Jitter::None => 0.0,
            Jitter::Absolute(eps) => eps,
            Jitter::TraceRelative => 1e-9 * cov.trace() / cov.nrows() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineScore {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    diffusion: DMatrix<f64>,
    jitter: f64,
    // D(Σ̂ + εI)⁻¹
    coef: DMatrix<f64>,
}

impl AffineScore {
    /// Score of `N(mean, cov)` under diffusion `D`; checks conditioning.
    pub fn from_moments(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        diffusion: DMatrix<f64>,
        jitter: f64,
    ) -> Result<Self> {
        let n = mean.len();
        if cov.shape() != (n, n) || diffusion.shape() != (n, n) {
            return Err(Error::DimensionMismatch(
                "score moments and diffusion must agree".into(),
            ));
        }
        if jitter < 0.0 || !jitter.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "jitter must be nonnegative, got {jitter}"
            )));
        }
        let regular = &cov + DMatrix::identity(n, n) * jitter;
        let ev = sym_eigenvalues(&regular);
        let (min, max) = (ev[0], ev[n - 1]);
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !condition.is_finite() || condition > MAX_CONDITION {
            return Err(Error::SingularCovariance { condition });
        }
        let precision = regular
            .cholesky()
            .ok_or(Error::SingularCovariance { condition })?
            .inverse();
        let coef = &diffusion * precision;
        Ok(Self {
            mean,
            cov,
            diffusion,
            jitter,
            coef,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn diffusion(&self) -> &DMatrix<f64> {
        &self.diffusion
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Matrix coefficient `D(Σ̂ + εI)⁻¹`, also the Jacobian of the field.
    pub fn coefficient(&self) -> &DMatrix<f64> {
        &self.coef
    }

    /// Writes `b(x)` into `out`.
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let centered: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, m)| a - m).collect();
        mat_vec(&self.coef, &centered, out);
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        self.eval_into(x.as_slice(), out.as_mut_slice());
        out
    }
}

/// Empirical moment fit from an `N × n` sample matrix (covariance with 1/N).
pub fn fit_affine_score(
    samples: &DMatrix<f64>,
    diffusion: &DMatrix<f64>,
    jitter: Jitter,
) -> Result<AffineScore> {
    let (count, n) = samples.shape();
    let flat: Vec<f64> = samples
        .row_iter()
        .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
        .collect();
    fit_rows(&flat, count, n, diffusion, jitter)
}

fn fit_rows(
    flat: &[f64],
    count: usize,
    n: usize,
    diffusion: &DMatrix<f64>,
    jitter: Jitter,
) -> Result<AffineScore> {
    if count < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: count,
        });
    }
    if !flat.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("score samples".into()));
    }
    let inv_n = 1.0 / count as f64;
    let mut cols = from_rows(flat, count, n);
    let mut mean = DVector::zeros(n);
    for (j, mut col) in cols.column_iter_mut().enumerate() {
        mean[j] = col.iter().sum::<f64>() * inv_n;
        col.iter_mut().for_each(|v| *v -= mean[j]);
    }
    let data = cols.as_slice();
    let col = |j: usize| &data[j * count..(j + 1) * count];
    let mut cov = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = lane_dot(col(i), col(j)) * inv_n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eps = jitter.resolve(&cov);
    AffineScore::from_moments(mean, cov, diffusion.clone(), eps)
}

/// Fits a score at every grid index `0..=K` of a batch.
pub fn fit_scores(
    batch: &TrajectoryBatch,
    diffusion: &DMatrix<f64>,
    jitter: Jitter,
) -> Result<Vec<AffineScore>> {
    (0..batch.grid().len())
        .into_par_iter()
        .map(|k| {
            fit_rows(
                batch.slice(k),
                batch.samples(),
                batch.dim(),
                diffusion,
                jitter,
            )
        })
        .collect()
}

/// A differentiable vector field `ℝⁿ → ℝⁿ`.
pub trait VectorField {
    fn value(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

impl VectorField for AffineScore {
    fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        self.eval(x)
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.coef.clone()
    }
}

/// `x ↦ Mx + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl VectorField for AffineField {
    fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x + &self.offset
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

impl From<&AffineScore> for AffineField {
    fn from(s: &AffineScore) -> Self {
        let offset = -(s.coefficient() * s.mean());
        Self {
            matrix: s.coefficient().clone(),
            offset,
        }
    }
}

/// Sign in front of the trace term of the score-matching objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceSign {
    /// `½‖b‖² − Tr(D∂b)`: minimised over affine fields by `DΣ̂⁻¹(x − m̂)`.
    Minus,
    /// `½‖b‖² + Tr(D∂b)`: minimised by the negated field.
    Plus,
}

/// `(1/N) Σᵢ [½‖b(Xᵢ)‖² ± Tr(D ∂ₓb(Xᵢ))]` over the rows of `samples`.
pub fn score_matching_objective<F: VectorField + ?Sized>(
    field: &F,
    samples: &DMatrix<f64>,
    diffusion: &DMatrix<f64>,
    sign: TraceSign,
) -> f64 {
    let s = match sign {
        TraceSign::Minus => -1.0,
        TraceSign::Plus => 1.0,
    };
    let total: f64 = samples
        .row_iter()
        .map(|row| {
            let x = row.transpose();
            let b = field.value(&x);
            0.5 * b.norm_squared() + s * (diffusion * field.jacobian(&x)).trace()
        })
        .sum();
    total / samples.nrows() as f64
}
