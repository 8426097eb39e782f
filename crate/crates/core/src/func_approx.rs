//! Parametric classes for `φ(t, ·)`.
//!
//! * value BSDE: `x ↦ ½xᵀGx + g` with `G` symmetric,
//! * co-state BSDE: `x ↦ Gx`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{least_squares_rows, mat_vec, quad_form, sym_eigenvalues};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFn {
    g: DMatrix<f64>,
    offset: f64,
}

impl QuadraticFn {
    /// Symmetrizes `g` on input.
    pub fn new(g: DMatrix<f64>, offset: f64) -> Self {
        let g = (&g + g.transpose()) * 0.5;
        Self { g, offset }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn is_finite(&self) -> bool {
        self.offset.is_finite() && self.g.iter().all(|v| v.is_finite())
    }

    /// Whether `G` has a negative eigenvalue; the fit does not project.
    pub fn is_indefinite(&self) -> bool {
        sym_eigenvalues(&self.g).first().is_some_and(|v| *v < 0.0)
    }

    #[inline]
    pub fn value_at(&self, x: &[f64]) -> f64 {
        0.5 * quad_form(&self.g, x) + self.offset
    }

    #[inline]
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        mat_vec(&self.g, x, out);
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.value_at(x.as_slice())
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.g * x
    }

    pub fn hess(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.g.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFn {
    g: DMatrix<f64>,
}

impl LinearFn {
    pub fn new(g: DMatrix<f64>) -> Self {
        Self { g }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn is_finite(&self) -> bool {
        self.g.iter().all(|v| v.is_finite())
    }

    #[inline]
    pub fn value_into(&self, x: &[f64], out: &mut [f64]) {
        mat_vec(&self.g, x, out);
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.g * x
    }

    /// Jacobian `∂φᵢ/∂xⱼ`.
    pub fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.g.clone()
    }

    /// One zero Hessian per output component.
    pub fn hess(&self, _x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let n = self.g.ncols();
        vec![DMatrix::zeros(n, n); self.g.nrows()]
    }
}

/// A fitted function plus the rank report of its regression.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted<F> {
    pub func: F,
    pub rank: usize,
    pub rank_deficient: bool,
}

/// Number of regression parameters of the quadratic class.
pub fn quadratic_param_count(n: usize) -> usize {
    n * (n + 1) / 2 + 1
}

/// Features `½xᵢ²` on the diagonal, `xᵢxⱼ` above it, then `1`.
fn quadratic_features(x: &[f64], out: &mut [f64]) {
    let n = x.len();
    let mut c = 0;
    for i in 0..n {
        out[c] = 0.5 * x[i] * x[i];
        c += 1;
        for j in i + 1..n {
            out[c] = x[i] * x[j];
            c += 1;
        }
    }
    out[c] = 1.0;
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} passed to regression")))
    }
}

/// Least-squares fit of the quadratic class on row-major `xs` (`count × n`).
pub(crate) fn fit_quadratic_rows(
    xs: &[f64],
    count: usize,
    n: usize,
    ys: &[f64],
) -> Result<Fitted<QuadraticFn>> {
    let params = quadratic_param_count(n);
    if count < params {
        return Err(Error::TooFewSamples {
            needed: params,
            got: count,
        });
    }
    check_finite(xs, "states")?;
    check_finite(ys, "targets")?;
    let mut design = vec![0.0; count * params];
    for (x, row) in xs.chunks(n).zip(design.chunks_mut(params)) {
        quadratic_features(x, row);
    }
    let ls = least_squares_rows(&design, count, params, ys, 1);
    let mut g = DMatrix::zeros(n, n);
    let mut c = 0;
    for i in 0..n {
        g[(i, i)] = ls.coef[(c, 0)];
        c += 1;
        for j in i + 1..n {
            g[(i, j)] = ls.coef[(c, 0)];
            g[(j, i)] = ls.coef[(c, 0)];
            c += 1;
        }
    }
    let offset = ls.coef[(c, 0)];
    Ok(Fitted {
        func: QuadraticFn { g, offset },
        rank: ls.rank,
        rank_deficient: ls.rank_deficient,
    })
}

/// Least-squares fit of the linear class; `ys` is row-major `count × n`.
pub(crate) fn fit_linear_rows(
    xs: &[f64],
    count: usize,
    n: usize,
    ys: &[f64],
) -> Result<Fitted<LinearFn>> {
    if count < n {
        return Err(Error::TooFewSamples {
            needed: n,
            got: count,
        });
    }
    check_finite(xs, "states")?;
    check_finite(ys, "targets")?;
    let ls = least_squares_rows(xs, count, n, ys, ys.len() / count);
    // coef is n × n_out with column r the coefficients of output r
    Ok(Fitted {
        func: LinearFn {
            g: ls.coef.transpose(),
        },
        rank: ls.rank,
        rank_deficient: ls.rank_deficient,
    })
}

fn rows_of(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Fits `x ↦ ½xᵀGx + g` to `(xs, ys)`; `xs` is `N × n`.
pub fn fit_quadratic(xs: &DMatrix<f64>, ys: &DVector<f64>) -> Result<Fitted<QuadraticFn>> {
    if xs.nrows() != ys.len() {
        return Err(Error::DimensionMismatch(
            "xs and ys sample counts differ".into(),
        ));
    }
    fit_quadratic_rows(&rows_of(xs), xs.nrows(), xs.ncols(), ys.as_slice())
}

/// Fits `x ↦ Gx` to `(xs, ys)`, both `N × n`.
pub fn fit_linear(xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<Fitted<LinearFn>> {
    if xs.nrows() != ys.nrows() {
        return Err(Error::DimensionMismatch(
            "xs and ys sample counts differ".into(),
        ));
    }
    fit_linear_rows(&rows_of(xs), xs.nrows(), xs.ncols(), &rows_of(ys))
}

/// The quadratic feature matrix, exposed for independent checks.
pub fn quadratic_design(xs: &DMatrix<f64>) -> DMatrix<f64> {
    let (count, n) = xs.shape();
    let params = quadratic_param_count(n);
    let mut design = DMatrix::zeros(count, params);
    let mut row = vec![0.0; params];
    for i in 0..count {
        let x: Vec<f64> = xs.row(i).iter().copied().collect();
        quadratic_features(&x, &mut row);
        for (j, v) in row.iter().enumerate() {
            design[(i, j)] = *v;
        }
    }
    design
}
