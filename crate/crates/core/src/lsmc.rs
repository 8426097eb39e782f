//! Least-squares Monte-Carlo solution of the unified BSDE
//! `−dY = g(t, X, Y, Z) dt − Zᵀ dW`, `Y_T = g_f(X_T)`.
//!
//! Backward in time, the explicit targets `Y_t + g(t, X_t, Y_t, Z_t)Δt` are
//! regressed onto `X_{t−Δt}` within the function class of the chosen BSDE.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward_sim::{ControlLaw, TrajectoryBatch};
use crate::func_approx::{fit_linear_rows, fit_quadratic_rows, Fitted, LinearFn, QuadraticFn};
use crate::linalg::{apply_rows, row_dots, SAMPLE_BLOCK};
#[cfg(test)]
use crate::linalg::{dot, mat_t_vec, mat_vec, quad_form};
use crate::lq_model::{control_affine_parts, LqProblem, TimeGrid};

/// Which BSDE is being solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DriverKind {
    /// Value-function BSDE with driver `h`, `φ = V`.
    Value,
    /// Co-state BSDE with driver `∂ₓH`, `φ = ∂ₓV`.
    Costate,
}

impl fmt::Display for DriverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriverKind::Value => f.write_str("value"),
            DriverKind::Costate => f.write_str("costate"),
        }
    }
}

/// Fitted `φ(t, ·)` for every grid index.
#[derive(Debug, Clone, PartialEq)]
pub enum PhiSequence {
    Value(Vec<QuadraticFn>),
    Costate(Vec<LinearFn>),
}

/// Per-run regression and stability indicators.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SolveFlags {
    pub rank_deficient_steps: usize,
    /// Value class only: fits whose `G` came out indefinite.
    pub indefinite_steps: usize,
    /// Grid index at which a non-finite fit aborted the backward pass.
    pub non_finite_at: Option<usize>,
}

impl SolveFlags {
    pub fn unstable(&self) -> bool {
        self.non_finite_at.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproxSolution {
    kind: DriverKind,
    grid: TimeGrid,
    params: PhiSequence,
    flags: SolveFlags,
}

impl ApproxSolution {
    pub fn new(
        kind: DriverKind,
        grid: TimeGrid,
        params: PhiSequence,
        flags: SolveFlags,
    ) -> Result<Self> {
        let len = match &params {
            PhiSequence::Value(v) => {
                if kind != DriverKind::Value {
                    return Err(Error::InvalidArgument(
                        "quadratic parameters need the value kind".into(),
                    ));
                }
                v.len()
            }
            PhiSequence::Costate(v) => {
                if kind != DriverKind::Costate {
                    return Err(Error::InvalidArgument(
                        "linear parameters need the costate kind".into(),
                    ));
                }
                v.len()
            }
        };
        if len != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{len} fitted steps for {} grid points",
                grid.len()
            )));
        }
        Ok(Self {
            kind,
            grid,
            params,
            flags,
        })
    }

    pub fn kind(&self) -> DriverKind {
        self.kind
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn params(&self) -> &PhiSequence {
        &self.params
    }

    pub fn flags(&self) -> &SolveFlags {
        &self.flags
    }

    /// The matrix `G_t` of the fitted class at index `k`.
    pub fn matrix(&self, k: usize) -> &DMatrix<f64> {
        match &self.params {
            PhiSequence::Value(v) => v[k].matrix(),
            PhiSequence::Costate(v) => v[k].matrix(),
        }
    }

    pub fn matrices(&self) -> Vec<DMatrix<f64>> {
        (0..self.grid.len())
            .map(|k| self.matrix(k).clone())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        match &self.params {
            PhiSequence::Value(v) => v.iter().all(QuadraticFn::is_finite),
            PhiSequence::Costate(v) => v.iter().all(LinearFn::is_finite),
        }
    }
}

/// `h(x, u, y, z) = ½xᵀQx − ½zᵀB̃R⁻¹B̃ᵀz − zᵀB̃u` with `u = K_t x`.
pub fn driver_value(
    prob: &LqProblem,
    btilde: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    x: &DVector<f64>,
    _y: f64,
    z: &DVector<f64>,
) -> f64 {
    let u = gain * x;
    let bz = btilde.transpose() * z;
    0.5 * x.dot(&(prob.q() * x)) - 0.5 * bz.dot(&(prob.r_inv() * &bz)) - bz.dot(&u)
}

/// `∂ₓH = Qx + Aᵀy` with `u` held fixed; constant `σ` removes the `z` term.
pub fn driver_costate(
    prob: &LqProblem,
    _gain: &DMatrix<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
    _z: &DMatrix<f64>,
) -> DVector<f64> {
    prob.q() * x + prob.a().transpose() * y
}

/// Matrices reused by the per-sample driver kernels.
pub(crate) struct DriverCache {
    pub q: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
    /// `B̃R⁻¹B̃ᵀ` (value kind only).
    pub p: Option<DMatrix<f64>>,
    /// `B̃K_t` per grid index (value kind only).
    pub w: Vec<DMatrix<f64>>,
    /// `A + BK_t`.
    pub closed: Vec<DMatrix<f64>>,
}

impl DriverCache {
    pub fn new(prob: &LqProblem, law: &ControlLaw, kind: DriverKind) -> Result<Self> {
        let (p, w) = match kind {
            DriverKind::Value => {
                let (_, bt) = control_affine_parts(prob)?;
                let p = &bt * prob.r_inv() * bt.transpose();
                let w = law.gains().iter().map(|k| &bt * k).collect();
                (Some(p), w)
            }
            DriverKind::Costate => (None, Vec::new()),
        };
        Ok(Self {
            q: prob.q().clone(),
            a: prob.a().clone(),
            sigma: prob.sigma().clone(),
            diffusion: prob.diffusion().clone(),
            p,
            w,
            closed: law.closed_loop(prob),
        })
    }

    /// Value driver given `z` at grid index `k`.
    #[cfg(test)]
    pub fn value(&self, k: usize, x: &[f64], z: &[f64], scratch: &mut [f64]) -> f64 {
        let p = self.p.as_ref().expect("value cache");
        mat_vec(&self.w[k], x, scratch);
        0.5 * quad_form(&self.q, x) - 0.5 * quad_form(p, z) - dot(z, scratch)
    }

    /// Co-state driver `Qx + Aᵀy` into `out`.
    #[cfg(test)]
    pub fn costate(&self, x: &[f64], y: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        mat_vec(&self.q, x, out);
        mat_t_vec(&self.a, y, scratch);
        out.iter_mut()
            .zip(scratch.iter())
            .for_each(|(o, s)| *o += s);
    }
}

fn nan_quadratic(n: usize) -> QuadraticFn {
    QuadraticFn::new(DMatrix::from_element(n, n, f64::NAN), f64::NAN)
}

fn nan_linear(n: usize) -> LinearFn {
    LinearFn::new(DMatrix::from_element(n, n, f64::NAN))
}

/// Runs one regression, turning non-finite input or output into `None`.
pub(crate) fn guarded_fit<F>(
    result: Result<Fitted<F>>,
    finite: impl Fn(&F) -> bool,
) -> Result<Option<Fitted<F>>> {
    match result {
        Ok(fit) if finite(&fit.func) => Ok(Some(fit)),
        Ok(_) | Err(Error::NonFinite(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub(crate) fn terminal_value(prob: &LqProblem) -> QuadraticFn {
    QuadraticFn::new(prob.qf().clone(), 0.0)
}

pub(crate) fn terminal_costate(prob: &LqProblem) -> LinearFn {
    LinearFn::new(prob.qf().clone())
}

pub(crate) fn check_inputs(law: &ControlLaw, batch: &TrajectoryBatch) -> Result<()> {
    if law.grid() != batch.grid() {
        return Err(Error::InvalidGrid(
            "control law grid differs from batch grid".into(),
        ));
    }
    if batch.diverged() {
        return Err(Error::Diverged);
    }
    Ok(())
}

/// Solves the BSDE of `kind` by least-squares Monte-Carlo on `batch`.
pub fn lsmc_solve(
    prob: &LqProblem,
    law: &ControlLaw,
    batch: &TrajectoryBatch,
    kind: DriverKind,
) -> Result<ApproxSolution> {
    check_inputs(law, batch)?;
    let cache = DriverCache::new(prob, law, kind)?;
    match kind {
        DriverKind::Value => lsmc_value(prob, &cache, batch),
        DriverKind::Costate => lsmc_costate(prob, &cache, batch),
    }
}

fn lsmc_value(
    prob: &LqProblem,
    cache: &DriverCache,
    batch: &TrajectoryBatch,
) -> Result<ApproxSolution> {
    let grid = batch.grid().clone();
    let steps = grid.steps();
    let dt = grid.dt();
    let n = batch.dim();
    let count = batch.samples();
    let mut params = vec![nan_quadratic(n); steps + 1];
    let mut flags = SolveFlags::default();

    let terminal = terminal_value(prob);
    let mut y = vec![0.0; count];
    let mut z = vec![0.0; count * n];
    refresh_value(
        &terminal,
        &cache.sigma,
        batch.slice(steps),
        &mut y,
        &mut z,
        n,
    );
    params[steps] = terminal;

    let p = cache.p.as_ref().expect("value cache");
    let mut targets = vec![0.0; count];
    for k in (1..=steps).rev() {
        let xs = batch.slice(k);
        targets
            .par_chunks_mut(SAMPLE_BLOCK)
            .zip(y.par_chunks(SAMPLE_BLOCK))
            .zip(
                xs.par_chunks(SAMPLE_BLOCK * n)
                    .zip(z.par_chunks(SAMPLE_BLOCK * n)),
            )
            .for_each(|((t, yb), (x, zb))| {
                let mut qx = vec![0.0; x.len()];
                let mut pz = vec![0.0; x.len()];
                let mut wx = vec![0.0; x.len()];
                apply_rows(&cache.q, 1.0, x, 0.0, &mut qx);
                apply_rows(p, 1.0, zb, 0.0, &mut pz);
                apply_rows(&cache.w[k], 1.0, x, 0.0, &mut wx);
                let terms = row_dots(x, &qx, n)
                    .zip(row_dots(zb, &pz, n))
                    .zip(row_dots(zb, &wx, n));
                for ((ti, yi), ((xqx, zpz), zwx)) in t.iter_mut().zip(yb).zip(terms) {
                    *ti = yi + (0.5 * xqx - 0.5 * zpz - zwx) * dt;
                }
            });
        let prev = batch.slice(k - 1);
        let Some(fit) = guarded_fit(
            fit_quadratic_rows(prev, count, n, &targets),
            QuadraticFn::is_finite,
        )?
        else {
            flags.non_finite_at = Some(k - 1);
            break;
        };
        flags.rank_deficient_steps += usize::from(fit.rank_deficient);
        flags.indefinite_steps += usize::from(fit.func.is_indefinite());
        let phi = fit.func;
        refresh_value(&phi, &cache.sigma, prev, &mut y, &mut z, n);
        params[k - 1] = phi;
    }
    ApproxSolution::new(DriverKind::Value, grid, PhiSequence::Value(params), flags)
}

/// `Yᵢ = φ(Xᵢ)` and `Zᵢ = σᵀ ∇φ(Xᵢ)`.
fn refresh_value(
    phi: &QuadraticFn,
    sigma: &DMatrix<f64>,
    xs: &[f64],
    y: &mut [f64],
    z: &mut [f64],
    n: usize,
) {
    let sg = sigma.transpose() * phi.matrix();
    y.par_chunks_mut(SAMPLE_BLOCK)
        .zip(z.par_chunks_mut(SAMPLE_BLOCK * n))
        .zip(xs.par_chunks(SAMPLE_BLOCK * n))
        .for_each(|((yb, zb), x)| {
            let mut gx = vec![0.0; x.len()];
            apply_rows(phi.matrix(), 1.0, x, 0.0, &mut gx);
            for (yi, xgx) in yb.iter_mut().zip(row_dots(x, &gx, n)) {
                *yi = 0.5 * xgx + phi.offset();
            }
            apply_rows(&sg, 1.0, x, 0.0, zb);
        });
}

fn lsmc_costate(
    prob: &LqProblem,
    cache: &DriverCache,
    batch: &TrajectoryBatch,
) -> Result<ApproxSolution> {
    let grid = batch.grid().clone();
    let steps = grid.steps();
    let dt = grid.dt();
    let n = batch.dim();
    let count = batch.samples();
    let mut params = vec![nan_linear(n); steps + 1];
    let mut flags = SolveFlags::default();

    let terminal = terminal_costate(prob);
    let mut y = vec![0.0; count * n];
    let block = SAMPLE_BLOCK * n;
    let refresh = |phi: &LinearFn, xs: &[f64], y: &mut [f64]| {
        y.par_chunks_mut(block)
            .zip(xs.par_chunks(block))
            .for_each(|(yb, x)| apply_rows(phi.matrix(), 1.0, x, 0.0, yb));
    };
    refresh(&terminal, batch.slice(steps), &mut y);
    params[steps] = terminal;

    let a_t = cache.a.transpose();
    let mut targets = vec![0.0; count * n];
    for k in (1..=steps).rev() {
        let xs = batch.slice(k);
        // Y + (Qx + Aᵀy)Δt
        targets
            .par_chunks_mut(block)
            .zip(y.par_chunks(block))
            .zip(xs.par_chunks(block))
            .for_each(|((t, yb), x)| {
                t.copy_from_slice(yb);
                apply_rows(&cache.q, dt, x, 1.0, t);
                apply_rows(&a_t, dt, yb, 1.0, t);
            });
        let prev = batch.slice(k - 1);
        let Some(fit) = guarded_fit(
            fit_linear_rows(prev, count, n, &targets),
            LinearFn::is_finite,
        )?
        else {
            flags.non_finite_at = Some(k - 1);
            break;
        };
        flags.rank_deficient_steps += usize::from(fit.rank_deficient);
        let phi = fit.func;
        refresh(&phi, prev, &mut y);
        params[k - 1] = phi;
    }
    ApproxSolution::new(
        DriverKind::Costate,
        grid,
        PhiSequence::Costate(params),
        flags,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lq_model::builtin_2d;

    #[test]
    fn value_driver_by_hand() {
        let p = builtin_2d();
        let (_, bt) = control_affine_parts(&p).unwrap();
        let zero_gain = DMatrix::zeros(1, 2);
        let x = DVector::from_column_slice(&[1.0, 2.0]);
        let z0 = DVector::zeros(2);
        assert_eq!(
            driver_value(&p, &bt, &zero_gain, &x, 0.0, &z0),
            0.5 * x.dot(&x)
        );
        let origin = DVector::zeros(2);
        let z = DVector::from_column_slice(&[3.0, -2.0]);
        assert_eq!(driver_value(&p, &bt, &zero_gain, &origin, 0.0, &z), -2.0);
    }

    #[test]
    fn costate_driver_by_hand() {
        let p = builtin_2d();
        let k = DMatrix::zeros(1, 2);
        let z = DMatrix::zeros(2, 2);
        let out = driver_costate(
            &p,
            &k,
            &DVector::from_column_slice(&[1.0, 0.0]),
            &DVector::from_column_slice(&[0.0, 1.0]),
            &z,
        );
        assert!((out - DVector::from_column_slice(&[0.0, -0.1])).norm() < 1e-15);
        let zero = DVector::zeros(2);
        assert_eq!(driver_costate(&p, &k, &zero, &zero, &z).norm(), 0.0);
    }

    #[test]
    fn cache_kernels_match_public_drivers() {
        let p = builtin_2d();
        let grid = TimeGrid::new(4.0, 1.0).unwrap();
        let gain = DMatrix::from_row_slice(1, 2, &[-0.3, -0.8]);
        let law = ControlLaw::new(grid.clone(), vec![gain.clone(); grid.len()]).unwrap();
        let (_, bt) = control_affine_parts(&p).unwrap();
        let cache = DriverCache::new(&p, &law, DriverKind::Value).unwrap();
        let x = [0.4, -1.2];
        let z = [0.7, 0.1];
        let mut scratch = [0.0; 2];
        let fast = cache.value(1, &x, &z, &mut scratch);
        let slow = driver_value(
            &p,
            &bt,
            &gain,
            &DVector::from_column_slice(&x),
            0.0,
            &DVector::from_column_slice(&z),
        );
        assert!((fast - slow).abs() < 1e-15);

        let cache = DriverCache::new(&p, &law, DriverKind::Costate).unwrap();
        let y = [0.3, 0.9];
        let mut out = [0.0; 2];
        cache.costate(&x, &y, &mut out, &mut scratch);
        let slow = driver_costate(
            &p,
            &gain,
            &DVector::from_column_slice(&x),
            &DVector::from_column_slice(&y),
            &DMatrix::zeros(2, 2),
        );
        assert!((DVector::from_column_slice(&out) - slow).norm() < 1e-15);
    }

    #[test]
    fn mismatched_kind_and_params_rejected() {
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        let params = PhiSequence::Costate(vec![LinearFn::new(DMatrix::zeros(2, 2)); 3]);
        assert!(ApproxSolution::new(
            DriverKind::Value,
            grid.clone(),
            params.clone(),
            SolveFlags::default()
        )
        .is_err());
        assert!(
            ApproxSolution::new(DriverKind::Costate, grid, params, SolveFlags::default()).is_ok()
        );
    }
}
