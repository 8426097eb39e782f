//! Time-reversal solution of the unified BSDE.
//!
//! Starting from the forward terminal states, the reversed state SDE
//! `X̌_{t−Δt} = X̌_t − a Δt − b Δt − σΔW̃` is stepped with fresh noise while
//! `Y̌_{t−Δt} = Y̌_t + g Δt + c Δt − Žᵀ ΔW̃` is carried along, and `φ(t−Δt, ·)`
//! is regressed from `(X̌_{t−Δt}, Y̌_{t−Δt})`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward_sim::{standard_normals, state_ok, ControlLaw, TrajectoryBatch};
use crate::func_approx::{fit_linear_rows, fit_quadratic_rows, LinearFn, QuadraticFn};
use crate::linalg::{apply_rows, row_dots, SAMPLE_BLOCK};
use crate::lq_model::LqProblem;
use crate::lsmc::{
    check_inputs, guarded_fit, terminal_costate, terminal_value, ApproxSolution, DriverCache,
    DriverKind, PhiSequence, SolveFlags,
};
use crate::rng::path_rngs;
use crate::score::AffineScore;

/// A function of the BSDE classes seen through value, Jacobian and Hessians.
pub trait BsdeFunction {
    /// `φ(x)` as a vector (length 1 for scalar classes).
    fn value(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Rows are gradients of the output components.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// One Hessian per output component.
    fn hessians(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>>;
}

impl BsdeFunction for QuadraticFn {
    fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.eval(x))
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let g = self.grad(x);
        DMatrix::from_row_slice(1, g.len(), g.as_slice())
    }

    fn hessians(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![self.hess(x)]
    }
}

impl BsdeFunction for LinearFn {
    fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        self.eval(x)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        LinearFn::jacobian(self, x)
    }

    fn hessians(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.hess(x)
    }
}

/// One reversed Euler step with `u = K_t x`.
pub fn reverse_step(
    prob: &LqProblem,
    gain: &DMatrix<f64>,
    score: &AffineScore,
    x: &DVector<f64>,
    dw: &DVector<f64>,
    dt: f64,
) -> DVector<f64> {
    let drift = prob.a() * x + prob.b() * (gain * x);
    x - drift * dt - score.eval(x) * dt - prob.sigma() * dw
}

/// `cᵢ = Tr(D ∂ₓₓφᵢ) − (∂ₓφᵢ)ᵀ b` per output component.
pub fn correction_c<F: BsdeFunction + ?Sized>(
    phi: &F,
    score: &AffineScore,
    diffusion: &DMatrix<f64>,
    x: &DVector<f64>,
) -> DVector<f64> {
    let b = score.eval(x);
    let jac = phi.jacobian(x);
    let hess = phi.hessians(x);
    DVector::from_fn(jac.nrows(), |i, _| {
        (diffusion * &hess[i]).trace() - jac.row(i).dot(&b.transpose())
    })
}

/// Reversed paths recorded for inspection.
#[derive(Debug, Clone)]
pub struct ReversedBatch {
    /// `[K+1]` slices of `N × n` row-major states.
    pub x_rev: Vec<Vec<f64>>,
    /// `[K+1]` slices of `N × dim_Y` row-major values.
    pub y_rev: Vec<Vec<f64>>,
    /// Backward increments used at step `k → k−1`, stored at index `k`
    /// (index 0 is empty).
    pub noise: Vec<Vec<f64>>,
    pub seed_backward: u64,
    pub dim: usize,
    pub dim_y: usize,
}

#[derive(Debug, Clone)]
pub struct TrOutput {
    pub solution: ApproxSolution,
    pub reversed: Option<ReversedBatch>,
}

/// Solves the BSDE of `kind` by time reversal.
///
/// `scores[k]` must be the score fitted at grid index `k` (all of `0..=K`).
pub fn tr_solve(
    prob: &LqProblem,
    law: &ControlLaw,
    batch: &TrajectoryBatch,
    scores: &[AffineScore],
    kind: DriverKind,
    seed_backward: u64,
) -> Result<ApproxSolution> {
    Ok(tr_solve_recorded(prob, law, batch, scores, kind, seed_backward, false)?.solution)
}

enum CurrentPhi {
    Value(QuadraticFn),
    Costate(LinearFn),
}

fn phi_matrix(phi: &CurrentPhi) -> &DMatrix<f64> {
    match phi {
        CurrentPhi::Value(f) => f.matrix(),
        CurrentPhi::Costate(f) => f.matrix(),
    }
}

/// As [`tr_solve`], optionally keeping the reversed paths and noise.
pub fn tr_solve_recorded(
    prob: &LqProblem,
    law: &ControlLaw,
    batch: &TrajectoryBatch,
    scores: &[AffineScore],
    kind: DriverKind,
    seed_backward: u64,
    record: bool,
) -> Result<TrOutput> {
    check_inputs(law, batch)?;
    let grid = batch.grid().clone();
    if scores.len() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for a grid of {} points",
            scores.len(),
            grid.len()
        )));
    }
    let cache = DriverCache::new(prob, law, kind)?;
    let steps = grid.steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let n = batch.dim();
    let count = batch.samples();
    let dim_y = match kind {
        DriverKind::Value => 1,
        DriverKind::Costate => n,
    };

    let mut flags = SolveFlags::default();
    let mut value_params = Vec::new();
    let mut costate_params = Vec::new();
    let mut phi = match kind {
        DriverKind::Value => {
            value_params =
                vec![QuadraticFn::new(DMatrix::from_element(n, n, f64::NAN), f64::NAN); steps + 1];
            let t = terminal_value(prob);
            value_params[steps] = t.clone();
            CurrentPhi::Value(t)
        }
        DriverKind::Costate => {
            costate_params = vec![LinearFn::new(DMatrix::from_element(n, n, f64::NAN)); steps + 1];
            let t = terminal_costate(prob);
            costate_params[steps] = t.clone();
            CurrentPhi::Costate(t)
        }
    };

    let mut x = batch.slice(steps).to_vec();
    let mut y = vec![0.0; count * dim_y];
    match &phi {
        CurrentPhi::Value(f) => y
            .iter_mut()
            .zip(x.chunks(n))
            .for_each(|(yi, xi)| *yi = f.value_at(xi)),
        CurrentPhi::Costate(f) => y
            .chunks_mut(n)
            .zip(x.chunks(n))
            .for_each(|(yi, xi)| f.value_into(xi, yi)),
    }

    let mut rec = record.then(|| ReversedBatch {
        x_rev: vec![Vec::new(); steps + 1],
        y_rev: vec![Vec::new(); steps + 1],
        noise: vec![Vec::new(); steps + 1],
        seed_backward,
        dim: n,
        dim_y,
    });
    if let Some(r) = rec.as_mut() {
        r.x_rev[steps] = x.clone();
        r.y_rev[steps] = y.clone();
    }

    let sigma_t = cache.sigma.transpose();
    let a_t = cache.a.transpose();
    let mut rngs = path_rngs(seed_backward, count);
    let mut x_next = vec![0.0; count * n];
    let mut y_next = vec![0.0; count * dim_y];
    let mut noise = vec![0.0; count * n];

    for k in (1..=steps).rev() {
        let score = &scores[k];
        let a_cl = &cache.closed[k];
        // b(x) = Cx − s with C = D(Σ̂ + εI)⁻¹ and s = C m̂
        let coef = score.coefficient();
        let shift = coef * score.mean();
        // reversed drift a + b is linear in x: (A + BK + C)x − s
        let m_rev = a_cl + coef;
        let block = SAMPLE_BLOCK * n;

        noise
            .par_chunks_mut(block)
            .zip(rngs.par_chunks_mut(SAMPLE_BLOCK))
            .for_each(|(dw, rngs)| {
                dw.copy_from_slice(standard_normals(rngs, n, sqrt_dt).as_slice());
            });

        let q_minus = &cache.q - phi_matrix(&phi) * coef;
        let g_shift = phi_matrix(&phi) * &shift;
        let trace_term = (&cache.diffusion * phi_matrix(&phi)).trace();
        let step = |xn: &mut [f64], yn: &mut [f64], xi: &[f64], yi: &[f64], dw: &[f64]| {
            let mut sdw = vec![0.0; dw.len()];
            apply_rows(&cache.sigma, 1.0, dw, 0.0, &mut sdw);
            // x̌ − (A + BK + C)x̌ Δt + sΔt − σΔW̃
            xn.copy_from_slice(xi);
            apply_rows(&m_rev, -dt, xi, 1.0, xn);
            for (v, s) in xn.iter_mut().zip(shift.iter().cycle()) {
                *v += dt * s;
            }
            for (v, e) in xn.iter_mut().zip(&sdw) {
                *v -= e;
            }
            match &phi {
                CurrentPhi::Value(f) => {
                    let len = xi.len();
                    let mut grad = vec![0.0; len];
                    let mut z = vec![0.0; len];
                    let mut qx = vec![0.0; len];
                    let mut pz = vec![0.0; len];
                    let mut wx = vec![0.0; len];
                    let mut b = vec![0.0; len];
                    apply_rows(f.matrix(), 1.0, xi, 0.0, &mut grad);
                    // z = σᵀ∇φ
                    apply_rows(&sigma_t, 1.0, &grad, 0.0, &mut z);
                    apply_rows(&cache.q, 1.0, xi, 0.0, &mut qx);
                    apply_rows(
                        cache.p.as_ref().expect("value cache"),
                        1.0,
                        &z,
                        0.0,
                        &mut pz,
                    );
                    apply_rows(&cache.w[k], 1.0, xi, 0.0, &mut wx);
                    apply_rows(coef, 1.0, xi, 0.0, &mut b);
                    for (v, s) in b.iter_mut().zip(shift.iter().cycle()) {
                        *v -= s;
                    }
                    let rows = yn
                        .iter_mut()
                        .zip(yi)
                        .zip(row_dots(xi, &qx, n))
                        .zip(row_dots(&z, &pz, n).zip(row_dots(&z, &wx, n)))
                        .zip(row_dots(&grad, &b, n).zip(row_dots(&grad, &sdw, n)));
                    for ((((y_out, y), xqx), (zpz, zwx)), (gb, gsdw)) in rows {
                        let h = 0.5 * xqx - 0.5 * zpz - zwx;
                        let c = trace_term - gb;
                        // Zᵀ ΔW̃ = ∇φᵀ σ ΔW̃
                        *y_out = y + h * dt + c * dt - gsdw;
                    }
                }
                CurrentPhi::Costate(f) => {
                    // ∂ₓH = Qx + Aᵀy and c = −G(Cx − s)
                    yn.copy_from_slice(yi);
                    apply_rows(&q_minus, dt, xi, 1.0, yn);
                    apply_rows(&a_t, dt, yi, 1.0, yn);
                    for (v, s) in yn.iter_mut().zip(g_shift.iter().cycle()) {
                        *v += dt * s;
                    }
                    // Ž ΔW̃ = Gσ ΔW̃
                    apply_rows(f.matrix(), -1.0, &sdw, 1.0, yn);
                }
            }
        };
        x_next
            .par_chunks_mut(block)
            .zip(y_next.par_chunks_mut(SAMPLE_BLOCK * dim_y))
            .zip(x.par_chunks(block).zip(y.par_chunks(SAMPLE_BLOCK * dim_y)))
            .zip(noise.par_chunks(block))
            .for_each(|(((xn, yn), (xi, yi)), dw)| step(xn, yn, xi, yi, dw));
        std::mem::swap(&mut x, &mut x_next);
        std::mem::swap(&mut y, &mut y_next);
        if let Some(r) = rec.as_mut() {
            r.x_rev[k - 1] = x.clone();
            r.y_rev[k - 1] = y.clone();
            r.noise[k] = noise.clone();
        }

        if !x.chunks(n).all(state_ok) {
            flags.non_finite_at = Some(k - 1);
            break;
        }
        let next_phi = match kind {
            DriverKind::Value => {
                match guarded_fit(fit_quadratic_rows(&x, count, n, &y), QuadraticFn::is_finite)? {
                    Some(fit) => {
                        flags.rank_deficient_steps += usize::from(fit.rank_deficient);
                        flags.indefinite_steps += usize::from(fit.func.is_indefinite());
                        value_params[k - 1] = fit.func.clone();
                        Some(CurrentPhi::Value(fit.func))
                    }
                    None => None,
                }
            }
            DriverKind::Costate => {
                match guarded_fit(fit_linear_rows(&x, count, n, &y), LinearFn::is_finite)? {
                    Some(fit) => {
                        flags.rank_deficient_steps += usize::from(fit.rank_deficient);
                        costate_params[k - 1] = fit.func.clone();
                        Some(CurrentPhi::Costate(fit.func))
                    }
                    None => None,
                }
            }
        };
        match next_phi {
            Some(p) => phi = p,
            None => {
                flags.non_finite_at = Some(k - 1);
                break;
            }
        }
    }

    let params = match kind {
        DriverKind::Value => PhiSequence::Value(value_params),
        DriverKind::Costate => PhiSequence::Costate(costate_params),
    };
    let solution = ApproxSolution::new(kind, grid, params, flags)?;
    Ok(TrOutput {
        solution,
        reversed: rec,
    })
}
