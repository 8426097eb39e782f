//! Exact LQ ground truth from the Riccati equation.
//!
//! `−Ġ = GA + AᵀG + Q − GBR⁻¹BᵀG`, `G_T = Q_f` and `−ġ = ½Tr(σσᵀG)`,
//! `g_T = 0`, integrated backward with classical RK4 on the solver grid
//! (each grid step split into `refine` substeps).

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lq_model::{LqProblem, TimeGrid};

/// Default number of RK4 substeps per grid step.
pub const DEFAULT_REFINE: usize = 20;

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    grid: TimeGrid,
    g_mat: Vec<DMatrix<f64>>,
    offset: Vec<f64>,
}

impl RiccatiSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `G_t` at grid index `k`.
    pub fn g(&self, k: usize) -> &DMatrix<f64> {
        &self.g_mat[k]
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.g_mat
    }

    /// Scalar offset `g_t` at grid index `k`.
    pub fn offset(&self, k: usize) -> f64 {
        self.offset[k]
    }

    /// CSV with columns `t`, `G[i][j]` (row-major), `g`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.g_mat[0].nrows();
        let mut header = vec!["t".to_string()];
        for i in 0..n {
            for j in 0..n {
                header.push(format!("G[{i}][{j}]"));
            }
        }
        header.push("g".into());
        writeln!(out, "{}", header.join(","))?;
        for (k, t) in self.grid.times().enumerate() {
            let mut row = vec![format!("{t:e}")];
            let g = &self.g_mat[k];
            for i in 0..n {
                for j in 0..n {
                    row.push(format!("{:e}", g[(i, j)]));
                }
            }
            row.push(format!("{:e}", self.offset[k]));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

struct RiccatiRhs<'a> {
    a: &'a DMatrix<f64>,
    q: &'a DMatrix<f64>,
    s: DMatrix<f64>,
    d: &'a DMatrix<f64>,
}

impl RiccatiRhs<'_> {
    /// Derivative in reversed time `s = T − t`.
    fn eval(&self, g: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
        let ga = g * self.a;
        let dg = &ga + ga.transpose() + self.q - g * &self.s * g;
        let doff = 0.5 * (self.d * g).trace();
        (dg, doff)
    }
}

/// Integrates the Riccati system backward over `grid`.
pub fn solve_riccati(prob: &LqProblem, grid: &TimeGrid, refine: usize) -> Result<RiccatiSolution> {
    if refine == 0 {
        return Err(Error::InvalidArgument("refine must be at least 1".into()));
    }
    let rhs = RiccatiRhs {
        a: prob.a(),
        q: prob.q(),
        s: prob.b() * prob.r_inv() * prob.b().transpose(),
        d: prob.diffusion(),
    };
    let steps = grid.steps();
    let h = grid.dt() / refine as f64;
    let mut g_mat = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut offset = vec![0.0; steps + 1];
    let mut g = prob.qf().clone();
    let mut off = 0.0;
    g_mat[steps] = g.clone();
    offset[steps] = 0.0;
    for k in (0..steps).rev() {
        for _ in 0..refine {
            let (k1, o1) = rhs.eval(&g);
            let (k2, o2) = rhs.eval(&(&g + &k1 * (0.5 * h)));
            let (k3, o3) = rhs.eval(&(&g + &k2 * (0.5 * h)));
            let (k4, o4) = rhs.eval(&(&g + &k3 * h));
            g += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            off += (o1 + 2.0 * o2 + 2.0 * o3 + o4) * (h / 6.0);
            g = (&g + g.transpose()) * 0.5;
        }
        if !g.iter().all(|v| v.is_finite()) || !off.is_finite() {
            return Err(Error::NonFinite(format!(
                "Riccati integration at grid index {k}"
            )));
        }
        g_mat[k] = g.clone();
        offset[k] = off;
    }
    Ok(RiccatiSolution {
        grid: grid.clone(),
        g_mat,
        offset,
    })
}

/// `K_t = −R⁻¹BᵀG_t`.
pub fn optimal_gain(prob: &LqProblem, sol: &RiccatiSolution, k: usize) -> DMatrix<f64> {
    -(prob.r_inv() * prob.b().transpose() * sol.g(k))
}

/// `½xᵀG_t x + g_t`.
pub fn exact_value(sol: &RiccatiSolution, k: usize, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(sol.g(k) * x)) + sol.offset(k)
}

/// `G_t x`.
pub fn exact_costate(sol: &RiccatiSolution, k: usize, x: &DVector<f64>) -> DVector<f64> {
    sol.g(k) * x
}

/// `E[V(0, X₀)] = ½m₀ᵀG₀m₀ + ½Tr(Σ₀G₀) + g₀`.
pub fn optimal_expected_cost(prob: &LqProblem, sol: &RiccatiSolution) -> f64 {
    let g0 = sol.g(0);
    let m0 = prob.m0();
    0.5 * m0.dot(&(g0 * m0)) + 0.5 * (prob.sigma0() * g0).trace() + sol.offset(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigenvalues;
    use crate::lq_model::{builtin_2d, LqProblem};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    /// A=0, B=σ=R=Q_f=1, Q=0, T=1: G_t = 1/(2−t), g₀ = ½ln2.
    pub(crate) fn scalar_problem(m0: f64, s0: f64) -> LqProblem {
        LqProblem::unvalidated(
            scalar(0.0),
            scalar(1.0),
            scalar(1.0),
            scalar(0.0),
            scalar(1.0),
            scalar(1.0),
            DVector::from_element(1, m0),
            scalar(s0),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn scalar_closed_form() {
        let p = scalar_problem(0.0, 0.0);
        let grid = TimeGrid::new(1.0, 1e-3).unwrap();
        let sol = solve_riccati(&p, &grid, 10).unwrap();
        assert!((sol.g(0)[(0, 0)] - 0.5).abs() < 1e-6);
        assert!((sol.offset(0) - 0.5 * 2f64.ln()).abs() < 1e-5);
        for k in [0, 250, 500, 999, 1000] {
            let t = grid.time(k);
            assert!((sol.g(k)[(0, 0)] - 1.0 / (2.0 - t)).abs() < 1e-10);
        }
        assert!((optimal_gain(&p, &sol, 0)[(0, 0)] + 0.5).abs() < 1e-6);
        let v = exact_value(&sol, 0, &DVector::from_element(1, 2.0));
        assert!((v - (1.0 + 0.5 * 2f64.ln())).abs() < 1e-5);
    }

    #[test]
    fn rk4_fourth_order() {
        let p = scalar_problem(0.0, 0.0);
        let grid = TimeGrid::new(1.0, 0.25).unwrap();
        let e1 = (solve_riccati(&p, &grid, 1).unwrap().g(0)[(0, 0)] - 0.5).abs();
        let e2 = (solve_riccati(&p, &grid, 2).unwrap().g(0)[(0, 0)] - 0.5).abs();
        let ratio = e1 / e2;
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_costs_stay_zero() {
        let p = LqProblem::unvalidated(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.1]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            scalar(1.0),
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let sol = solve_riccati(&p, &grid, 4).unwrap();
        for k in 0..grid.len() {
            assert_eq!(sol.g(k).norm(), 0.0);
            assert_eq!(sol.offset(k), 0.0);
        }
    }

    #[test]
    fn terminal_data_and_symmetry() {
        let p = builtin_2d();
        let grid = TimeGrid::new(4.0, 0.02).unwrap();
        let sol = solve_riccati(&p, &grid, DEFAULT_REFINE).unwrap();
        assert_eq!(sol.g(200), p.qf());
        assert_eq!(sol.offset(200), 0.0);
        for k in 0..grid.len() {
            let g = sol.g(k);
            assert_eq!((g - g.transpose()).norm(), 0.0);
            assert!(sym_eigenvalues(g)[0] >= -1e-10);
        }
        let kt = optimal_gain(&p, &sol, 200);
        assert_eq!(kt, DMatrix::from_row_slice(1, 2, &[-0.0, -1.0]));
        let x = DVector::from_column_slice(&[1.0, 1.0]);
        assert_eq!(exact_value(&sol, 200, &x), 1.0);
        assert_eq!(exact_costate(&sol, 200, &x), x);
        let zero = DVector::zeros(2);
        assert_eq!(exact_value(&sol, 10, &zero), sol.offset(10));
        assert_eq!(exact_costate(&sol, 10, &zero).norm(), 0.0);
    }

    #[test]
    fn expected_cost_closed_form() {
        let grid = TimeGrid::new(1.0, 1e-3).unwrap();
        let half_ln2 = 0.5 * 2f64.ln();
        let sol = solve_riccati(&scalar_problem(1.0, 0.0), &grid, 10).unwrap();
        assert!(
            (optimal_expected_cost(&scalar_problem(1.0, 0.0), &sol) - (0.25 + half_ln2)).abs()
                < 1e-5
        );
        assert!(
            (optimal_expected_cost(&scalar_problem(0.0, 1.0), &sol) - (0.25 + half_ln2)).abs()
                < 1e-5
        );
        assert_eq!(
            optimal_expected_cost(&scalar_problem(0.0, 0.0), &sol),
            sol.offset(0)
        );
    }

    #[test]
    fn csv_layout() {
        let p = builtin_2d();
        let grid = TimeGrid::new(4.0, 1.0).unwrap();
        let sol = solve_riccati(&p, &grid, 4).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,G[0][0],G[0][1],G[1][0],G[1][1],g");
        assert_eq!(lines.len(), 6);
        assert!(lines[5].starts_with("4e0,1e0,0e0,0e0,1e0,0e0"));
    }
}
