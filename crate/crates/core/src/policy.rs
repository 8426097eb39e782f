//! Policy iteration around the BSDE solvers and the MSE criterion.
//!
//! Each iteration simulates the current feedback law, solves one BSDE, and
//! turns the fitted `G_t` into the next gain `K_t = −R⁻¹BᵀG_t`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_sim::{estimate_cost, simulate_forward, ControlLaw, CostEstimate};
use crate::func_approx::quadratic_param_count;
use crate::lq_model::{LqProblem, TimeGrid};
use crate::lsmc::{lsmc_solve, ApproxSolution, DriverKind};
use crate::riccati::RiccatiSolution;
use crate::rng::{derive_seed, tags};
use crate::score::{fit_scores, Jitter};
use crate::tr::tr_solve;

/// Solver × BSDE combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ls-v")]
    LsV,
    #[serde(rename = "ls-c")]
    LsC,
    #[serde(rename = "tr-v")]
    TrV,
    #[serde(rename = "tr-c")]
    TrC,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::LsV, Method::LsC, Method::TrV, Method::TrC];

    pub fn kind(self) -> DriverKind {
        match self {
            Method::LsV | Method::TrV => DriverKind::Value,
            Method::LsC | Method::TrC => DriverKind::Costate,
        }
    }

    pub fn uses_time_reversal(self) -> bool {
        matches!(self, Method::TrV | Method::TrC)
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::LsV => "LS-V",
            Method::LsC => "LS-C",
            Method::TrV => "TR-V",
            Method::TrC => "TR-C",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ls-v" | "lsv" => Ok(Method::LsV),
            "ls-c" | "lsc" => Ok(Method::LsC),
            "tr-v" | "trv" => Ok(Method::TrV),
            "tr-c" | "trc" => Ok(Method::TrC),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// `K_t = −R⁻¹BᵀG_t` for every fitted `G_t`.
///
/// For the value class this is `−R⁻¹B̃ᵀσᵀG_t` with `B̃ = σ⁻¹B`; for the
/// co-state class it is the Hamiltonian minimiser at `y = G_t x`. Both are
/// evaluated with the same expression.
pub fn extract_gain(prob: &LqProblem, approx: &ApproxSolution) -> ControlLaw {
    let gains = gains_from_matrices(prob, &approx.matrices());
    ControlLaw::new(approx.grid().clone(), gains).expect("one gain per grid point")
}

pub fn gains_from_matrices(prob: &LqProblem, matrices: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let lead = -(prob.r_inv() * prob.b().transpose());
    matrices.iter().map(|g| &lead * g).collect()
}

/// `(1/(T n²)) Σ_{k<K} ‖G_k − G*_k‖²_F Δt`.
pub fn mse_vs_oracle(approx: &ApproxSolution, oracle: &RiccatiSolution) -> Result<f64> {
    mse_of_matrices(&approx.matrices(), approx.grid(), oracle)
}

pub fn mse_of_matrices(
    matrices: &[DMatrix<f64>],
    grid: &TimeGrid,
    oracle: &RiccatiSolution,
) -> Result<f64> {
    if grid != oracle.grid() || matrices.len() != grid.len() {
        return Err(Error::InvalidGrid(
            "approximation and oracle grids differ".into(),
        ));
    }
    let n = matrices[0].nrows() as f64;
    let mut total = 0.0;
    for (k, g) in matrices.iter().enumerate().take(grid.steps()) {
        total += (g - oracle.g(k)).norm_squared();
    }
    let mse = total * grid.dt() / (grid.horizon() * n * n);
    if mse.is_finite() {
        Ok(mse)
    } else {
        Err(Error::NonFinite(
            "approximation carries non-finite parameters".into(),
        ))
    }
}

/// Settings of one policy-iteration run.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub samples: usize,
    pub grid: TimeGrid,
    pub iters: usize,
    pub seed: u64,
    pub jitter: Jitter,
    /// Stop once successive gains differ by less than this (max Frobenius norm).
    pub tolerance: Option<f64>,
    pub record_gains: bool,
    /// End the run at the first unstable iteration.
    pub halt_on_instability: bool,
}

impl PolicyConfig {
    pub fn new(samples: usize, grid: TimeGrid, iters: usize, seed: u64) -> Self {
        Self {
            samples,
            grid,
            iters,
            seed,
            jitter: Jitter::None,
            tolerance: None,
            record_gains: false,
            halt_on_instability: false,
        }
    }
}

/// One policy-iteration step.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iter: usize,
    /// Cost of the law produced by this iteration (evaluated on a fresh batch).
    pub cost: CostEstimate,
    pub mse: Option<f64>,
    pub unstable: bool,
    pub rank_deficient_steps: usize,
    pub indefinite_steps: usize,
    pub gains: Option<ControlLaw>,
}

#[derive(Debug, Clone)]
pub struct IterationHistory {
    pub method: Method,
    pub config: PolicyConfig,
    /// Cost of the initial zero law.
    pub initial_cost: CostEstimate,
    pub records: Vec<IterationRecord>,
    pub final_solution: Option<ApproxSolution>,
    pub final_law: ControlLaw,
    /// Iteration at which diverging states aborted the run.
    pub aborted_at: Option<usize>,
    pub early_stopped: bool,
}

impl IterationHistory {
    /// Whether any iteration was flagged unstable.
    pub fn unstable(&self) -> bool {
        self.aborted_at.is_some() || self.records.iter().any(|r| r.unstable)
    }

    /// MSE of the last iteration when the run stayed stable.
    pub fn final_mse(&self) -> Option<f64> {
        if self.unstable() {
            None
        } else {
            self.records.last().and_then(|r| r.mse)
        }
    }

    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost.mean).collect()
    }

    /// CSV with columns `iter,cost,mse,unstable_flag`; row 0 is the initial law.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iter,cost,mse,unstable_flag")?;
        writeln!(out, "0,{:e},NaN,0", self.initial_cost.mean)?;
        for r in &self.records {
            let mse = r.mse.map_or("NaN".to_string(), |m| format!("{m:e}"));
            writeln!(
                out,
                "{},{:e},{},{}",
                r.iter,
                r.cost.mean,
                mse,
                u8::from(r.unstable)
            )?;
        }
        Ok(())
    }
}

fn forward_seed(master: u64, iter: usize) -> u64 {
    derive_seed(master, tags::FORWARD, iter as u64)
}

fn backward_seed(master: u64, iter: usize) -> u64 {
    derive_seed(master, tags::BACKWARD, iter as u64)
}

/// Minimum sample count the method's regressions need.
pub fn min_samples(method: Method, n: usize) -> usize {
    match method.kind() {
        DriverKind::Value => quadratic_param_count(n),
        DriverKind::Costate => n.max(2),
    }
}

fn solve_once(
    prob: &LqProblem,
    method: Method,
    law: &ControlLaw,
    cfg: &PolicyConfig,
    iter: usize,
) -> Result<ApproxSolution> {
    let batch = simulate_forward(
        prob,
        law,
        cfg.samples,
        &cfg.grid,
        forward_seed(cfg.seed, iter),
    )?;
    if batch.diverged() {
        return Err(Error::Diverged);
    }
    if method.uses_time_reversal() {
        let scores = fit_scores(&batch, prob.diffusion(), cfg.jitter)?;
        tr_solve(
            prob,
            law,
            &batch,
            &scores,
            method.kind(),
            backward_seed(cfg.seed, iter),
        )
    } else {
        lsmc_solve(prob, law, &batch, method.kind())
    }
}

/// Runs `cfg.iters` rounds of policy iteration from the zero law.
///
/// Iteration `i` simulates the law of iteration `i − 1` with forward seed
/// `i`; the cost of the law it produces is measured on the batch of
/// iteration `i + 1`. Solver failures keep the previous law and flag the
/// iteration; diverging states abort the run.
pub fn run_policy_iteration(
    prob: &LqProblem,
    method: Method,
    cfg: &PolicyConfig,
    oracle: Option<&RiccatiSolution>,
) -> Result<IterationHistory> {
    if cfg.iters == 0 {
        return Err(Error::Config("iters must be at least 1".into()));
    }
    let needed = min_samples(method, prob.state_dim());
    if cfg.samples < needed {
        return Err(Error::TooFewSamples {
            needed,
            got: cfg.samples,
        });
    }
    let grid = &cfg.grid;
    let mut law = ControlLaw::zero(prob, grid);
    let mut records: Vec<IterationRecord> = Vec::with_capacity(cfg.iters);
    let mut final_solution = None;
    let mut aborted_at = None;
    let mut early_stopped = false;
    let mut initial_cost = None;

    for iter in 1..=cfg.iters {
        let batch = simulate_forward(prob, &law, cfg.samples, grid, forward_seed(cfg.seed, iter))?;
        let cost = estimate_cost(prob, &law, &batch)?;
        match records.last_mut() {
            Some(prev) => prev.cost = cost,
            None => initial_cost = Some(cost),
        }
        if batch.diverged() {
            aborted_at = Some(iter);
            if let Some(prev) = records.last_mut() {
                prev.unstable = true;
            }
            break;
        }

        let solved = if method.uses_time_reversal() {
            fit_scores(&batch, prob.diffusion(), cfg.jitter).and_then(|scores| {
                tr_solve(
                    prob,
                    &law,
                    &batch,
                    &scores,
                    method.kind(),
                    backward_seed(cfg.seed, iter),
                )
            })
        } else {
            lsmc_solve(prob, &law, &batch, method.kind())
        };

        let mut record = IterationRecord {
            iter,
            cost: CostEstimate {
                mean: f64::NAN,
                std_error: f64::NAN,
                diverged: false,
            },
            mse: None,
            unstable: false,
            rank_deficient_steps: 0,
            indefinite_steps: 0,
            gains: None,
        };
        match solved {
            Ok(approx) => {
                record.rank_deficient_steps = approx.flags().rank_deficient_steps;
                record.indefinite_steps = approx.flags().indefinite_steps;
                let next = extract_gain(prob, &approx);
                if approx.flags().unstable() || !approx.is_finite() || !next.is_finite() {
                    record.unstable = true;
                } else {
                    record.mse = oracle.map(|o| mse_vs_oracle(&approx, o)).transpose()?;
                    let change = law
                        .gains()
                        .iter()
                        .zip(next.gains())
                        .map(|(a, b)| (a - b).norm())
                        .fold(0.0, f64::max);
                    law = next;
                    final_solution = Some(approx);
                    if cfg.tolerance.is_some_and(|tol| change < tol) {
                        early_stopped = true;
                    }
                }
            }
            Err(Error::SingularCovariance { .. } | Error::NonFinite(_) | Error::Diverged) => {
                record.unstable = true
            }
            Err(e) => return Err(e),
        }
        if cfg.record_gains {
            record.gains = Some(law.clone());
        }
        let halt = record.unstable && cfg.halt_on_instability;
        records.push(record);
        if early_stopped || halt {
            break;
        }
    }

    if aborted_at.is_none() {
        // cost of the final law
        let iter = records.len() + 1;
        let batch = simulate_forward(prob, &law, cfg.samples, grid, forward_seed(cfg.seed, iter))?;
        let cost = estimate_cost(prob, &law, &batch)?;
        if let Some(last) = records.last_mut() {
            last.cost = cost;
            if batch.diverged() {
                last.unstable = true;
                aborted_at = Some(iter);
            }
        }
    }

    Ok(IterationHistory {
        method,
        config: cfg.clone(),
        initial_cost: initial_cost.expect("at least one iteration ran"),
        records,
        final_solution,
        final_law: law,
        aborted_at,
        early_stopped,
    })
}

#[doc(hidden)]
pub fn solve_single_iteration(
    prob: &LqProblem,
    method: Method,
    law: &ControlLaw,
    cfg: &PolicyConfig,
    iter: usize,
) -> Result<ApproxSolution> {
    solve_once(prob, method, law, cfg, iter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::func_approx::{LinearFn, QuadraticFn};
    use crate::lq_model::builtin_2d;
    use crate::lq_model::control_affine_parts;
    use crate::lsmc::{PhiSequence, SolveFlags};
    use crate::riccati::{optimal_gain, solve_riccati, DEFAULT_REFINE};

    fn grid() -> TimeGrid {
        TimeGrid::new(4.0, 0.02).unwrap()
    }

    #[test]
    fn method_parsing_and_labels() {
        for m in Method::ALL {
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
        assert!("xx".parse::<Method>().is_err());
        assert_eq!(serde_json::to_string(&Method::TrC).unwrap(), "\"tr-c\"");
    }

    #[test]
    fn oracle_matrices_give_oracle_gains() {
        let p = builtin_2d();
        let g = grid();
        let sol = solve_riccati(&p, &g, DEFAULT_REFINE).unwrap();
        let params = PhiSequence::Value(
            sol.matrices()
                .iter()
                .map(|m| QuadraticFn::new(m.clone(), 0.0))
                .collect(),
        );
        let approx =
            ApproxSolution::new(DriverKind::Value, g.clone(), params, SolveFlags::default())
                .unwrap();
        let law = extract_gain(&p, &approx);
        for k in 0..g.len() {
            assert!((law.gain(k) - optimal_gain(&p, &sol, k)).norm() < 1e-12);
        }
        assert_eq!(mse_vs_oracle(&approx, &sol).unwrap(), 0.0);
    }

    #[test]
    fn value_and_costate_extraction_agree_bitwise() {
        let p = builtin_2d();
        let g = grid();
        let mats: Vec<_> = (0..g.len())
            .map(|k| DMatrix::from_row_slice(2, 2, &[1.0 + k as f64 * 0.01, 0.2, 0.2, 0.7]))
            .collect();
        let v = ApproxSolution::new(
            DriverKind::Value,
            g.clone(),
            PhiSequence::Value(
                mats.iter()
                    .map(|m| QuadraticFn::new(m.clone(), 0.3))
                    .collect(),
            ),
            SolveFlags::default(),
        )
        .unwrap();
        let c = ApproxSolution::new(
            DriverKind::Costate,
            g.clone(),
            PhiSequence::Costate(mats.iter().map(|m| LinearFn::new(m.clone())).collect()),
            SolveFlags::default(),
        )
        .unwrap();
        assert_eq!(extract_gain(&p, &v), extract_gain(&p, &c));

        // literal value-class formula −R⁻¹B̃ᵀσᵀG
        let (_, bt) = control_affine_parts(&p).unwrap();
        let literal = -(p.r_inv() * bt.transpose() * p.sigma().transpose() * &mats[3]);
        assert!((literal - extract_gain(&p, &v).gain(3)).norm() < 1e-12);
    }

    #[test]
    fn hand_gain() {
        let p = builtin_2d();
        let gains =
            gains_from_matrices(&p, &[DMatrix::from_row_slice(2, 2, &[3.0, 0.4, 0.4, 2.5])]);
        assert_eq!(gains[0], DMatrix::from_row_slice(1, 2, &[-0.4, -2.5]));
        let zero = gains_from_matrices(&p, &[DMatrix::zeros(2, 2)]);
        assert_eq!(zero[0].norm(), 0.0);
    }

    #[test]
    fn mse_constant_offset() {
        let p = builtin_2d();
        let g = grid();
        let sol = solve_riccati(&p, &g, 2).unwrap();
        let shifted: Vec<_> = sol
            .matrices()
            .iter()
            .map(|m| m + DMatrix::identity(2, 2) * 0.1)
            .collect();
        let mse = mse_of_matrices(&shifted, &g, &sol).unwrap();
        assert!((mse - 0.005).abs() < 1e-15);
        let mut bad = shifted.clone();
        bad[3][(0, 0)] = f64::NAN;
        assert!(mse_of_matrices(&bad, &g, &sol).is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let p = builtin_2d();
        let cfg = PolicyConfig::new(100, grid(), 0, 1);
        assert!(run_policy_iteration(&p, Method::LsC, &cfg, None).is_err());
        let cfg = PolicyConfig::new(3, grid(), 1, 1);
        assert!(matches!(
            run_policy_iteration(&p, Method::LsV, &cfg, None),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn history_csv_layout() {
        let p = builtin_2d();
        let g = TimeGrid::new(4.0, 0.1).unwrap();
        let sol = solve_riccati(&p, &g, 4).unwrap();
        let cfg = PolicyConfig::new(200, g, 3, 5);
        let h = run_policy_iteration(&p, Method::TrC, &cfg, Some(&sol)).unwrap();
        assert_eq!(h.records.len(), 3);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "iter,cost,mse,unstable_flag");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,"));
        assert!(h.final_mse().is_some());
    }
}
