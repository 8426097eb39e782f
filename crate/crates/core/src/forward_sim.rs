//! Euler–Maruyama simulation of the closed-loop state SDE.

use std::io::Write;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{apply_rows, psd_factor, quad_form, SAMPLE_BLOCK};
use crate::lq_model::{LqProblem, TimeGrid};
use crate::rng::path_rngs;

/// States beyond this magnitude mark a batch as diverged.
pub const OVERFLOW_GUARD: f64 = 1e15;

/// Linear feedback law `u = K_t x`, one gain per grid index `0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLaw {
    grid: TimeGrid,
    gains: Vec<DMatrix<f64>>,
}

impl ControlLaw {
    pub fn new(grid: TimeGrid, gains: Vec<DMatrix<f64>>) -> Result<Self> {
        if gains.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "control law has {} gains for a grid of {} points",
                gains.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, gains })
    }

    /// `u ≡ 0`.
    pub fn zero(prob: &LqProblem, grid: &TimeGrid) -> Self {
        let gains = vec![DMatrix::zeros(prob.control_dim(), prob.state_dim()); grid.len()];
        Self {
            grid: grid.clone(),
            gains,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn gain(&self, k: usize) -> &DMatrix<f64> {
        &self.gains[k]
    }

    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    pub fn is_finite(&self) -> bool {
        self.gains.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Closed-loop drift matrices `A + B K_t`.
    pub fn closed_loop(&self, prob: &LqProblem) -> Vec<DMatrix<f64>> {
        self.gains.iter().map(|k| prob.a() + prob.b() * k).collect()
    }
}

/// `N` sampled paths on a uniform grid.
///
/// States are stored time-major; each time slice is an `N × n` row-major block.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    grid: TimeGrid,
    seed: u64,
    samples: usize,
    dim: usize,
    states: Vec<Vec<f64>>,
    diverged: bool,
}

impl TrajectoryBatch {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    /// Row-major `N × n` block at grid index `k`.
    pub fn slice(&self, k: usize) -> &[f64] {
        &self.states[k]
    }

    /// State of sample `i` at grid index `k`.
    pub fn state(&self, k: usize, i: usize) -> &[f64] {
        &self.states[k][i * self.dim..(i + 1) * self.dim]
    }

    /// Copy of the time slice `k` as an `N × n` matrix.
    pub fn snapshot(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.samples, self.dim, &self.states[k])
    }

    /// Debug dump: `t,sample,x0,…`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let cols: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        writeln!(out, "t,sample,{}", cols.join(","))?;
        for (k, t) in self.grid.times().enumerate() {
            for i in 0..self.samples {
                let vals: Vec<String> = self.state(k, i).iter().map(|v| format!("{v:e}")).collect();
                writeln!(out, "{t:e},{i},{}", vals.join(","))?;
            }
        }
        Ok(())
    }
}

/// `n × rngs.len()` matrix of `scale · N(0, 1)` draws, column `i` from `rngs[i]`.
pub(crate) fn standard_normals(rngs: &mut [ChaCha8Rng], n: usize, scale: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, rngs.len());
    for (col, rng) in out.as_mut_slice().chunks_mut(n).zip(rngs.iter_mut()) {
        for v in col {
            let z: f64 = StandardNormal.sample(rng);
            *v = scale * z;
        }
    }
    out
}

pub(crate) fn state_ok(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite() && v.abs() <= OVERFLOW_GUARD)
}

/// Simulates `samples` closed-loop paths under `law`.
///
/// `X₀ = m₀ + Lξ` with `LLᵀ = Σ₀`; each step adds `σΔW`, `ΔW ~ N(0, Δt I)`.
/// Path `i` draws from its own substream of `seed`, so the result does not
/// depend on the number of worker threads.
pub fn simulate_forward(
    prob: &LqProblem,
    law: &ControlLaw,
    samples: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<TrajectoryBatch> {
    if law.grid() != grid {
        return Err(Error::InvalidGrid(
            "control law grid differs from simulation grid".into(),
        ));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "at least one sample path is required".into(),
        ));
    }
    let n = prob.state_dim();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let init_factor = psd_factor(prob.sigma0());
    let sigma = prob.sigma();
    let closed = law.closed_loop(prob);
    let m0 = prob.m0().clone();

    let block = SAMPLE_BLOCK * n;
    let mut rngs = path_rngs(seed, samples);
    let mut states = Vec::with_capacity(grid.len());

    let mut first = vec![0.0; samples * n];
    first
        .par_chunks_mut(block)
        .zip(rngs.par_chunks_mut(SAMPLE_BLOCK))
        .for_each(|(x, rngs)| {
            let xi = standard_normals(rngs, n, 1.0);
            apply_rows(&init_factor, 1.0, xi.as_slice(), 0.0, x);
            for xi in x.chunks_exact_mut(n) {
                xi.iter_mut().zip(m0.iter()).for_each(|(v, m)| *v += m);
            }
        });
    let mut diverged = !first.chunks(n).all(state_ok);
    states.push(first);

    for k in 0..grid.steps() {
        let a_cl = &closed[k];
        let prev = &states[k];
        let mut next = prev.clone();
        let ok = next
            .par_chunks_mut(block)
            .zip(prev.par_chunks(block))
            .zip(rngs.par_chunks_mut(SAMPLE_BLOCK))
            .map(|((x_next, x), rngs)| {
                let dw = standard_normals(rngs, n, sqrt_dt);
                apply_rows(a_cl, dt, x, 1.0, x_next);
                apply_rows(sigma, 1.0, dw.as_slice(), 1.0, x_next);
                x_next.chunks(n).all(state_ok)
            })
            .collect::<Vec<_>>();
        diverged |= ok.contains(&false);
        states.push(next);
    }

    Ok(TrajectoryBatch {
        grid: grid.clone(),
        seed,
        samples,
        dim: n,
        states,
        diverged,
    })
}

/// Monte-Carlo cost estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub diverged: bool,
}

/// `(1/N) Σᵢ [Σ_k ℓ(X_k, K_k X_k) Δt + ℓ_f(X_K)]` with a left-endpoint sum.
pub fn estimate_cost(
    prob: &LqProblem,
    law: &ControlLaw,
    batch: &TrajectoryBatch,
) -> Result<CostEstimate> {
    if law.grid() != batch.grid() {
        return Err(Error::InvalidGrid(
            "control law grid differs from batch grid".into(),
        ));
    }
    if batch.diverged() {
        return Ok(CostEstimate {
            mean: f64::INFINITY,
            std_error: f64::INFINITY,
            diverged: true,
        });
    }
    let steps = batch.grid().steps();
    let dt = batch.grid().dt();
    // ½xᵀ(Q + KᵀRK)x per step
    let stage: Vec<DMatrix<f64>> = law
        .gains()
        .iter()
        .map(|k| prob.q() + k.transpose() * prob.r() * k)
        .collect();
    let per_sample: Vec<f64> = (0..batch.samples())
        .into_par_iter()
        .map(|i| {
            let mut total = 0.0;
            for (k, w) in stage.iter().enumerate().take(steps) {
                total += 0.5 * quad_form(w, batch.state(k, i)) * dt;
            }
            total + 0.5 * quad_form(prob.qf(), batch.state(steps, i))
        })
        .collect();
    let n = per_sample.len() as f64;
    let mean = per_sample.iter().sum::<f64>() / n;
    let var = if per_sample.len() > 1 {
        per_sample.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(CostEstimate {
        mean,
        std_error: (var / n).sqrt(),
        diverged: false,
    })
}
