//! Linear-quadratic problem instances and the uniform time grid.
//!
//! Dynamics `dX = (A X + B U) dt + σ dW`, running cost `½xᵀQx + ½uᵀRu`,
//! terminal cost `½xᵀQ_f x`, Gaussian initial law `N(m₀, Σ₀)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, quad_form, sym_eigenvalues, symmetrize};

const SYMMETRY_RTOL: f64 = 1e-8;
const EIGEN_RTOL: f64 = 1e-12;
const SIGMA_RCOND: f64 = 1e-14;

/// Uniform grid `{0, Δt, …, KΔt = T}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    steps: usize,
    horizon: f64,
}

impl TimeGrid {
    /// Grid with step `dt` over `[0, horizon]`; `horizon / dt` must be an integer.
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "step must be positive, got {dt}"
            )));
        }
        let steps = (horizon / dt).round();
        if steps < 1.0 || ((steps * dt - horizon) / horizon).abs() > 1e-10 {
            return Err(Error::InvalidGrid(format!(
                "horizon {horizon} is not an integer multiple of step {dt}"
            )));
        }
        Ok(Self {
            dt,
            steps: steps as usize,
            horizon,
        })
    }

    pub fn from_steps(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidGrid("at least one step is required".into()));
        }
        Self::new(horizon, horizon / steps as f64)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of steps `K`; the grid has `K + 1` points.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Time at index `k`; the last point is exactly `T`.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.time(k))
    }
}

/// A validated linear-quadratic control problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LqProblem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    qf: DMatrix<f64>,
    m0: DVector<f64>,
    sigma0: DMatrix<f64>,
    horizon: f64,
    // derived
    r_inv: DMatrix<f64>,
    diffusion: DMatrix<f64>,
}

fn check_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::DimensionMismatch(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_finite(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} has non-finite entries")))
    }
}

fn symmetric_psd(name: &'static str, m: &DMatrix<f64>, strict: bool) -> Result<DMatrix<f64>> {
    if asymmetry(m) > SYMMETRY_RTOL {
        return Err(Error::Asymmetric(name));
    }
    let s = symmetrize(m);
    let ev = sym_eigenvalues(&s);
    let scale = ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let min = ev.first().copied().unwrap_or(0.0);
    if strict {
        if scale == 0.0 || min <= EIGEN_RTOL * scale {
            return Err(Error::NonPd(name));
        }
    } else if min < -EIGEN_RTOL * scale.max(1.0) {
        return Err(Error::NonPsd(name));
    }
    Ok(s)
}

fn sigma_is_invertible(sigma: &DMatrix<f64>) -> bool {
    let sv = sigma.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > SIGMA_RCOND * max
}

/// Builds and validates an [`LqProblem`].
///
/// Symmetric inputs are symmetrized before their eigenvalue sign conditions
/// are checked.
#[allow(clippy::too_many_arguments)]
pub fn make_lq(
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    qf: DMatrix<f64>,
    m0: DVector<f64>,
    sigma0: DMatrix<f64>,
    horizon: f64,
) -> Result<LqProblem> {
    let n = a.nrows();
    let m = b.ncols();
    if n == 0 || m == 0 {
        return Err(Error::DimensionMismatch(
            "state and control dimensions must be positive".into(),
        ));
    }
    check_shape("A", &a, n, n)?;
    check_shape("B", &b, n, m)?;
    check_shape("sigma", &sigma, n, n)?;
    check_shape("Q", &q, n, n)?;
    check_shape("R", &r, m, m)?;
    check_shape("Qf", &qf, n, n)?;
    check_shape("Sigma0", &sigma0, n, n)?;
    if m0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "m0 has length {}, expected {n}",
            m0.len()
        )));
    }
    for (name, mat) in [
        ("A", &a),
        ("B", &b),
        ("sigma", &sigma),
        ("Q", &q),
        ("R", &r),
        ("Qf", &qf),
        ("Sigma0", &sigma0),
    ] {
        check_finite(name, mat)?;
    }
    if !m0.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("m0 has non-finite entries".into()));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "horizon T must be positive, got {horizon}"
        )));
    }
    let q = symmetric_psd("Q", &q, false)?;
    let qf = symmetric_psd("Qf", &qf, false)?;
    let sigma0 = symmetric_psd("Sigma0", &sigma0, false)?;
    let r = symmetric_psd("R", &r, true)?;
    if !sigma_is_invertible(&sigma) {
        return Err(Error::SingularSigma);
    }
    Ok(LqProblem::assemble(
        a, b, sigma, q, r, qf, m0, sigma0, horizon,
    ))
}

/// The `p`-mass spring chain with state dimension `2p` and all-ones initial mean.
pub fn mass_spring(p: usize) -> Result<LqProblem> {
    mass_spring_with_mean(p, DVector::from_element(2 * p, 1.0))
}

/// Mass-spring chain with an explicit initial mean.
pub fn mass_spring_with_mean(p: usize, m0: DVector<f64>) -> Result<LqProblem> {
    if p == 0 {
        return Err(Error::InvalidArgument(
            "mass-spring chain needs p >= 1".into(),
        ));
    }
    let n = 2 * p;
    let stiffness = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            2.0
        } else if i.abs_diff(j) == 1 {
            -1.0
        } else {
            0.0
        }
    });
    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, p), (p, p)).fill_with_identity();
    a.view_mut((p, 0), (p, p)).copy_from(&(-stiffness));
    a.view_mut((p, p), (p, p))
        .copy_from(&(-DMatrix::<f64>::identity(p, p)));
    let mut b = DMatrix::zeros(n, p);
    b.view_mut((p, 0), (p, p)).fill_with_identity();
    let eye = DMatrix::identity(n, n);
    make_lq(
        a,
        b,
        eye.clone(),
        eye.clone(),
        DMatrix::identity(p, p),
        eye.clone(),
        m0,
        eye,
        4.0,
    )
}

/// The two-dimensional benchmark instance (lightly damped oscillator, T = 4).
pub fn builtin_2d() -> LqProblem {
    make_lq(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.1]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::identity(2, 2),
        DVector::from_column_slice(&[1.0, 0.0]),
        DMatrix::identity(2, 2),
        4.0,
    )
    .expect("builtin instance is valid")
}

impl LqProblem {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        qf: DMatrix<f64>,
        m0: DVector<f64>,
        sigma0: DMatrix<f64>,
        horizon: f64,
    ) -> Self {
        let r_inv = r
            .clone()
            .try_inverse()
            .unwrap_or_else(|| DMatrix::from_element(r.nrows(), r.ncols(), f64::NAN));
        let diffusion = &sigma * sigma.transpose();
        Self {
            a,
            b,
            sigma,
            q,
            r,
            qf,
            m0,
            sigma0,
            horizon,
            r_inv,
            diffusion,
        }
    }

    /// Builds an instance without any validation beyond shapes.
    ///
    /// For degenerate diagnostics only (zero diffusion, zero control cost);
    /// solvers that need `σ⁻¹` or `R⁻¹` will fail or produce NaN.
    #[allow(clippy::too_many_arguments)]
    pub fn unvalidated(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        qf: DMatrix<f64>,
        m0: DVector<f64>,
        sigma0: DMatrix<f64>,
        horizon: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        check_shape("A", &a, n, n)?;
        check_shape("B", &b, n, m)?;
        check_shape("sigma", &sigma, n, n)?;
        check_shape("Q", &q, n, n)?;
        check_shape("R", &r, m, m)?;
        check_shape("Qf", &qf, n, n)?;
        check_shape("Sigma0", &sigma0, n, n)?;
        if m0.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "m0 has length {}, expected {n}",
                m0.len()
            )));
        }
        Ok(Self::assemble(a, b, sigma, q, r, qf, m0, sigma0, horizon))
    }

    /// Copy of this problem with a different initial mean.
    pub fn with_initial_mean(&self, m0: DVector<f64>) -> Result<Self> {
        if m0.len() != self.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "m0 has length {}, expected {}",
                m0.len(),
                self.state_dim()
            )));
        }
        let mut out = self.clone();
        out.m0 = m0;
        Ok(out)
    }

    /// Copy of this problem with a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon T must be positive, got {horizon}"
            )));
        }
        let mut out = self.clone();
        out.horizon = horizon;
        Ok(out)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    pub fn qf(&self) -> &DMatrix<f64> {
        &self.qf
    }

    pub fn m0(&self) -> &DVector<f64> {
        &self.m0
    }

    pub fn sigma0(&self) -> &DMatrix<f64> {
        &self.sigma0
    }

    /// `D = σσᵀ`.
    pub fn diffusion(&self) -> &DMatrix<f64> {
        &self.diffusion
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `½xᵀQx + ½uᵀRu`.
    pub fn running_cost(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        if x.len() != self.state_dim() || u.len() != self.control_dim() {
            return Err(Error::DimensionMismatch(format!(
                "running cost expects x of length {} and u of length {}",
                self.state_dim(),
                self.control_dim()
            )));
        }
        Ok(0.5 * quad_form(&self.q, x) + 0.5 * quad_form(&self.r, u))
    }

    /// `½xᵀQ_f x`.
    pub fn terminal_cost(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "terminal cost expects x of length {}",
                self.state_dim()
            )));
        }
        Ok(0.5 * quad_form(&self.qf, x))
    }

    pub fn to_config(&self) -> LqConfig {
        fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        }
        LqConfig {
            a: rows(&self.a),
            b: rows(&self.b),
            sigma: rows(&self.sigma),
            q: rows(&self.q),
            r: rows(&self.r),
            qf: rows(&self.qf),
            m0: self.m0.iter().copied().collect(),
            sigma0: rows(&self.sigma0),
            horizon: self.horizon,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_config())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: LqConfig = serde_json::from_str(text)?;
        cfg.build()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Control-affine parts of the drift: `a(x, u) = Ãx + σB̃u` with `B̃ = σ⁻¹B`.
pub fn control_affine_parts(prob: &LqProblem) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !sigma_is_invertible(prob.sigma()) {
        return Err(Error::SingularSigma);
    }
    let lu = prob.sigma().clone().lu();
    let btilde = lu.solve(prob.b()).ok_or(Error::SingularSigma)?;
    Ok((prob.a().clone(), btilde))
}

/// JSON form of a problem: row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LqConfig {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "Qf")]
    pub qf: Vec<Vec<f64>>,
    pub m0: Vec<f64>,
    #[serde(rename = "Sigma0")]
    pub sigma0: Vec<Vec<f64>>,
    #[serde(rename = "T")]
    pub horizon: f64,
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch(format!("{name} has ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
}

impl LqConfig {
    pub fn build(&self) -> Result<LqProblem> {
        make_lq(
            matrix_from_rows("A", &self.a)?,
            matrix_from_rows("B", &self.b)?,
            matrix_from_rows("sigma", &self.sigma)?,
            matrix_from_rows("Q", &self.q)?,
            matrix_from_rows("R", &self.r)?,
            matrix_from_rows("Qf", &self.qf)?,
            DVector::from_vec(self.m0.clone()),
            matrix_from_rows("Sigma0", &self.sigma0)?,
            self.horizon,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn builtin_instance_is_valid() {
        let p = builtin_2d();
        assert_eq!(p.state_dim(), 2);
        assert_eq!(p.control_dim(), 1);
        assert_eq!(p.horizon(), 4.0);
    }

    #[test]
    fn zero_control_cost_is_rejected() {
        let eye = DMatrix::identity(2, 2);
        let err = make_lq(
            eye.clone(),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            eye.clone(),
            eye.clone(),
            scalar(0.0),
            eye.clone(),
            DVector::zeros(2),
            eye,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonPd("R")));
    }

    #[test]
    fn rank_deficient_sigma_is_rejected() {
        let eye = DMatrix::identity(2, 2);
        let err = make_lq(
            eye.clone(),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            eye.clone(),
            scalar(1.0),
            eye.clone(),
            DVector::zeros(2),
            eye,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SingularSigma));
    }

    #[test]
    fn indefinite_and_mismatched_inputs_are_rejected() {
        let eye = DMatrix::identity(2, 2);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = make_lq(
            eye.clone(),
            b.clone(),
            eye.clone(),
            neg,
            scalar(1.0),
            eye.clone(),
            DVector::zeros(2),
            eye.clone(),
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonPsd("Q")));
        let err = make_lq(
            eye.clone(),
            b.clone(),
            eye.clone(),
            eye.clone(),
            scalar(1.0),
            eye.clone(),
            DVector::zeros(3),
            eye.clone(),
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
        let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let err = make_lq(
            eye.clone(),
            b,
            eye.clone(),
            eye.clone(),
            scalar(1.0),
            skew,
            DVector::zeros(2),
            eye,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Asymmetric("Qf")));
    }

    #[test]
    fn tiny_asymmetry_is_symmetrized() {
        let eye = DMatrix::identity(2, 2);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1 + 1e-12, 1.0]);
        let p = make_lq(
            eye.clone(),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            eye.clone(),
            q,
            scalar(1.0),
            eye.clone(),
            DVector::zeros(2),
            eye,
            1.0,
        )
        .unwrap();
        assert_eq!(p.q(), &p.q().transpose());
    }

    #[test]
    fn mass_spring_stiffness_layout() {
        let p1 = mass_spring(1).unwrap();
        assert_eq!(
            p1.a(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -1.0])
        );

        let p2 = mass_spring(2).unwrap();
        let lower_left = p2.a().view((2, 0), (2, 2)).clone_owned();
        assert_eq!(
            lower_left,
            DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 1.0, -2.0])
        );

        let p3 = mass_spring(3).unwrap();
        let t = -p3.a().view((3, 0), (3, 3)).clone_owned();
        assert_eq!(t[(0, 2)], 0.0);
        assert_eq!(t[(2, 0)], 0.0);
        assert_eq!(t[(1, 1)], 2.0);
        assert_eq!(p3.m0(), &DVector::from_element(6, 1.0));
        assert_eq!(
            p3.b().view((3, 0), (3, 3)).clone_owned(),
            DMatrix::identity(3, 3)
        );
    }

    #[test]
    fn mass_spring_valid_up_to_sixteen_masses() {
        for p in 1..=16 {
            assert!(mass_spring(p).is_ok(), "p = {p}");
        }
        assert!(mass_spring(0).is_err());
    }

    #[test]
    fn control_affine_parts_examples() {
        let p = builtin_2d();
        let (_, bt) = control_affine_parts(&p).unwrap();
        assert_eq!(bt, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));

        let eye = DMatrix::identity(2, 2);
        let p2 = make_lq(
            eye.clone(),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            eye.clone() * 2.0,
            eye.clone(),
            scalar(1.0),
            eye.clone(),
            DVector::zeros(2),
            eye,
            1.0,
        )
        .unwrap();
        let (_, bt) = control_affine_parts(&p2).unwrap();
        assert!((bt - DMatrix::from_row_slice(2, 1, &[0.0, 0.5])).norm() < 1e-15);
    }

    #[test]
    fn costs_by_hand() {
        let p = builtin_2d();
        assert_eq!(p.running_cost(&[0.0, 0.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(p.running_cost(&[1.0, 0.0], &[0.0]).unwrap(), 0.5);
        assert_eq!(p.terminal_cost(&[1.0, 1.0]).unwrap(), 1.0);
        assert!(p.running_cost(&[1.0], &[0.0]).is_err());
        assert!(p.terminal_cost(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn grid_requires_integral_step_count() {
        let g = TimeGrid::new(4.0, 0.02).unwrap();
        assert_eq!(g.steps(), 200);
        assert_eq!(g.time(200), 4.0);
        assert!(g
            .times()
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(1.0, 0.3).is_err());
        assert!(TimeGrid::new(1.0, 0.0).is_err());
        for dt in [0.004, 0.02, 0.05, 0.1, 0.2, 0.4] {
            assert!(TimeGrid::new(4.0, dt).is_ok(), "dt = {dt}");
        }
        assert!(TimeGrid::new(4.0, 0.3)
            .unwrap_err()
            .to_string()
            .contains("multiple"));
    }

    #[test]
    fn json_round_trip() {
        let p = mass_spring(2).unwrap();
        let back = LqProblem::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
        let text = builtin_2d().to_json().unwrap();
        for key in [
            "\"A\"",
            "\"B\"",
            "\"sigma\"",
            "\"Q\"",
            "\"R\"",
            "\"Qf\"",
            "\"m0\"",
            "\"Sigma0\"",
            "\"T\"",
        ] {
            assert!(text.contains(key), "missing {key}");
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |i, j| {
            seed[(i * cols + j) % seed.len()] + 0.1 * (i as f64 - j as f64)
        })
    }

    proptest! {
        #[test]
        fn costs_are_nonnegative(x in prop::collection::vec(-10.0..10.0f64, 4), u in prop::collection::vec(-10.0..10.0f64, 2), p in 1usize..=2) {
            let prob = mass_spring(p).unwrap();
            let n = prob.state_dim();
            prop_assert!(prob.running_cost(&x[..n], &u[..p]).unwrap() >= 0.0);
            prop_assert!(prob.terminal_cost(&x[..n]).unwrap() >= 0.0);
        }

        #[test]
        fn btilde_recomposes_b(entries in prop::collection::vec(-1.0..1.0f64, 9), bs in prop::collection::vec(-2.0..2.0f64, 6)) {
            let n = 3;
            let sigma = random_matrix(n, n, &entries) + DMatrix::identity(n, n) * 2.5;
            let b = random_matrix(n, 2, &bs);
            let eye = DMatrix::identity(n, n);
            let prob = make_lq(eye.clone(), b.clone(), sigma.clone(), eye.clone(), DMatrix::identity(2, 2), eye.clone(), DVector::zeros(n), eye, 1.0).unwrap();
            let (_, bt) = control_affine_parts(&prob).unwrap();
            prop_assert!((&sigma * bt - &b).norm() <= 1e-10 * b.norm().max(1e-300));
        }
    }
}
