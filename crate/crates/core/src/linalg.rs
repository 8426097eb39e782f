//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

/// Samples per parallel work unit in the batched kernels.
pub(crate) const SAMPLE_BLOCK: usize = 256;

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Relative asymmetry `‖M − Mᵀ‖_F / ‖M‖_F` (zero for the zero matrix).
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).norm() / norm
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Factor `L` with `L Lᵀ = S` for a symmetric PSD `S`.
///
/// Cholesky when `S` is positive definite, otherwise the symmetric
/// eigenfactor `V diag(√max(λ, 0))`.
pub fn psd_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = s.clone().cholesky() {
        return chol.l();
    }
    let eig = s.clone().symmetric_eigen();
    let mut factor = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let scale = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(scale);
    }
    factor
}

/// `out = M x` for a column-major `M` and slice vectors.
#[inline]
pub fn mat_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    out.iter_mut().for_each(|o| *o = 0.0);
    let data = m.as_slice();
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = &data[j * rows..(j + 1) * rows];
        for (o, &mij) in out.iter_mut().zip(col) {
            *o += mij * xj;
        }
    }
}

/// `out = Mᵀ x`.
#[inline]
pub fn mat_t_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(x.len(), rows);
    debug_assert_eq!(out.len(), cols);
    let data = m.as_slice();
    for (j, o) in out.iter_mut().enumerate() {
        let col = &data[j * rows..(j + 1) * rows];
        *o = col.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `xᵀ M x`.
#[inline]
pub fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let data = m.as_slice();
    let mut acc = 0.0;
    for j in 0..n {
        let col = &data[j * n..(j + 1) * n];
        let inner: f64 = col.iter().zip(x).map(|(a, b)| a * b).sum();
        acc += inner * x[j];
    }
    acc
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out_i = β out_i + α M x_i` for every row-major sample `x_i`.
pub fn apply_rows(m: &DMatrix<f64>, alpha: f64, x: &[f64], beta: f64, out: &mut [f64]) {
    let (r, n) = m.shape();
    debug_assert_eq!(x.len() / n, out.len() / r);
    let rows = m.transpose();
    let rows = rows.as_slice();
    if r == n {
        match n {
            1 => return apply_square::<1>(rows, alpha, x, beta, out),
            2 => return apply_square::<2>(rows, alpha, x, beta, out),
            3 => return apply_square::<3>(rows, alpha, x, beta, out),
            4 => return apply_square::<4>(rows, alpha, x, beta, out),
            _ => {}
        }
    }
    for (xi, oi) in x.chunks_exact(n).zip(out.chunks_exact_mut(r)) {
        for (o, row) in oi.iter_mut().zip(rows.chunks_exact(n)) {
            *o = beta * *o + alpha * dot(row, xi);
        }
    }
}

#[inline(always)]
fn apply_square<const N: usize>(rows: &[f64], alpha: f64, x: &[f64], beta: f64, out: &mut [f64]) {
    let mut m = [[0.0; N]; N];
    for (i, row) in m.iter_mut().enumerate() {
        row.copy_from_slice(&rows[i * N..(i + 1) * N]);
    }
    for (xi, oi) in x.chunks_exact(N).zip(out.chunks_exact_mut(N)) {
        for i in 0..N {
            let mut acc = 0.0;
            for j in 0..N {
                acc += m[i][j] * xi[j];
            }
            oi[i] = beta * oi[i] + alpha * acc;
        }
    }
}

/// Per-sample dot products of two row-major blocks.
pub fn row_dots<'a>(a: &'a [f64], b: &'a [f64], n: usize) -> impl Iterator<Item = f64> + 'a {
    a.chunks_exact(n)
        .zip(b.chunks_exact(n))
        .map(|(x, y)| dot(x, y))
}

/// Outcome of a dense least-squares solve.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// Coefficients, one column per right-hand side.
    pub coef: DMatrix<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
}

/// Reciprocal-condition threshold below which the normal-equation path is
/// abandoned for the SVD path.
const NORMAL_EQ_RCOND: f64 = 1e-10;
/// Relative singular-value cutoff used to decide numerical rank.
const SVD_RANK_RTOL: f64 = 1e-10;

/// Minimises `‖F c − Y‖_F` column by column.
///
/// Column-equilibrated normal equations solved by Cholesky when the Gram
/// matrix is well conditioned; otherwise a thin SVD of the design, which
/// reveals the numerical rank and yields the minimum-norm solution.
pub fn least_squares(design: &DMatrix<f64>, rhs: &DMatrix<f64>) -> LeastSquares {
    assert_eq!(
        design.nrows(),
        rhs.nrows(),
        "design and rhs row counts differ"
    );
    let gram = design.tr_mul(design);
    let cross = design.tr_mul(rhs);
    solve_normal(gram, cross).unwrap_or_else(|| svd_least_squares(design, rhs))
}

/// Designs up to this width accumulate the Gram matrix row by row.
const DIRECT_GRAM_MAX: usize = 32;

/// [`least_squares`] on a row-major `count × p` design and a row-major
/// `count × m` right-hand side.
pub fn least_squares_rows(
    design: &[f64],
    count: usize,
    p: usize,
    rhs: &[f64],
    m: usize,
) -> LeastSquares {
    assert_eq!(design.len(), count * p, "design length");
    assert_eq!(rhs.len(), count * m, "rhs length");
    let f = from_rows(design, count, p);
    let y = from_rows(rhs, count, m);
    if p > DIRECT_GRAM_MAX {
        return least_squares(&f, &y);
    }
    let fd = f.as_slice();
    let col = |j: usize| &fd[j * count..(j + 1) * count];
    let mut gram = DMatrix::zeros(p, p);
    for j in 0..p {
        for i in 0..=j {
            let v = lane_dot(col(i), col(j));
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let mut cross = DMatrix::zeros(p, m);
    for r in 0..m {
        let yr = &y.as_slice()[r * count..(r + 1) * count];
        for i in 0..p {
            cross[(i, r)] = lane_dot(col(i), yr);
        }
    }
    solve_normal(gram, cross).unwrap_or_else(|| svd_least_squares(&f, &y))
}

/// Dot product with four partial sums (fixed order, so deterministic).
#[inline]
pub fn lane_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Column-major copy of a row-major block.
pub fn from_rows(rows: &[f64], count: usize, width: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(count, width);
    let data = out.as_mut_slice();
    for (i, row) in rows.chunks(width).enumerate() {
        for (j, v) in row.iter().enumerate() {
            data[j * count + i] = *v;
        }
    }
    out
}

/// Column-equilibrated normal equations; `None` when the Gram matrix is
/// too ill-conditioned for Cholesky.
fn solve_normal(gram: DMatrix<f64>, cross: DMatrix<f64>) -> Option<LeastSquares> {
    let p = gram.nrows();
    let scales: Vec<f64> = gram.diagonal().iter().map(|d| d.sqrt()).collect();
    if !scales.iter().all(|s| *s > 0.0 && s.is_finite()) {
        return None;
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| gram[(i, j)] / (scales[i] * scales[j]));
    let chol = scaled.cholesky()?;
    let diag: Vec<f64> = chol.l_dirty().diagonal().iter().map(|d| d * d).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0 && min / max > NORMAL_EQ_RCOND) {
        return None;
    }
    let mut rhs = cross;
    for (j, s) in scales.iter().enumerate() {
        rhs.row_mut(j).unscale_mut(*s);
    }
    let mut coef = chol.solve(&rhs);
    for (j, s) in scales.iter().enumerate() {
        coef.row_mut(j).unscale_mut(*s);
    }
    Some(LeastSquares {
        coef,
        rank: p,
        rank_deficient: false,
    })
}

fn svd_least_squares(design: &DMatrix<f64>, rhs: &DMatrix<f64>) -> LeastSquares {
    let p = design.ncols();
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = smax * SVD_RANK_RTOL;
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > cutoff && **s > 0.0)
        .count();
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    // c = V Σ⁺ Uᵀ Y
    let mut projected = u.tr_mul(rhs);
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > cutoff && *s > 0.0 {
            projected.row_mut(i).unscale_mut(*s);
        } else {
            projected.row_mut(i).fill(0.0);
        }
    }
    let coef = v_t.tr_mul(&projected);
    LeastSquares {
        coef,
        rank,
        rank_deficient: rank < p,
    }
}

pub fn identity(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

pub fn vec_from(slice: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(slice)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_kernels_match_nalgebra() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = [1.0, -1.0, 2.0];
        let mut out = [0.0; 2];
        mat_vec(&m, &x, &mut out);
        let expected = &m * DVector::from_column_slice(&x);
        assert_eq!(out.as_slice(), expected.as_slice());

        let y = [0.5, 2.0];
        let mut out_t = [0.0; 3];
        mat_t_vec(&m, &y, &mut out_t);
        let expected_t = m.transpose() * DVector::from_column_slice(&y);
        assert_eq!(out_t.as_slice(), expected_t.as_slice());

        let s = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        assert_eq!(quad_form(&s, &[1.0, 2.0]), 2.0 + 4.0 + 12.0);
    }

    #[test]
    fn psd_factor_handles_singular_input() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_factor(&s);
        assert!((&l * l.transpose() - &s).norm() < 1e-12);
        let z = DMatrix::zeros(2, 2);
        assert_eq!(psd_factor(&z).norm(), 0.0);
    }

    #[test]
    fn least_squares_full_rank_matches_exact() {
        let f = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DMatrix::from_column_slice(4, 1, &[1.0, 3.0, 5.0, 7.0]);
        let ls = least_squares(&f, &y);
        assert!(!ls.rank_deficient);
        assert!((ls.coef[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((ls.coef[(1, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn least_squares_min_norm_on_rank_deficiency() {
        // Duplicate columns: min-norm splits the weight evenly.
        let f = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let y = DMatrix::from_column_slice(3, 1, &[2.0, 4.0, 6.0]);
        let ls = least_squares(&f, &y);
        assert!(ls.rank_deficient);
        assert_eq!(ls.rank, 1);
        assert!((ls.coef[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((ls.coef[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_column_goes_through_svd() {
        let f = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let y = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let ls = least_squares(&f, &y);
        assert!(ls.rank_deficient);
        assert!((ls.coef[(0, 0)] - 1.0).abs() < 1e-12);
        assert_eq!(ls.coef[(1, 0)], 0.0);
    }

    #[test]
    fn apply_rows_matches_matrix_product() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = [1.0, 0.0, -1.0, 2.0, 1.0, 0.5];
        let mut out = [1.0; 4];
        apply_rows(&m, 2.0, &x, 0.5, &mut out);
        assert_eq!(out, [0.5 - 4.0, 0.5 - 4.0, 0.5 + 11.0, 0.5 + 32.0]);
        let d: Vec<f64> = row_dots(&x, &x, 3).collect();
        assert_eq!(d, vec![2.0, 5.25]);
    }

    #[test]
    fn row_major_entry_point_agrees() {
        let f = DMatrix::from_fn(9, 3, |i, j| ((i * 5 + j * 3) as f64 * 0.7).sin());
        let y = DMatrix::from_fn(9, 2, |i, j| (i as f64 * 0.3 + j as f64).cos());
        let rows = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        let a = least_squares(&f, &y);
        let b = least_squares_rows(&rows(&f), 9, 3, &rows(&y), 2);
        assert!((a.coef - b.coef).norm() < 1e-12);
        assert_eq!(from_rows(&rows(&f), 9, 3), f);
    }
}
