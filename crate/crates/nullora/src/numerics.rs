//! Deterministic dense linear algebra: SVD, numerical rank, null-space basis
//! extraction, orthonormalization.
//!
//! Everything here is a pure function of its inputs and runs sequentially in
//! a fixed order, so identical input bytes give identical output bytes across
//! runs and processes.

use crate::matrix::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default relative threshold below which a singular value counts as zero:
/// `sigma_i <= tau * sigma_max`.
pub const DEFAULT_TAU: f64 = 1e-5;

/// Cyclic one-sided Jacobi sweep cap; exceeded only on pathological input.
const JACOBI_MAX_SWEEPS: usize = 60;

/// Columns with norm below this fraction of the largest column norm are
/// treated as exactly zero: their direction is roundoff noise, so the
/// corresponding left singular vectors come from an orthonormal completion.
const ZERO_COL_REL: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("SVD did not converge after {sweeps} sweeps on a {rows}x{cols} matrix")]
    NoConvergence { sweeps: usize, rows: usize, cols: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("orthonormal basis needs cols <= rows, got {rows}x{cols}")]
    TooManyColumns { rows: usize, cols: usize },
}

/// Thin SVD `M = U * diag(sigma) * Vt` with `k = min(rows, cols)`.
///
/// `sigma` is non-increasing and non-negative. Columns of `U` follow a fixed
/// sign convention: the entry of largest absolute value in each column is
/// non-negative (ties broken by lowest row index), with the matching `Vt` row
/// negated to preserve the product.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
}

/// Rank/nullity summary of one matrix at relative threshold `tau`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RankReport {
    pub numerical_rank: usize,
    pub nullity_left: usize,
    pub nullity_right: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub tau: f64,
}

/// Null-space bases of a matrix, from one SVD.
///
/// `left` has `nullity_left` columns spanning `{y : W^T y = 0}`; `right` has
/// `nullity_right` rows spanning `{x : W x = 0}` (as row vectors). Both list
/// sub-threshold singular directions in SVD output order (descending sigma)
/// followed by the orthonormal completion directions, so the tail always
/// holds the directions with the smallest associated singular values.
#[derive(Debug, Clone)]
pub struct NullBases {
    pub left: DenseMatrix,
    pub right: DenseMatrix,
    pub rank: usize,
}

/// Deterministic thin SVD via cyclic one-sided Jacobi.
pub fn svd(m: &DenseMatrix) -> Result<SvdResult, NumericsError> {
    if !m.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    let mut result = if m.rows() >= m.cols() {
        jacobi_svd_tall(m)?
    } else {
        // Work on the transpose and swap factors: M = (U' S V't)^T = V' S U't.
        let t = jacobi_svd_tall(&m.transpose())?;
        SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        }
    };
    apply_sign_convention(&mut result);
    Ok(result)
}

/// Count of singular values above `tau * sigma[0]`; 0 when `sigma[0] == 0`.
pub fn numerical_rank(sigma: &[f64], tau: f64) -> usize {
    assert!(tau > 0.0, "tau must be positive");
    debug_assert!(sigma.windows(2).all(|w| w[0] >= w[1]), "sigma not sorted");
    match sigma.first() {
        None => 0,
        Some(&s0) if s0 <= 0.0 => 0,
        Some(&s0) => sigma.iter().take_while(|&&s| s > tau * s0).count(),
    }
}

/// Left and right null-space bases computed from a single SVD.
pub fn null_bases(w: &DenseMatrix, tau: f64) -> Result<NullBases, NumericsError> {
    let dec = svd(w)?;
    let k = dec.sigma.len();
    let rank = numerical_rank(&dec.sigma, tau);

    // Left: sub-threshold columns of U, then the completion of U's column
    // space when d_out > k.
    let zero_cols: Vec<usize> = (rank..k).collect();
    let mut left = dec.u.select_cols(&zero_cols);
    if w.rows() > k {
        let mut extra = orthonormal_complement(&dec.u);
        for j in 0..extra.cols() {
            fix_column_sign(&mut extra, j);
        }
        left = left.hcat(&extra);
    }

    // Right: mirror on the rows of Vt.
    let zero_rows: Vec<usize> = (rank..k).collect();
    let mut right = dec.vt.select_rows(&zero_rows);
    if w.cols() > k {
        let mut extra = orthonormal_complement(&dec.vt.transpose());
        for j in 0..extra.cols() {
            fix_column_sign(&mut extra, j);
        }
        right = right.vcat(&extra.transpose());
    }

    Ok(NullBases { left, right, rank })
}

/// Orthonormal basis of the left null space `{y : W^T y = 0}`, as columns.
/// Full-rank input gives an empty `d_out x 0` matrix.
pub fn null_space_left(w: &DenseMatrix, tau: f64) -> Result<DenseMatrix, NumericsError> {
    Ok(null_bases(w, tau)?.left)
}

/// Orthonormal basis of the right null space `{x : W x = 0}`, as rows, so
/// `W * V_hat^T = 0`. Full-rank input gives an empty `0 x d_in` matrix.
pub fn null_space_right(w: &DenseMatrix, tau: f64) -> Result<DenseMatrix, NumericsError> {
    Ok(null_bases(w, tau)?.right)
}

/// Rank, nullities and spectrum extremes of one matrix.
pub fn analyze_matrix(w: &DenseMatrix, tau: f64) -> Result<RankReport, NumericsError> {
    let dec = svd(w)?;
    let rank = numerical_rank(&dec.sigma, tau);
    Ok(RankReport {
        numerical_rank: rank,
        nullity_left: w.rows() - rank,
        nullity_right: w.cols() - rank,
        sigma_max: dec.sigma.first().copied().unwrap_or(0.0),
        sigma_min: dec.sigma.last().copied().unwrap_or(0.0),
        tau,
    })
}

/// Seeded Gaussian matrix followed by Householder QR; `Q^T Q = I_cols` and
/// the output is bit-identical for a fixed seed.
pub fn random_orthonormal(
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<DenseMatrix, NumericsError> {
    if cols > rows {
        return Err(NumericsError::TooManyColumns { rows, cols });
    }
    if cols == 0 {
        return Ok(DenseMatrix::zeros(rows, 0));
    }
    let g = gaussian_matrix(rows, cols, seed, 1.0);
    let (q_full, r) = householder_qr(&g);
    let mut q = q_full.select_cols(&(0..cols).collect::<Vec<_>>());
    // Fix signs so Q is the factor with positive R diagonal.
    for j in 0..cols {
        if r.get(j, j) < 0.0 {
            negate_col(&mut q, j);
        }
    }
    Ok(q)
}

/// Seeded standard-normal matrix scaled by `std`.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64, std: f64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let x: f64 = rng.sample(StandardNormal);
        data.push(x * std);
    }
    DenseMatrix::new(rows, cols, data).expect("gaussian dims")
}

/// Deterministic sub-seed derivation (splitmix64 over `seed + stream`).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Orthonormal basis of the orthogonal complement of `q`'s column span,
/// where `q` has orthonormal columns. Returns `rows x (rows - cols)`.
pub fn orthonormal_complement(q: &DenseMatrix) -> DenseMatrix {
    let (q_full, _r) = householder_qr(q);
    q_full.select_cols(&(q.cols()..q.rows()).collect::<Vec<_>>())
}

/// Full Householder QR: returns `(Q, R)` with `Q` square `m x m` orthogonal
/// and `R` upper-triangular `m x n`, `A = Q * R`.
pub fn householder_qr(a: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let m = a.rows();
    let n = a.cols();
    let mut r = a.clone();
    // Householder vectors, one per eliminated column.
    let mut reflectors: Vec<Vec<f64>> = Vec::new();
    for k in 0..n.min(m.saturating_sub(1)) {
        let mut v = vec![0.0; m - k];
        for i in k..m {
            v[i - k] = r.get(i, k);
        }
        let norm_x = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm_x == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm_x } else { norm_x };
        v[0] -= alpha;
        let vtv = v.iter().map(|x| x * x).sum::<f64>();
        if vtv == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        // Apply H = I - 2 v v^T / (v^T v) to the trailing block of R.
        for j in k..n {
            let mut dot = 0.0;
            for i in k..m {
                dot += v[i - k] * r.get(i, j);
            }
            let f = 2.0 * dot / vtv;
            for i in k..m {
                r.set(i, j, r.get(i, j) - f * v[i - k]);
            }
        }
        reflectors.push(v);
    }
    // Q = H_1 * H_2 * ... applied to the identity, in reverse.
    let mut q = DenseMatrix::identity(m);
    for (k, v) in reflectors.iter().enumerate().rev() {
        if v.is_empty() {
            continue;
        }
        let vtv = v.iter().map(|x| x * x).sum::<f64>();
        for j in 0..m {
            let mut dot = 0.0;
            for i in k..m {
                dot += v[i - k] * q.get(i, j);
            }
            let f = 2.0 * dot / vtv;
            for i in k..m {
                q.set(i, j, q.get(i, j) - f * v[i - k]);
            }
        }
    }
    (q, r)
}

/// One-sided Jacobi on a tall matrix (rows >= cols): orthogonalizes columns
/// by right rotations, accumulating them into V.
fn jacobi_svd_tall(a: &DenseMatrix) -> Result<SvdResult, NumericsError> {
    let m = a.rows();
    let n = a.cols();
    debug_assert!(m >= n);

    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v_cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut norm_sq: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();

    // Convergence threshold slightly above the roundoff floor of the dot
    // products, so noise-level correlations do not cause livelock.
    let tol = 2e-15 * (m as f64).sqrt();

    let mut sweeps = 0;
    loop {
        sweeps += 1;
        if sweeps > JACOBI_MAX_SWEEPS {
            return Err(NumericsError::NoConvergence {
                sweeps: JACOBI_MAX_SWEEPS,
                rows: m,
                cols: n,
            });
        }
        let max_norm_sq = norm_sq.iter().fold(0.0_f64, |acc, &x| acc.max(x));
        if max_norm_sq == 0.0 {
            break; // zero matrix
        }
        let zero_cut_sq = max_norm_sq * ZERO_COL_REL * ZERO_COL_REL;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = norm_sq[p];
                let beta = norm_sq[q];
                if alpha <= zero_cut_sq || beta <= zero_cut_sq {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v_cols, p, q, c, s);
                norm_sq[p] = dot(&cols[p], &cols[p]);
                norm_sq[q] = dot(&cols[q], &cols[q]);
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }

    // Sort by singular value, descending, stable on the original index.
    let mut order: Vec<usize> = (0..n).collect();
    let sigma_raw: Vec<f64> = norm_sq.iter().map(|&x| x.sqrt()).collect();
    order.sort_by(|&i, &j| sigma_raw[j].total_cmp(&sigma_raw[i]).then(i.cmp(&j)));

    let sigma: Vec<f64> = order.iter().map(|&j| sigma_raw[j]).collect();
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let zero_cut = sigma_max * ZERO_COL_REL;

    // Normalize well-conditioned columns into U; columns at roundoff scale
    // get replaced below by an orthonormal completion.
    let mut u = DenseMatrix::zeros(m, n);
    let mut pending: Vec<usize> = Vec::new();
    for (out_j, &src_j) in order.iter().enumerate() {
        let s = sigma[out_j];
        if s > zero_cut && s > 0.0 {
            for (i, &v) in cols[src_j].iter().enumerate() {
                u.set(i, out_j, v / s);
            }
        } else {
            pending.push(out_j);
        }
    }
    if !pending.is_empty() {
        let good: Vec<usize> = (0..n).filter(|j| !pending.contains(j)).collect();
        let basis = u.select_cols(&good);
        let extra = orthonormal_complement(&basis);
        for (idx, &out_j) in pending.iter().enumerate() {
            for i in 0..m {
                u.set(i, out_j, extra.get(i, idx));
            }
        }
    }

    let mut vt = DenseMatrix::zeros(n, n);
    for (out_j, &src_j) in order.iter().enumerate() {
        for (i, &v) in v_cols[src_j].iter().enumerate() {
            vt.set(out_j, i, v);
        }
    }

    Ok(SvdResult { u, sigma, vt })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    debug_assert!(p < q);
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
        let new_p = c * *xp - s * *xq;
        let new_q = s * *xp + c * *xq;
        *xp = new_p;
        *xq = new_q;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest-|entry|-non-negative convention on each U column, paired with the
/// matching Vt row so the product is unchanged.
fn apply_sign_convention(dec: &mut SvdResult) {
    let k = dec.sigma.len();
    for j in 0..k {
        if column_needs_flip(&dec.u, j) {
            negate_col(&mut dec.u, j);
            for i in 0..dec.vt.cols() {
                let x = dec.vt.get(j, i);
                dec.vt.set(j, i, -x);
            }
        }
    }
}

fn column_needs_flip(m: &DenseMatrix, j: usize) -> bool {
    let mut best_abs = -1.0_f64;
    let mut best_val = 0.0_f64;
    for i in 0..m.rows() {
        let x = m.get(i, j);
        if x.abs() > best_abs {
            best_abs = x.abs();
            best_val = x;
        }
    }
    best_val < 0.0
}

fn fix_column_sign(m: &mut DenseMatrix, j: usize) {
    if column_needs_flip(m, j) {
        negate_col(m, j);
    }
}

fn negate_col(m: &mut DenseMatrix, j: usize) {
    for i in 0..m.rows() {
        let x = m.get(i, j);
        m.set(i, j, -x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_offdiag_gram(q: &DenseMatrix) -> f64 {
        // max |Q^T Q - I|
        let g = q.t().matmul(q);
        let mut worst = 0.0_f64;
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.get(i, j) - target).abs());
            }
        }
        worst
    }

    fn reconstruct(dec: &SvdResult) -> DenseMatrix {
        dec.u.scale_cols(&dec.sigma).matmul(&dec.vt)
    }

    /// Planted-rank test matrix: sum of k orthonormal outer products with
    /// singular values in [1, 10].
    pub(crate) fn planted_matrix(rows: usize, cols: usize, rank: usize, seed: u64) -> DenseMatrix {
        let u1 = random_orthonormal(rows, rank, derive_seed(seed, 1)).unwrap();
        let v1 = random_orthonormal(cols, rank, derive_seed(seed, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
        let sigmas: Vec<f64> = (0..rank).map(|_| 1.0 + 9.0 * rng.gen::<f64>()).collect();
        u1.scale_cols(&sigmas).matmul(&v1.t())
    }

    #[test]
    fn svd_identity() {
        let dec = svd(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(dec.sigma, vec![1.0, 1.0, 1.0]);
        assert_eq!(dec.u, DenseMatrix::identity(3));
        assert_eq!(dec.vt, DenseMatrix::identity(3));
    }

    #[test]
    fn svd_zero_matrix() {
        let dec = svd(&DenseMatrix::zeros(3, 3)).unwrap();
        assert_eq!(dec.sigma, vec![0.0, 0.0, 0.0]);
        assert!(max_abs_offdiag_gram(&dec.u) < 1e-12);
        assert!(max_abs_offdiag_gram(&dec.vt.t()) < 1e-12);
    }

    #[test]
    fn svd_rank_one_outer_product() {
        // u = (1,2,2), v = (3,0,4): |u| = 3, |v| = 5, sigma = (15, 0, 0).
        let u = [1.0, 2.0, 2.0];
        let v = [3.0, 0.0, 4.0];
        let m = DenseMatrix::from_fn(3, 3, |i, j| u[i] * v[j]);
        let dec = svd(&m).unwrap();
        assert!((dec.sigma[0] - 15.0).abs() < 1e-12 * 15.0);
        assert!(dec.sigma[1] <= 1e-12 * 15.0);
        assert!(dec.sigma[2] <= 1e-12 * 15.0);
        // Oracle: direct reconstruction.
        assert!(reconstruct(&dec).max_abs_diff(&m) < 1e-12 * 15.0);
        assert!(max_abs_offdiag_gram(&dec.u) < 1e-12);
    }

    #[test]
    fn svd_reconstructs_random_64() {
        let m = gaussian_matrix(64, 64, 7, 1.0);
        let dec = svd(&m).unwrap();
        let err = reconstruct(&dec).sub(&m).fro_norm() / m.fro_norm();
        assert!(err < 1e-8, "relative reconstruction error {err}");
        assert!(max_abs_offdiag_gram(&dec.u) < 1e-10);
        assert!(max_abs_offdiag_gram(&dec.vt.t()) < 1e-10);
        assert!(dec.sigma.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn svd_rectangular_shapes() {
        for (rows, cols) in [(8, 3), (3, 8), (5, 5), (1, 4), (4, 1)] {
            let m = gaussian_matrix(rows, cols, 11 + rows as u64 * 31 + cols as u64, 1.0);
            let dec = svd(&m).unwrap();
            let k = rows.min(cols);
            assert_eq!(dec.u.rows(), rows);
            assert_eq!(dec.u.cols(), k);
            assert_eq!(dec.sigma.len(), k);
            assert_eq!(dec.vt.rows(), k);
            assert_eq!(dec.vt.cols(), cols);
            let err = reconstruct(&dec).sub(&m).fro_norm() / m.fro_norm();
            assert!(err < 1e-10, "{rows}x{cols}: {err}");
            assert!(max_abs_offdiag_gram(&dec.u) < 1e-10);
            assert!(max_abs_offdiag_gram(&dec.vt.t()) < 1e-10);
        }
    }

    #[test]
    fn svd_deterministic_across_calls() {
        let m = gaussian_matrix(32, 32, 13, 1.0);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a.u.data(), b.u.data());
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.vt.data(), b.vt.data());
    }

    #[test]
    fn svd_sign_convention_holds() {
        let m = gaussian_matrix(16, 10, 99, 1.0);
        let dec = svd(&m).unwrap();
        for j in 0..dec.sigma.len() {
            assert!(!column_needs_flip(&dec.u, j), "column {j} violates convention");
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let m = DenseMatrix::new(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(svd(&m), Err(NumericsError::NonFinite)));
    }

    #[test]
    fn numerical_rank_cases() {
        assert_eq!(numerical_rank(&[1.0, 1.0, 1.0], 1e-5), 3);
        assert_eq!(numerical_rank(&[0.0, 0.0], 1e-5), 0);
        // 1e-3 > 1e-4 threshold, 1e-9 below it.
        assert_eq!(numerical_rank(&[10.0, 1e-3, 1e-9], 1e-5), 2);
        assert_eq!(numerical_rank(&[], 1e-5), 0);
    }

    #[test]
    fn null_space_left_simple() {
        // W = [[1,0],[0,0]]: left null space is span{(0,1)}.
        let w = DenseMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let u_hat = null_space_left(&w, DEFAULT_TAU).unwrap();
        assert_eq!((u_hat.rows(), u_hat.cols()), (2, 1));
        assert!((u_hat.get(0, 0)).abs() < 1e-14);
        assert!((u_hat.get(1, 0) - 1.0).abs() < 1e-14);
        // W^T U_hat = 0 by hand.
        assert!(w.t().matmul(&u_hat).max_abs() < 1e-14);
    }

    #[test]
    fn null_space_right_simple() {
        let w = DenseMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let v_hat = null_space_right(&w, DEFAULT_TAU).unwrap();
        assert_eq!((v_hat.rows(), v_hat.cols()), (1, 2));
        assert!((v_hat.get(0, 0)).abs() < 1e-14);
        assert!((v_hat.get(0, 1) - 1.0).abs() < 1e-14);
        assert!(w.matmul(&v_hat.t()).max_abs() < 1e-14);
    }

    #[test]
    fn null_space_full_rank_is_empty() {
        let w = DenseMatrix::identity(4);
        assert_eq!(null_space_left(&w, DEFAULT_TAU).unwrap().cols(), 0);
        assert_eq!(null_space_right(&w, DEFAULT_TAU).unwrap().rows(), 0);
    }

    #[test]
    fn null_space_of_zero_spans_everything() {
        let w = DenseMatrix::zeros(3, 3);
        let u_hat = null_space_left(&w, DEFAULT_TAU).unwrap();
        assert_eq!(u_hat.cols(), 3);
        // U_hat U_hat^T = I_3.
        let outer = u_hat.matmul(&u_hat.t());
        assert!(outer.max_abs_diff(&DenseMatrix::identity(3)) < 1e-12);

        let w = DenseMatrix::zeros(2, 3);
        let v_hat = null_space_right(&w, DEFAULT_TAU).unwrap();
        assert_eq!(v_hat.rows(), 3);
        let outer = v_hat.t().matmul(&v_hat);
        assert!(outer.max_abs_diff(&DenseMatrix::identity(3)) < 1e-12);
    }

    #[test]
    fn null_space_rectangular_completion() {
        // 5x3 rank-2: left nullity 3 (one thin + two completion), right nullity 1.
        let w = planted_matrix(5, 3, 2, 21);
        let bases = null_bases(&w, DEFAULT_TAU).unwrap();
        assert_eq!(bases.rank, 2);
        assert_eq!(bases.left.cols(), 3);
        assert_eq!(bases.right.rows(), 1);
        assert!(max_abs_offdiag_gram(&bases.left) < 1e-10);
        assert!(w.t().matmul(&bases.left).max_abs() < 1e-12);
        assert!(w.matmul(&bases.right.t()).max_abs() < 1e-12);
    }

    #[test]
    fn planted_rank_detection() {
        // Rank-nullity at d = 64 for planted deficiencies 0, 1, 4, 16.
        for k in [0usize, 1, 4, 16] {
            let rank = 64 - k;
            let w = planted_matrix(64, 64, rank, 40 + k as u64);
            let report = analyze_matrix(&w, DEFAULT_TAU).unwrap();
            assert_eq!(report.numerical_rank, rank, "k={k}");
            assert_eq!(report.numerical_rank + report.nullity_right, 64);
            assert_eq!(report.numerical_rank + report.nullity_left, 64);
        }
    }

    #[test]
    fn random_orthonormal_deterministic_and_orthonormal() {
        let a = random_orthonormal(8, 3, 7).unwrap();
        let b = random_orthonormal(8, 3, 7).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(max_abs_offdiag_gram(&a) < 1e-10);
        let c = random_orthonormal(8, 3, 8).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn random_orthonormal_edge_cases() {
        let empty = random_orthonormal(4, 0, 1).unwrap();
        assert_eq!((empty.rows(), empty.cols()), (4, 0));
        assert!(matches!(
            random_orthonormal(2, 3, 1),
            Err(NumericsError::TooManyColumns { .. })
        ));
    }

    #[test]
    fn complement_of_empty_is_identity() {
        let q = DenseMatrix::zeros(3, 0);
        let c = orthonormal_complement(&q);
        assert_eq!(c, DenseMatrix::identity(3));
    }

    #[test]
    fn derive_seed_spreads() {
        let a = derive_seed(0, 0);
        let b = derive_seed(0, 1);
        let c = derive_seed(1, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(0, 0));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            /// SVD factor invariants and rank-nullity on arbitrary small
            /// matrices, including degenerate and repeated entries.
            #[test]
            fn svd_contract_holds(
                rows in 1usize..10,
                cols in 1usize..10,
                raw in proptest::collection::vec(-5.0f64..5.0, 100),
                zero_mask in proptest::collection::vec(proptest::bool::ANY, 100),
            ) {
                let m = DenseMatrix::from_fn(rows, cols, |i, j| {
                    let k = i * cols + j;
                    if zero_mask[k] { 0.0 } else { raw[k] }
                });
                let dec = svd(&m).unwrap();
                prop_assert!(dec.sigma.windows(2).all(|w| w[0] >= w[1]));
                prop_assert!(dec.sigma.iter().all(|&s| s >= 0.0));
                prop_assert!(max_abs_offdiag_gram(&dec.u) < 1e-10);
                prop_assert!(max_abs_offdiag_gram(&dec.vt.t()) < 1e-10);
                let scale = dec.sigma[0].max(1.0);
                prop_assert!(reconstruct(&dec).max_abs_diff(&m) < 1e-9 * scale);

                let bases = null_bases(&m, DEFAULT_TAU).unwrap();
                prop_assert_eq!(bases.rank + bases.right.rows(), cols);
                prop_assert_eq!(bases.rank + bases.left.cols(), rows);
                prop_assert!(m.t().matmul(&bases.left).max_abs() < DEFAULT_TAU * scale * 2.0);
                prop_assert!(m.matmul(&bases.right.t()).max_abs() < DEFAULT_TAU * scale * 2.0);
            }
        }
    }
}
