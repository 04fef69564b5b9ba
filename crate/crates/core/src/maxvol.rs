//! Maximum-volume row selection for tall matrices.
//!
//! `maxvol` finds `r` rows of an `n x r` matrix whose square submatrix is
//! locally dominant: no single row swap grows `|det|` by more than `1 + tol`.
//! `rect_maxvol` then greedily appends rows with the largest residual
//! projection.

use log::debug;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 0.05;
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone)]
pub struct MaxvolResult {
    pub row_indices: Vec<usize>,
    /// `C` with `A ≈ C · A[row_indices, :]`.
    pub coefficients: DMatrix<f64>,
    /// The input was rank deficient and a diagonal jitter was added.
    pub rank_deficient: bool,
    /// The swap loop ended because every `|C|` entry was within `1 + tol`.
    pub converged: bool,
    pub iterations: usize,
}

/// Rows picked by Gaussian elimination with partial pivoting, plus a flag
/// telling whether some pivot was numerically zero.
fn pivoted_rows(a: &DMatrix<f64>) -> (Vec<usize>, bool) {
    let (n, r) = a.shape();
    let mut m = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = a.norm().max(f64::MIN_POSITIVE);
    let mut deficient = false;
    for j in 0..r {
        let mut best = j;
        for i in j + 1..n {
            if m[(perm[i], j)].abs() > m[(perm[best], j)].abs() {
                best = i;
            }
        }
        perm.swap(j, best);
        let p = perm[j];
        let pivot = m[(p, j)];
        if pivot.abs() <= 1e-14 * scale {
            deficient = true;
            continue;
        }
        for &i in &perm[j + 1..] {
            let f = m[(i, j)] / pivot;
            if f != 0.0 {
                for c in j..r {
                    m[(i, c)] -= f * m[(p, c)];
                }
            }
        }
    }
    perm.truncate(r);
    (perm, deficient)
}

fn coefficients(a: &DMatrix<f64>, rows: &[usize]) -> Option<DMatrix<f64>> {
    let b = a.select_rows(rows);
    let inv = b.try_inverse()?;
    let c = a * inv;
    c.iter().all(|v| v.is_finite()).then_some(c)
}

fn argmax_abs(c: &DMatrix<f64>) -> (usize, usize, f64) {
    let mut best = (0, 0, -1.0);
    // Row-major scan so ties resolve to the lowest row index.
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            let v = c[(i, j)].abs();
            if v > best.2 {
                best = (i, j, v);
            }
        }
    }
    best
}

/// Square maxvol on a tall matrix (`rows >= cols`).
pub fn maxvol(a: &DMatrix<f64>, tol: f64, max_iters: usize) -> Result<MaxvolResult> {
    let (n, r) = a.shape();
    if r == 0 || n < r {
        return Err(Error::Domain(format!(
            "maxvol needs a tall matrix, got {n}x{r}"
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("maxvol input has non-finite entries".into()));
    }
    let (mut rows, mut deficient) = pivoted_rows(a);
    let mut work = a.clone();
    let mut c = if deficient {
        None
    } else {
        coefficients(&work, &rows)
    };
    if c.is_none() {
        deficient = true;
        let norm = a.norm();
        let eps = if norm > 0.0 { 1e-12 * norm } else { 1e-12 };
        for (j, &row) in rows.iter().enumerate() {
            work[(row, j)] += eps;
        }
        c = coefficients(&work, &rows);
        if c.is_none() {
            // Pivot rows collided on a zero block; fall back to the leading rows.
            rows = (0..r).collect();
            work = a.clone();
            for j in 0..r {
                work[(j, j)] += eps;
            }
            c = coefficients(&work, &rows);
        }
        debug!("maxvol: rank-deficient {n}x{r} input, added diagonal jitter {eps:e}");
    }
    let mut c = c.ok_or_else(|| Error::Degenerate("maxvol submatrix is singular".into()))?;

    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        let (i, j, v) = argmax_abs(&c);
        if v <= 1.0 + tol {
            converged = true;
            break;
        }
        iterations += 1;
        // Sherman-Morrison update for replacing basis row j by row i.
        let col = c.column(j).into_owned();
        let mut row = c.row(i).into_owned();
        row[j] -= 1.0;
        let pivot = c[(i, j)];
        c -= &col * &row / pivot;
        rows[j] = i;
    }
    if !converged {
        let (_, _, v) = argmax_abs(&c);
        converged = v <= 1.0 + tol;
    }
    Ok(MaxvolResult {
        row_indices: rows,
        coefficients: c,
        rank_deficient: deficient,
        converged,
        iterations,
    })
}

/// Rectangular maxvol: the square maxvol set extended greedily with the row
/// of largest coefficient norm, until that norm is at most `1 + tol` (and at
/// least `min_rows` are chosen) or `max_rows` is reached.
pub fn rect_maxvol(
    a: &DMatrix<f64>,
    min_rows: usize,
    max_rows: usize,
    tol: f64,
) -> Result<MaxvolResult> {
    let (n, r) = a.shape();
    if !(r <= min_rows && min_rows <= max_rows && max_rows <= n) {
        return Err(Error::Domain(format!(
            "rect_maxvol needs {r} <= min_rows ({min_rows}) <= max_rows ({max_rows}) <= {n}"
        )));
    }
    let square = maxvol(a, tol, DEFAULT_MAX_ITERS)?;
    let mut rows = square.row_indices.clone();
    let mut c = square.coefficients.clone();
    let mut selected = vec![false; n];
    for &i in &rows {
        selected[i] = true;
    }
    let mut norms: Vec<f64> = (0..n).map(|i| c.row(i).norm_squared()).collect();
    while rows.len() < max_rows {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            if best.map_or(true, |(_, v)| norms[i] > v) {
                best = Some((i, norms[i]));
            }
        }
        let Some((i, v)) = best else { break };
        if rows.len() >= min_rows && v.sqrt() <= 1.0 + tol {
            break;
        }
        let ci = c.row(i).into_owned();
        let denom = 1.0 + ci.norm_squared();
        let proj = &c * ci.transpose() / denom;
        let k = c.ncols();
        let mut next = DMatrix::zeros(n, k + 1);
        next.view_mut((0, 0), (n, k)).copy_from(&(&c - &proj * &ci));
        next.view_mut((0, k), (n, 1)).copy_from(&proj);
        c = next;
        for (idx, norm) in norms.iter_mut().enumerate() {
            *norm -= proj[idx] * proj[idx] * denom;
        }
        selected[i] = true;
        rows.push(i);
    }
    Ok(MaxvolResult {
        row_indices: rows,
        coefficients: c,
        rank_deficient: square.rank_deficient,
        converged: square.converged,
        iterations: square.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, r, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn abs_det(a: &DMatrix<f64>, rows: &[usize]) -> f64 {
        a.select_rows(rows).determinant().abs()
    }

    fn gram_det(a: &DMatrix<f64>, rows: &[usize]) -> f64 {
        let b = a.select_rows(rows);
        (b.transpose() * b).determinant()
    }

    fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for last in k - 1..n {
            for mut c in combinations(last, k - 1) {
                c.push(last);
                out.push(c);
            }
        }
        out
    }

    #[test]
    fn identity_over_zeros() {
        let mut a = DMatrix::zeros(5, 2);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        let res = maxvol(&a, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        let mut rows = res.row_indices.clone();
        rows.sort();
        assert_eq!(rows, vec![0, 1]);
        assert!(res.converged && !res.rank_deficient);
    }

    #[test]
    fn four_by_two_reaches_max_det() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 2.0, 2.0, -3.0, 1.0]);
        let res = maxvol(&a, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        let best = combinations(4, 2)
            .iter()
            .map(|rows| abs_det(&a, rows))
            .fold(0.0, f64::max);
        assert!((abs_det(&a, &res.row_indices) - best).abs() < 1e-12);
        assert!(res.coefficients.iter().all(|v| v.abs() <= 1.0 + DEFAULT_TOL + 1e-12));
    }

    #[test]
    fn coefficients_reconstruct_matrix() {
        let a = random_matrix(30, 4, 1);
        let res = maxvol(&a, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        let recon = &res.coefficients * a.select_rows(&res.row_indices);
        assert!((recon - &a).amax() < 1e-10);
    }

    #[test]
    fn local_dominance_exhaustive() {
        for seed in 0..20 {
            let (n, r) = (10 + seed as usize, 1 + seed as usize % 4);
            let a = random_matrix(n, r, seed);
            let res = maxvol(&a, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            assert!(res.converged);
            let base = abs_det(&a, &res.row_indices);
            for j in 0..r {
                for i in 0..n {
                    if res.row_indices.contains(&i) {
                        continue;
                    }
                    let mut rows = res.row_indices.clone();
                    rows[j] = i;
                    assert!(abs_det(&a, &rows) <= (1.0 + DEFAULT_TOL) * base * (1.0 + 1e-9));
                }
            }
        }
    }

    #[test]
    fn rank_deficient_input_is_flagged() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0, -1.0, -2.0]);
        let res = maxvol(&a, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert!(res.rank_deficient);
        assert_eq!(res.row_indices.len(), 2);
        let z = DMatrix::zeros(3, 2);
        let res = maxvol(&z, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert!(res.rank_deficient);
    }

    #[test]
    fn wide_matrix_is_rejected() {
        assert!(matches!(
            maxvol(&DMatrix::zeros(2, 3), DEFAULT_TOL, 10),
            Err(Error::Domain(_))
        ));
        assert!(rect_maxvol(&DMatrix::zeros(5, 2), 1, 3, 0.0).is_err());
    }

    #[test]
    fn non_convergence_is_flagged() {
        let a = random_matrix(40, 4, 7);
        let full = maxvol(&a, 0.0, DEFAULT_MAX_ITERS).unwrap();
        assert!(full.iterations > 0);
        let res = maxvol(&a, 0.0, 0).unwrap();
        assert_eq!(res.iterations, 0);
        assert!(!res.converged);
    }

    #[test]
    fn rect_degenerate_range_matches_square() {
        let a = random_matrix(20, 3, 2);
        let sq = maxvol(&a, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        let rect = rect_maxvol(&a, 3, 3, DEFAULT_TOL).unwrap();
        assert_eq!(sq.row_indices, rect.row_indices);
    }

    #[test]
    fn rect_identity_rows_first() {
        let mut a = DMatrix::zeros(6, 2);
        a[(3, 0)] = 1.0;
        a[(5, 1)] = 1.0;
        let res = rect_maxvol(&a, 4, 5, DEFAULT_TOL).unwrap();
        let mut head = res.row_indices[..2].to_vec();
        head.sort();
        assert_eq!(head, vec![3, 5]);
        assert_eq!(res.row_indices.len(), 4);
    }

    #[test]
    fn rect_volume_grows() {
        let a = random_matrix(20, 3, 3);
        let sq = maxvol(&a, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        let rect = rect_maxvol(&a, 3, 6, DEFAULT_TOL).unwrap();
        assert!(rect.row_indices.len() >= 3 && rect.row_indices.len() <= 6);
        assert!(rect.row_indices.starts_with(&sq.row_indices));
        let mut prev = gram_det(&a, &rect.row_indices[..3]);
        assert!((prev - gram_det(&a, &sq.row_indices)).abs() < 1e-12);
        for k in 4..=rect.row_indices.len() {
            let g = gram_det(&a, &rect.row_indices[..k]);
            assert!(g >= prev * (1.0 - 1e-12));
            prev = g;
        }
        let recon = &rect.coefficients * a.select_rows(&rect.row_indices);
        assert!((recon - &a).amax() < 1e-9);
    }

    #[test]
    fn permutation_equivariance() {
        let a = random_matrix(25, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut perm: Vec<usize> = (0..25).collect();
        for i in (1..25).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pa = a.select_rows(&perm);
        let res = maxvol(&a, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        let pres = maxvol(&pa, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        let mut x: Vec<usize> = res.row_indices.clone();
        let mut y: Vec<usize> = pres.row_indices.iter().map(|&i| perm[i]).collect();
        x.sort();
        y.sort();
        assert_eq!(x, y);
    }
}
