//! Canonical correlation analysis of sub-layer activations, aligned
//! coefficient construction, and effective-rank measurement.
//!
//! Analysis always runs in f64 regardless of the model precision. CCA is
//! computed as an SVD of the ridge-whitened cross-covariance; the returned
//! transforms are full square matrices (the canonical directions completed
//! to an orthonormal basis), so coefficients can be re-expressed in aligned
//! coordinates.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Ridge scale added to both auto-covariances: eps * trace / dim.
pub const RIDGE_SCALE: f64 = 1e-6;

/// CCA of two activation matrices (rows = dimensions, columns = shared
/// observations).
#[derive(Debug, Clone)]
pub struct CcaResult {
    /// Full square transform for the first input (p x p): canonical
    /// coordinates are `p_i * (z - mean_i)`.
    pub p_i: DMatrix<f64>,
    /// Full square transform for the second input (q x q).
    pub p_j: DMatrix<f64>,
    pub mean_i: DVector<f64>,
    pub mean_j: DVector<f64>,
    /// Canonical correlations, non-increasing, clamped to [0, 1].
    pub correlations: Vec<f64>,
}

impl CcaResult {
    pub fn mean_correlation(&self) -> f64 {
        if self.correlations.is_empty() {
            return 0.0;
        }
        self.correlations.iter().sum::<f64>() / self.correlations.len() as f64
    }
}

/// Canonical correlation analysis of `zi` (p x n) against `zj` (q x n).
/// Requires more observations than dimensions; inputs are centered
/// internally.
pub fn cca_align(zi: &DMatrix<f64>, zj: &DMatrix<f64>) -> Result<CcaResult> {
    let (p, n) = zi.shape();
    let (q, n2) = zj.shape();
    if n != n2 {
        return Err(Error::config(format!(
            "activation matrices disagree on observations: {n} vs {n2}"
        )));
    }
    if p == 0 || q == 0 {
        return Err(Error::config("empty activation matrix"));
    }
    if n <= p.max(q) {
        return Err(Error::config(format!(
            "CCA needs more observations than dimensions: n={n}, dims {p}/{q}"
        )));
    }

    let mean_i = zi.column_mean();
    let mean_j = zj.column_mean();
    let zi_c = center(zi, &mean_i);
    let zj_c = center(zj, &mean_j);
    let scale = 1.0 / (n as f64 - 1.0);
    let sxx = &zi_c * zi_c.transpose() * scale;
    let syy = &zj_c * zj_c.transpose() * scale;
    let sxy = &zi_c * zj_c.transpose() * scale;

    let wx = inv_sqrt_with_ridge(&sxx)?;
    let wy = inv_sqrt_with_ridge(&syy)?;
    let m = &wx * &sxy * &wy;

    let svd = m.svd(true, true);
    let u = svd.u.expect("SVD with u requested");
    let vt = svd.v_t.expect("SVD with v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("finite singular values")
    });
    let correlations: Vec<f64> = order
        .iter()
        .map(|&k| svd.singular_values[k].clamp(0.0, 1.0))
        .collect();
    let u_sorted = DMatrix::from_fn(p, order.len(), |r, c| u[(r, order[c])]);
    let v_sorted = DMatrix::from_fn(q, order.len(), |r, c| vt[(order[c], r)]);

    let u_full = complete_orthonormal(&u_sorted, p)?;
    let v_full = complete_orthonormal(&v_sorted, q)?;
    Ok(CcaResult {
        p_i: u_full.transpose() * &wx,
        p_j: v_full.transpose() * &wy,
        mean_i,
        mean_j,
        correlations,
    })
}

fn center(z: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = z.clone();
    for mut col in out.column_iter_mut() {
        col -= mean;
    }
    out
}

/// Symmetric inverse square root of a covariance matrix after adding the
/// ridge eps * trace / dim to the diagonal.
fn inv_sqrt_with_ridge(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = s.nrows();
    let trace = s.trace();
    if !trace.is_finite() || trace <= 0.0 {
        return Err(Error::numeric(
            "degenerate covariance (zero or non-finite variance)",
        ));
    }
    let ridge = RIDGE_SCALE * trace / dim as f64;
    let mut ridged = s.clone();
    for d in 0..dim {
        ridged[(d, d)] += ridge;
    }
    let eig = SymmetricEigen::new(ridged);
    let floor = ridge * 1e-6;
    let inv_sqrt = DVector::from_iterator(
        dim,
        eig.eigenvalues.iter().map(|&l| 1.0 / l.max(floor).sqrt()),
    );
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose())
}

/// Extends `basis` (orthonormal columns) to a full dim x dim orthonormal
/// matrix by Gram-Schmidt against the coordinate axes.
fn complete_orthonormal(basis: &DMatrix<f64>, dim: usize) -> Result<DMatrix<f64>> {
    let mut cols: Vec<DVector<f64>> = basis.column_iter().map(|c| c.into_owned()).collect();
    cols.truncate(dim);
    let mut axis = 0;
    while cols.len() < dim {
        if axis >= dim {
            return Err(Error::numeric("failed to complete orthonormal basis"));
        }
        let mut v = DVector::zeros(dim);
        v[axis] = 1.0;
        axis += 1;
        for c in &cols {
            let d = c.dot(&v);
            v -= c * d;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Re-expresses a coefficient matrix in aligned coordinates: Q * A * P^-1.
pub fn aligned_coefficients(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (c, f) = a.shape();
    if q.shape() != (c, c) || p.shape() != (f, f) {
        return Err(Error::config(format!(
            "transform shapes {:?}/{:?} do not match coefficients {c}x{f}",
            q.shape(),
            p.shape()
        )));
    }
    let p_inv = p.clone().try_inverse().ok_or_else(|| {
        Error::numeric("alignment transform P is singular; increase the CCA ridge")
    })?;
    Ok(q * a * p_inv)
}

/// Effective-rank definition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankMode {
    /// exp of the Shannon entropy of the normalized singular-value
    /// distribution.
    Entropy,
    /// Count of singular values at least tau * sigma_max.
    Threshold(f64),
}

pub const DEFAULT_RANK_THRESHOLD: f64 = 0.01;

/// Continuous rank surrogate of a matrix; an all-zero matrix has rank 0.
pub fn effective_rank(m: &DMatrix<f64>, mode: RankMode) -> f64 {
    let svd = m.clone().svd(false, false);
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    match mode {
        RankMode::Entropy => {
            let entropy: f64 = sigma
                .iter()
                .filter(|&&s| s > 0.0)
                .map(|&s| {
                    let p = s / total;
                    -p * p.ln()
                })
                .sum();
            entropy.exp()
        }
        RankMode::Threshold(tau) => {
            let max = sigma.iter().cloned().fold(0.0, f64::max);
            sigma.iter().filter(|&&s| s >= tau * max).count() as f64
        }
    }
}

/// Vertical concatenation [top; bottom] of two matrices with equal widths.
pub fn vstack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if top.ncols() != bottom.ncols() {
        return Err(Error::config(format!(
            "cannot stack widths {} and {}",
            top.ncols(),
            bottom.ncols()
        )));
    }
    let rows = top.nrows() + bottom.nrows();
    Ok(DMatrix::from_fn(rows, top.ncols(), |r, c| {
        if r < top.nrows() {
            top[(r, c)]
        } else {
            bottom[(r - top.nrows(), c)]
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_matrix(rng: &mut ChaCha20Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn well_conditioned(rng: &mut ChaCha20Rng, n: usize) -> DMatrix<f64> {
        random_matrix(rng, n, n) + DMatrix::identity(n, n) * 3.0
    }

    #[test]
    fn exact_linear_relation_gives_unit_correlations() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let zi = random_matrix(&mut rng, 4, 600);
        let r = well_conditioned(&mut rng, 4);
        let zj = &r * &zi;
        let res = cca_align(&zi, &zj).unwrap();
        for rho in &res.correlations {
            assert!(*rho > 1.0 - 1e-5, "rho {rho}");
        }
    }

    #[test]
    fn independent_noise_gives_small_correlations() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let zi = random_matrix(&mut rng, 4, 20_000);
        let zj = random_matrix(&mut rng, 4, 20_000);
        let res = cca_align(&zi, &zj).unwrap();
        for rho in &res.correlations {
            assert!(*rho < 0.1, "rho {rho}");
        }
    }

    #[test]
    fn correlations_match_generalized_eigenvalue_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let zi = random_matrix(&mut rng, 3, 400);
        let mix = random_matrix(&mut rng, 3, 4);
        let zj4 = random_matrix(&mut rng, 4, 400);
        let zj = &zj4 + &(mix.transpose() * &zi); // partial dependence
        let res = cca_align(&zi, &zj).unwrap();

        // Oracle: eigenvalues of Sxx^-1/2 Sxy Syy^-1 Syx Sxx^-1/2 are rho^2.
        let n = 400.0;
        let ci = &zi - zi.column_mean() * DMatrix::from_element(1, 400, 1.0);
        let cj = &zj - zj.column_mean() * DMatrix::from_element(1, 400, 1.0);
        let sxx = &ci * ci.transpose() / (n - 1.0);
        let syy = &cj * cj.transpose() / (n - 1.0);
        let sxy = &ci * cj.transpose() / (n - 1.0);
        let ridge = |s: &DMatrix<f64>| {
            let mut r = s.clone();
            let eps = RIDGE_SCALE * s.trace() / s.nrows() as f64;
            for d in 0..s.nrows() {
                r[(d, d)] += eps;
            }
            r
        };
        let sxx_r = ridge(&sxx);
        let syy_r = ridge(&syy);
        let eig_x = SymmetricEigen::new(sxx_r.clone());
        let half = &eig_x.eigenvectors
            * DMatrix::from_diagonal(&eig_x.eigenvalues.map(|l| 1.0 / l.sqrt()))
            * eig_x.eigenvectors.transpose();
        let b = &half * &sxy * syy_r.try_inverse().unwrap() * sxy.transpose() * &half;
        let mut evals: Vec<f64> = SymmetricEigen::new(b)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        evals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (rho, ev) in res.correlations.iter().zip(evals.iter()) {
            assert!((rho * rho - ev).abs() < 1e-8, "rho^2 {} vs {ev}", rho * rho);
        }
    }

    #[test]
    fn correlations_invariant_under_invertible_transforms() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let zi = random_matrix(&mut rng, 5, 800);
        let mix = random_matrix(&mut rng, 5, 5) * 0.4;
        let zj = &zi * 0.6 + &(mix * random_matrix(&mut rng, 5, 800)) * 0.8;
        let base = cca_align(&zi, &zj).unwrap();
        let t1 = well_conditioned(&mut rng, 5);
        let t2 = well_conditioned(&mut rng, 5);
        let moved = cca_align(&(&t1 * &zi), &(&t2 * &zj)).unwrap();
        // The ridge term is not exactly transform-invariant, so agreement is
        // only expected down to the regularization scale.
        for (a, b) in base.correlations.iter().zip(moved.correlations.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn too_few_observations_rejected() {
        let zi = DMatrix::<f64>::zeros(8, 8);
        let zj = DMatrix::<f64>::zeros(8, 8);
        assert!(cca_align(&zi, &zj).is_err());
    }

    #[test]
    fn aligned_coefficients_identity_and_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 3, 5);
        let id3 = DMatrix::identity(3, 3);
        let id5 = DMatrix::identity(5, 5);
        let same = aligned_coefficients(&a, &id3, &id5).unwrap();
        assert!((&same - &a).norm() < 1e-12);

        let q = well_conditioned(&mut rng, 3);
        let p = well_conditioned(&mut rng, 5);
        let tilde = aligned_coefficients(&a, &q, &p).unwrap();
        let oracle = &q * &a * p.clone().try_inverse().unwrap();
        assert!((&tilde - &oracle).norm() < 1e-9);
    }

    #[test]
    fn aligned_coefficients_permutation_preserves_spectrum() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let a = random_matrix(&mut rng, 4, 4);
        // Cyclic permutation matrices.
        let perm = |n: usize| DMatrix::from_fn(n, n, |r, c| if (r + 1) % n == c { 1.0 } else { 0.0 });
        let tilde = aligned_coefficients(&a, &perm(4), &perm(4)).unwrap();
        let mut s1: Vec<f64> = a.svd(false, false).singular_values.iter().copied().collect();
        let mut s2: Vec<f64> = tilde.svd(false, false).singular_values.iter().copied().collect();
        s1.sort_by(|x, y| y.partial_cmp(x).unwrap());
        s2.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (x, y) in s1.iter().zip(s2.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn effective_rank_identity_and_rank_one() {
        let id = DMatrix::<f64>::identity(5, 5);
        assert!((effective_rank(&id, RankMode::Entropy) - 5.0).abs() < 1e-9);
        assert!((effective_rank(&id, RankMode::Threshold(0.01)) - 5.0).abs() < 1e-12);
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let outer = &u * u.transpose();
        assert!((effective_rank(&outer, RankMode::Entropy) - 1.0).abs() < 1e-9);
        assert!((effective_rank(&outer, RankMode::Threshold(0.01)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn effective_rank_closed_form_diagonal() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.5]));
        // sigma fractions 0.4, 0.4, 0.2.
        let expect = (-(0.4f64.ln() * 0.4 * 2.0 + 0.2f64.ln() * 0.2)).exp();
        let got = effective_rank(&d, RankMode::Entropy);
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 2.871746).abs() < 1e-4);
    }

    #[test]
    fn effective_rank_zero_matrix_is_zero() {
        let z = DMatrix::<f64>::zeros(3, 4);
        assert_eq!(effective_rank(&z, RankMode::Entropy), 0.0);
        assert_eq!(effective_rank(&z, RankMode::Threshold(0.01)), 0.0);
    }

    #[test]
    fn effective_rank_orthogonal_invariance() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let a = random_matrix(&mut rng, 4, 6);
        // Householder reflection as an exactly orthogonal transform.
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]).normalize();
        let h = DMatrix::identity(4, 4) - &v * v.transpose() * 2.0;
        let rotated = &h * &a;
        for mode in [RankMode::Entropy, RankMode::Threshold(0.01)] {
            let r1 = effective_rank(&a, mode);
            let r2 = effective_rank(&rotated, mode);
            assert!((r1 - r2).abs() < 1e-9);
        }
    }

    #[test]
    fn vstack_shapes() {
        let a = DMatrix::<f64>::from_element(2, 3, 1.0);
        let b = DMatrix::<f64>::from_element(1, 3, 2.0);
        let s = vstack(&a, &b).unwrap();
        assert_eq!(s.shape(), (3, 3));
        assert_eq!(s[(2, 0)], 2.0);
        assert!(vstack(&a, &DMatrix::<f64>::zeros(1, 4)).is_err());
    }
}
