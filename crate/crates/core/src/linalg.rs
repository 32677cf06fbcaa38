//! Dense linear-algebra helpers. Factorizations are delegated to nalgebra;
//! everything here is small (at most a few hundred rows).

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::vecmath;

/// Gram-Schmidt completion: extend the given orthonormal prefix to a full
/// orthonormal basis of `R^dim`, preferring canonical directions for the new
/// vectors. The prefix is re-orthonormalized defensively.
pub fn orthonormal_complete(prefix: &[Vec<f64>], dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    let mut feed: Vec<Vec<f64>> = prefix.to_vec();
    for k in 0..dim {
        feed.push(vecmath::unit(dim, k));
    }
    for mut v in feed {
        for b in &basis {
            let c = vecmath::dot(&v, b);
            vecmath::axpy(-c, b, &mut v);
        }
        if vecmath::normalize(&mut v) > 1e-10 {
            basis.push(v);
            if basis.len() == dim {
                break;
            }
        }
    }
    assert_eq!(basis.len(), dim, "orthonormal completion failed");
    basis
}

/// A unit vector orthogonal to every row, or None when the rows span the
/// whole space. `candidate_rng` drives tie-breaking among null directions.
pub fn null_space_unit(
    rows: &[Vec<f64>],
    dim: usize,
    rng: &mut impl Rng,
    randomize: bool,
) -> Option<Vec<f64>> {
    // Orthonormal basis of the row space.
    let mut row_basis: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let mut v = r.clone();
        for b in &row_basis {
            let c = vecmath::dot(&v, b);
            vecmath::axpy(-c, b, &mut v);
        }
        let scale = vecmath::norm(r).max(1.0);
        if vecmath::norm(&v) > 1e-12 * scale {
            vecmath::normalize(&mut v);
            row_basis.push(v);
        }
    }
    if row_basis.len() >= dim {
        return None;
    }
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    if randomize {
        candidates.push((0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect());
    }
    for k in 0..dim {
        candidates.push(vecmath::unit(dim, k));
    }
    for mut v in candidates {
        for b in &row_basis {
            let c = vecmath::dot(&v, b);
            vecmath::axpy(-c, b, &mut v);
        }
        if vecmath::normalize(&mut v) > 1e-10 {
            return Some(v);
        }
    }
    None
}

/// Haar-ish random rotation: Gram-Schmidt of a Gaussian matrix. Returned as
/// a list of orthonormal basis vectors.
#[cfg(test)]
pub fn random_orthonormal_basis(dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    use rand_distr::StandardNormal;
    loop {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
        for _ in 0..dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let c = vecmath::dot(&v, b);
                vecmath::axpy(-c, b, &mut v);
            }
            if vecmath::normalize(&mut v) > 1e-8 {
                basis.push(v);
            } else {
                break;
            }
        }
        if basis.len() == dim {
            return basis;
        }
    }
}

/// Solve `(G + lambda I) X = RHS` for symmetric positive semidefinite `G`,
/// escalating the ridge by factors of 10 up to `lambda_max` if the Cholesky
/// factorization fails. Returns the solution and the ridge actually used.
pub fn ridge_solve(
    g: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    lambda0: f64,
    lambda_max: f64,
) -> Option<(DMatrix<f64>, f64)> {
    let n = g.nrows();
    let mut lambda = lambda0;
    loop {
        let mut m = g.clone();
        for i in 0..n {
            m[(i, i)] += lambda;
        }
        if let Some(chol) = m.cholesky() {
            return Some((chol.solve(rhs), lambda));
        }
        lambda *= 10.0;
        if lambda > lambda_max {
            return None;
        }
    }
}

/// Largest singular value by power iteration on `M^T M`, to a relative
/// tolerance of 1e-10.
pub fn spectral_norm(m: &DMatrix<f64>, rng: &mut impl Rng) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let n = m.ncols();
    let mut v = DVector::<f64>::from_fn(n, |_, _| rng.gen::<f64>() - 0.5);
    if v.norm() == 0.0 {
        v[0] = 1.0;
    }
    v /= v.norm();
    let mut sigma = 0.0f64;
    for _ in 0..10_000 {
        let mv = m * &v;
        let w = m.transpose() * mv;
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let new_sigma = nw.sqrt();
        let done = (new_sigma - sigma).abs() <= 1e-10 * new_sigma.max(1.0);
        sigma = new_sigma;
        v = w / nw;
        if done {
            break;
        }
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn completion_is_orthonormal() {
        let u = {
            let mut v = vec![1.0, 1.0, 1.0, 1.0];
            vecmath::normalize(&mut v);
            v
        };
        let basis = orthonormal_complete(&[u.clone()], 4);
        assert_eq!(basis.len(), 4);
        assert_eq!(basis[0], u);
        for i in 0..4 {
            for j in 0..4 {
                let d = vecmath::dot(&basis[i], &basis[j]);
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12, "({i},{j}) -> {d}");
            }
        }
    }

    #[test]
    fn null_space_of_two_canonical_rows_is_third_axis() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let u = null_space_unit(&rows, 3, &mut rng, false).unwrap();
        assert!((u[2].abs() - 1.0).abs() < 1e-12);
        assert!(u[0].abs() < 1e-12 && u[1].abs() < 1e-12);
    }

    #[test]
    fn null_space_absent_for_full_rank() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(null_space_unit(&rows, 2, &mut rng, false).is_none());
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, -3.0, 2.0]));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = spectral_norm(&m, &mut rng);
        assert!((s - 3.0).abs() < 1e-8, "got {s}");
    }

    #[test]
    fn ridge_solver_recovers_exact_solution() {
        // G = A^T A with A invertible; lambda tiny keeps the answer close.
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 1.0]);
        let g = a.transpose() * &a;
        let rhs = DMatrix::from_column_slice(2, 1, &[1.0, 3.0]);
        let (x, lambda) = ridge_solve(&g, &rhs, 1e-14, 1e-2).unwrap();
        assert_eq!(lambda, 1e-14);
        let err = (&g * &x - &rhs).norm();
        assert!(err < 1e-8, "residual {err}");
    }
}
