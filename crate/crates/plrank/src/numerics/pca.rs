//! Principal-component reduction of token matrices.
//!
//! The basis is fitted by a cyclic Jacobi eigendecomposition of the token
//! covariance, which is exact enough at desk scale and keeps the whole path
//! dependency-free. Raw tokens are projected without mean subtraction so that
//! a full-rank basis is a pure rotation and Gram matrices are preserved.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 100;
const RANK_REL_TOL: f64 = 1e-10;

/// A fitted orthonormal projection basis.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    /// D x k matrix whose columns are the top-k principal directions.
    pub components: Matrix,
    /// All D covariance eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
}

impl PcaBasis {
    /// Projects rows of `tokens` onto the basis: (L x D) -> (L x k).
    pub fn project(&self, tokens: &Matrix) -> Result<Matrix> {
        tokens.matmul(&self.components)
    }

    /// Sum of the eigenvalues retained by the basis.
    pub fn explained_variance(&self) -> f64 {
        self.eigenvalues[..self.components.cols()].iter().sum()
    }
}

/// Fits the top `target_dim` principal components of the covariance of
/// `tokens` (rows are observations).
pub fn fit_pca(tokens: &Matrix, target_dim: usize) -> Result<PcaBasis> {
    let (l, d) = tokens.shape();
    if target_dim > l.min(d) {
        return Err(Error::InvalidParameter(format!(
            "target_dim {} exceeds min(L, D) = {}",
            target_dim,
            l.min(d)
        )));
    }
    let mean = tokens.mean_rows();
    let mut centred = tokens.clone();
    for r in 0..l {
        for c in 0..d {
            let v = centred.get(r, c) - mean.get(0, c);
            centred.set(r, c, v);
        }
    }
    let cov = centred
        .transpose()
        .matmul(&centred)?
        .scale(1.0 / l as f64);
    let (eigenvalues, eigenvectors) = jacobi_eigh(&cov);

    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let rank = eigenvalues
        .iter()
        .filter(|&&v| v > RANK_REL_TOL * lambda_max.max(1e-300))
        .count();
    if target_dim > rank {
        return Err(Error::DegenerateRank {
            requested: target_dim,
            rank,
        });
    }

    let mut components = Matrix::zeros(d, target_dim);
    for k in 0..target_dim {
        for r in 0..d {
            components.set(r, k, eigenvectors.get(r, k));
        }
    }
    Ok(PcaBasis {
        components,
        eigenvalues,
    })
}

/// Fits on `tokens` and projects the same tokens: (L x D) -> (L x target_dim).
pub fn pca_reduce(tokens: &Matrix, target_dim: usize) -> Result<Matrix> {
    let basis = fit_pca(tokens, target_dim)?;
    basis.project(tokens)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns.
pub fn jacobi_eigh(sym: &Matrix) -> (Vec<f64>, Matrix) {
    let n = sym.rows();
    assert_eq!(sym.cols(), n, "jacobi_eigh expects a square matrix");
    let mut a = sym.clone();
    let mut v = Matrix::identity(n);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off.sqrt() <= JACOBI_TOL * (1.0 + a.norm()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(j, j)
            .partial_cmp(&a.get(i, i))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, col, v.get(r, src));
        }
    }
    (eigenvalues, vectors)
}

/// Solves A X = B for symmetric positive semi-definite A through the Jacobi
/// eigendecomposition, with a small ridge on near-zero eigenvalues.
pub fn solve_psd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() || a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "solve_psd",
            left: format!("{}x{}", a.rows(), a.cols()),
            right: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    let (eigenvalues, q) = jacobi_eigh(a);
    let floor = eigenvalues.first().copied().unwrap_or(0.0).abs().max(1.0) * 1e-12;
    let qt_b = q.transpose().matmul(b)?;
    let mut scaled = qt_b.clone();
    for (r, &l) in eigenvalues.iter().enumerate() {
        let inv = 1.0 / l.max(floor);
        for c in 0..scaled.cols() {
            scaled.set(r, c, qt_b.get(r, c) * inv);
        }
    }
    q.matmul(&scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn solve_psd_recovers_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = Matrix::new(
            4,
            4,
            (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let a = raw.transpose().matmul(&raw).unwrap(); // PSD
        let x_true = Matrix::new(4, 2, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect());
        let b = a.matmul(&x_true).unwrap();
        let x = solve_psd(&a, &b).unwrap();
        assert!(x.sub(&x_true).unwrap().norm() < 1e-8);
    }

    fn random_tokens(seed: u64, l: usize, d: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(l, d, data)
    }

    #[test]
    fn planar_tokens_reconstruct_exactly() {
        // Tokens confined to a 2-D linear subspace with genuine 2-D variation.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b1 = [1.0, 0.0, 2.0, -1.0];
        let b2 = [0.0, 1.0, -1.0, 3.0];
        let mut rows = Vec::new();
        for _ in 0..12 {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            rows.push((0..4).map(|j| a * b1[j] + b * b2[j]).collect::<Vec<_>>());
        }
        let tokens = Matrix::from_rows(&rows);
        let basis = fit_pca(&tokens, 2).unwrap();
        let proj = basis.project(&tokens).unwrap();
        let recon = proj.matmul(&basis.components.transpose()).unwrap();
        let err = recon.sub(&tokens).unwrap().norm();
        assert!(err < 1e-9, "reconstruction error {err}");
    }

    #[test]
    fn full_rank_projection_preserves_gram() {
        let tokens = random_tokens(3, 16, 8);
        let basis = fit_pca(&tokens, 8).unwrap();
        let proj = basis.project(&tokens).unwrap();
        let g0 = tokens.matmul(&tokens.transpose()).unwrap();
        let g1 = proj.matmul(&proj.transpose()).unwrap();
        let drift = g0.sub(&g1).unwrap().norm();
        assert!(drift < 1e-9, "gram drift {drift}");
    }

    #[test]
    fn explained_variance_matches_eigen_oracle() {
        let tokens = random_tokens(11, 16, 8);
        let basis = fit_pca(&tokens, 4).unwrap();
        // Oracle: variance of centred projections along each component.
        let mean = tokens.mean_rows();
        let mut centred = tokens.clone();
        for r in 0..16 {
            for c in 0..8 {
                let v = centred.get(r, c) - mean.get(0, c);
                centred.set(r, c, v);
            }
        }
        let proj = centred.matmul(&basis.components).unwrap();
        let mut total = 0.0;
        for k in 0..4 {
            let col: Vec<f64> = (0..16).map(|r| proj.get(r, k)).collect();
            let m: f64 = col.iter().sum::<f64>() / 16.0;
            total += col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 16.0;
        }
        assert!((total - basis.explained_variance()).abs() < 1e-9);
    }

    #[test]
    fn reconstruction_error_non_increasing_in_target_dim() {
        let tokens = random_tokens(5, 16, 8);
        let mut prev = f64::INFINITY;
        for k in 1..=8 {
            let basis = fit_pca(&tokens, k).unwrap();
            let proj = basis.project(&tokens).unwrap();
            let recon = proj.matmul(&basis.components.transpose()).unwrap();
            let err = recon.sub(&tokens).unwrap().norm();
            assert!(err <= prev + 1e-12);
            prev = err;
        }
    }

    #[test]
    fn rank_deficient_request_errors() {
        // Rank-1 variation: every token is a multiple of one direction.
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![i as f64, 2.0 * i as f64, -i as f64])
            .collect();
        let tokens = Matrix::from_rows(&rows);
        assert!(matches!(
            fit_pca(&tokens, 2),
            Err(Error::DegenerateRank { .. })
        ));
    }
}
