use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{axpy, dot, norm, normalized, standard_normal, DenseSymMatrix, LinearOperator, Matrix, Rng};
use crate::{Error, Result};

/// Operators up to this dimension are materialized and solved densely by
/// [`top_k_eigenpairs`]; larger ones go through [`lanczos_top_k`].
pub const DENSE_FALLBACK_DIM: usize = 512;

/// Entries at or below this magnitude are skipped when fixing signs.
const SIGN_EPS: f64 = 1e-12;

/// Column-orthonormal eigenbasis with eigenvalues in descending order.
///
/// Sign convention: the first entry of each column whose magnitude exceeds
/// `1e-12` is positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenDecomposition {
    basis: Matrix,
    eigenvalues: Vec<f64>,
}

impl EigenDecomposition {
    /// Sorts the pairs descending and applies the sign convention.
    pub fn new(basis: Matrix, eigenvalues: Vec<f64>) -> Result<Self> {
        if basis.cols() != eigenvalues.len() {
            return Err(Error::validation(format!(
                "{} eigenvalues for {} basis columns",
                eigenvalues.len(),
                basis.cols()
            )));
        }
        let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
        let columns: Vec<Vec<f64>> = order
            .iter()
            .map(|&j| {
                let mut c = basis.column(j);
                canonical_sign(&mut c);
                c
            })
            .collect();
        let basis = if columns.is_empty() {
            Matrix::zeros(basis.rows(), 0)
        } else {
            Matrix::from_columns(&columns)?
        };
        Ok(Self {
            basis,
            eigenvalues: order.iter().map(|&j| eigenvalues[j]).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    /// Number of eigenpairs held.
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.basis.column(i)
    }

    pub fn vectors(&self) -> Vec<Vec<f64>> {
        (0..self.k()).map(|i| self.vector(i)).collect()
    }

    /// `U diag(λ) Uᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let mut out = Matrix::zeros(n, n);
        for (c, lambda) in self.eigenvalues.iter().enumerate() {
            for i in 0..n {
                let ui = self.basis[(i, c)] * lambda;
                if ui == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += ui * self.basis[(j, c)];
                }
            }
        }
        out
    }
}

fn canonical_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > SIGN_EPS) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Full eigendecomposition of a symmetric matrix.
pub fn sym_eigh(m: &DenseSymMatrix) -> Result<EigenDecomposition> {
    let n = m.dim();
    if n == 0 {
        return EigenDecomposition::new(Matrix::zeros(0, 0), Vec::new());
    }
    let dm = DMatrix::from_row_slice(n, n, m.matrix().as_slice());
    let eig = SymmetricEigen::try_new(dm, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver failed".into()))?;
    let basis = Matrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, j)]);
    EigenDecomposition::new(basis, eig.eigenvalues.iter().copied().collect())
}

/// Budget and tolerance of the Lanczos iteration.
#[derive(Clone, Debug)]
pub struct LanczosConfig {
    /// Ritz pair `i` is accepted once `‖A u − θ u‖ ≤ tol · max_j |θ_j|`.
    pub tol: f64,
    /// Largest Krylov basis built before giving up.
    pub max_basis: usize,
    /// Convergence is checked every this many steps once the basis holds `k` vectors.
    pub check_every: usize,
}

impl Default for LanczosConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_basis: 600,
            check_every: 5,
        }
    }
}

/// The `k` algebraically largest eigenpairs of a symmetric operator.
///
/// Operators of dimension at most [`DENSE_FALLBACK_DIM`] are materialized and
/// handed to [`sym_eigh`]; the RNG is then unused. Larger ones use
/// [`lanczos_top_k`] with the default [`LanczosConfig`].
pub fn top_k_eigenpairs(op: &dyn LinearOperator, k: usize, rng: &mut Rng) -> Result<EigenDecomposition> {
    let dim = op.dim();
    check_k(dim, k)?;
    if dim <= DENSE_FALLBACK_DIM {
        let dense = DenseSymMatrix::symmetrize(&op.to_dense())?;
        let full = sym_eigh(&dense)?;
        let columns: Vec<Vec<f64>> = (0..k).map(|i| full.vector(i)).collect();
        return EigenDecomposition::new(Matrix::from_columns(&columns)?, full.eigenvalues()[..k].to_vec());
    }
    lanczos_top_k(op, k, rng, &LanczosConfig::default())
}

fn check_k(dim: usize, k: usize) -> Result<()> {
    if k == 0 || k > dim {
        return Err(Error::validation(format!(
            "requested {k} eigenpairs of a {dim}-dimensional operator"
        )));
    }
    Ok(())
}

/// Lanczos with full re-orthogonalization and a seeded start vector.
///
/// The tridiagonal projection is re-solved every `check_every` steps; the
/// iteration stops when the top-`k` Ritz residuals `|β_m y_m|` all meet the
/// tolerance or the Krylov space is exhausted. An invariant subspace found
/// early is continued from a fresh random vector orthogonal to the basis.
pub fn lanczos_top_k(
    op: &dyn LinearOperator,
    k: usize,
    rng: &mut Rng,
    config: &LanczosConfig,
) -> Result<EigenDecomposition> {
    let n = op.dim();
    check_k(n, k)?;
    let max_basis = config.max_basis.max(k).min(n);

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(max_basis);
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut scale_est = 0.0f64;

    let mut q = fresh_direction(rng, n, &basis)?;
    loop {
        let mut w = op.apply(&q);
        let alpha = dot(&q, &w);
        axpy(-alpha, &q, &mut w);
        if let (Some(prev), Some(beta)) = (basis.last(), betas.last()) {
            axpy(-beta, prev, &mut w);
        }
        basis.push(q);
        alphas.push(alpha);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &w);
                axpy(-c, b, &mut w);
            }
        }
        let mut beta = norm(&w);
        scale_est = scale_est.max(alpha.abs() + beta);
        let m = basis.len();
        let breakdown = beta <= 1e-12 * scale_est.max(f64::MIN_POSITIVE);
        if breakdown {
            beta = 0.0;
        }

        let exhausted = m == n;
        if m >= k && (m.is_multiple_of(config.check_every) || breakdown || exhausted || m == max_basis) {
            let (ritz_values, ritz_vectors) = tridiagonal_eigen(&alphas, &betas);
            let top = ritz_values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let residuals: Vec<f64> = (0..k).map(|i| (beta * ritz_vectors[(m - 1, i)]).abs()).collect();
            let converged = residuals.iter().all(|r| *r <= config.tol * top.max(f64::MIN_POSITIVE));
            if converged || exhausted {
                return assemble_ritz(&basis, &ritz_values, &ritz_vectors, k);
            }
            if m == max_basis {
                return Err(Error::NonConvergence {
                    iterations: m,
                    residuals,
                });
            }
        } else if m == max_basis && !exhausted {
            return Err(Error::NonConvergence {
                iterations: m,
                residuals: Vec::new(),
            });
        }

        betas.push(beta);
        q = if breakdown {
            fresh_direction(rng, n, &basis)?
        } else {
            w.iter().map(|v| v / beta).collect()
        };
    }
}

fn fresh_direction(rng: &mut Rng, n: usize, basis: &[Vec<f64>]) -> Result<Vec<f64>> {
    for _ in 0..8 {
        let mut v = standard_normal(rng, n);
        for _ in 0..2 {
            for b in basis {
                let c = dot(b, &v);
                axpy(-c, b, &mut v);
            }
        }
        if let Some(u) = normalized(&v) {
            if norm(&v) > 1e-8 {
                return Ok(u);
            }
        }
    }
    Err(Error::Numerical(
        "could not draw a start vector orthogonal to the Krylov basis".into(),
    ))
}

/// Eigenpairs of the symmetric tridiagonal matrix, descending.
fn tridiagonal_eigen(alphas: &[f64], betas: &[f64]) -> (Vec<f64>, Matrix) {
    let m = alphas.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alphas[i];
        if i + 1 < m {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&j| eig.eigenvalues[j]).collect();
    let vectors = Matrix::from_fn(m, m, |i, c| eig.eigenvectors[(i, order[c])]);
    (values, vectors)
}

fn assemble_ritz(basis: &[Vec<f64>], values: &[f64], vectors: &Matrix, k: usize) -> Result<EigenDecomposition> {
    let n = basis[0].len();
    let columns: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let mut u = vec![0.0; n];
            for (j, q) in basis.iter().enumerate() {
                axpy(vectors[(j, c)], q, &mut u);
            }
            normalized(&u).unwrap_or(u)
        })
        .collect();
    EigenDecomposition::new(Matrix::from_columns(&columns)?, values[..k].to_vec())
}
