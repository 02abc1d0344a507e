use super::Matrix;
use crate::{Error, Result};

/// Computes `(U_A ⊗ U_B) w` without forming the Kronecker product.
///
/// `w` is `vec(W)` for an `n×m` matrix `W` stacked column by column, i.e.
/// `W[j, i] = w[i·n + j]` with `m = dim(U_A)` and `n = dim(U_B)`. The result
/// is `vec(U_B W U_Aᵀ)` in the same convention. Weight matrices of the model
/// are laid out this way, so a layer's weight slice can be passed directly.
pub fn kron_matvec(u_a: &Matrix, u_b: &Matrix, w: &[f64]) -> Result<Vec<f64>> {
    if !u_a.is_square() || !u_b.is_square() {
        return Err(Error::validation("Kronecker factors must be square"));
    }
    let m = u_a.rows();
    let n = u_b.rows();
    if w.len() != m * n {
        return Err(Error::validation(format!(
            "vector of length {} does not match Kronecker dimension {m}·{n}",
            w.len()
        )));
    }
    // T = W U_Aᵀ, stored column-major: t[i·n + j] = Σ_k W[j,k] U_A[i,k]
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        let col = &mut t[i * n..(i + 1) * n];
        for k in 0..m {
            let a = u_a[(i, k)];
            if a != 0.0 {
                let w_col = &w[k * n..(k + 1) * n];
                for (c, wv) in col.iter_mut().zip(w_col) {
                    *c += a * wv;
                }
            }
        }
    }
    // R = U_B T
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let t_col = &t[i * n..(i + 1) * n];
        let o_col = &mut out[i * n..(i + 1) * n];
        for (j, o) in o_col.iter_mut().enumerate() {
            *o = super::dot(u_b.row(j), t_col);
        }
    }
    Ok(out)
}

/// Explicit Kronecker product `A ⊗ B` (`(A⊗B)[i·n+j, k·n+l] = A[i,k]·B[j,l]`).
pub fn kron_dense(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    Matrix::from_fn(ar * br, ac * bc, |r, c| a[(r / br, c / bc)] * b[(r % br, c % bc)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs_diff, standard_normal, Rng};

    fn random_matrix(rng: &mut Rng, n: usize) -> Matrix {
        Matrix::from_vec(n, n, standard_normal(rng, n * n)).unwrap()
    }

    #[test]
    fn identity_factors_are_identity() {
        let w: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let out = kron_matvec(&Matrix::identity(2), &Matrix::identity(3), &w).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn basis_vector_extracts_column() {
        let mut rng = Rng::new(11);
        let a = random_matrix(&mut rng, 2);
        let b = random_matrix(&mut rng, 3);
        let k = kron_dense(&a, &b);
        for c in 0..6 {
            let mut e = vec![0.0; 6];
            e[c] = 1.0;
            let out = kron_matvec(&a, &b, &e).unwrap();
            assert!(max_abs_diff(&out, &k.column(c)) < 1e-15);
        }
    }

    #[test]
    fn all_small_factor_dims_match_explicit_product() {
        let mut rng = Rng::new(12);
        for m in 1..=8 {
            for n in 1..=8 {
                let a = random_matrix(&mut rng, m);
                let b = random_matrix(&mut rng, n);
                let w = standard_normal(&mut rng, m * n);
                let fast = kron_matvec(&a, &b, &w).unwrap();
                let slow = kron_dense(&a, &b).matvec(&w);
                assert!(max_abs_diff(&fast, &slow) <= 1e-12, "m={m} n={n}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = kron_matvec(&Matrix::identity(2), &Matrix::identity(3), &[0.0; 5]);
        assert!(matches!(err, Err(Error::Validation(_))));
    }
}
