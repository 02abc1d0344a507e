use serde::{Deserialize, Serialize};

use crate::linalg::{kron_dense, kron_matvec, sym_eigh, DenseSymMatrix, EigenDecomposition, Matrix};
use crate::{Error, Result};

/// Factor eigenvalues in `[−FACTOR_EIG_TOL, 0)` are rounding noise and clamped
/// to zero; anything more negative is rejected.
pub const FACTOR_EIG_TOL: f64 = 1e-8;

/// Where the output-side gradients of the K-FAC Fisher come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    /// One target per sample drawn from the model's predictive distribution.
    #[default]
    McSample,
    /// The observed labels.
    Empirical,
}

impl std::str::FromStr for FisherMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc_sample" => Ok(FisherMode::McSample),
            "empirical" => Ok(FisherMode::Empirical),
            other => Err(Error::validation(format!("unknown fisher mode '{other}'"))),
        }
    }
}

/// One layer's Kronecker-factored curvature `A ⊗ B`.
///
/// `A` (`m×m`) is the second moment of the layer inputs and `B` (`n×n`) that
/// of the pre-activation gradients. The block acts on the layer's weight
/// slice, `vec(W)` with `W` of shape `n×m` stacked column by column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KfacBlock {
    layer: usize,
    factor_a: DenseSymMatrix,
    factor_b: DenseSymMatrix,
    eig_a: Option<EigenDecomposition>,
    eig_b: Option<EigenDecomposition>,
}

impl KfacBlock {
    pub fn new(layer: usize, factor_a: DenseSymMatrix, factor_b: DenseSymMatrix) -> Self {
        Self {
            layer,
            factor_a,
            factor_b,
            eig_a: None,
            eig_b: None,
        }
    }

    /// Symmetrizes accumulated factors (rounding can leave tiny asymmetries).
    pub fn from_factors(layer: usize, a: Matrix, b: Matrix) -> Result<Self> {
        Ok(Self::new(
            layer,
            DenseSymMatrix::symmetrize(&a)?,
            DenseSymMatrix::symmetrize(&b)?,
        ))
    }

    /// Block whose factors are `U_A diag(s_A) U_Aᵀ` and `U_B diag(s_B) U_Bᵀ`;
    /// the given decompositions become the eigen caches.
    pub fn from_eigen(layer: usize, eig_a: EigenDecomposition, eig_b: EigenDecomposition) -> Result<Self> {
        let eig_a = clamp_eigen(eig_a, layer, "A")?;
        let eig_b = clamp_eigen(eig_b, layer, "B")?;
        Ok(Self {
            layer,
            factor_a: DenseSymMatrix::symmetrize(&eig_a.reconstruct())?,
            factor_b: DenseSymMatrix::symmetrize(&eig_b.reconstruct())?,
            eig_a: Some(eig_a),
            eig_b: Some(eig_b),
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn factor_a(&self) -> &DenseSymMatrix {
        &self.factor_a
    }

    pub fn factor_b(&self) -> &DenseSymMatrix {
        &self.factor_b
    }

    /// `m`, the layer's input width.
    pub fn input_dim(&self) -> usize {
        self.factor_a.dim()
    }

    /// `n`, the layer's output width.
    pub fn output_dim(&self) -> usize {
        self.factor_b.dim()
    }

    /// Number of weights covered, `m·n`.
    pub fn dim(&self) -> usize {
        self.input_dim() * self.output_dim()
    }

    pub fn eig_a(&self) -> Option<&EigenDecomposition> {
        self.eig_a.as_ref()
    }

    pub fn eig_b(&self) -> Option<&EigenDecomposition> {
        self.eig_b.as_ref()
    }

    /// Eigendecomposes both factors (once) and clamps rounding-level
    /// negative eigenvalues to zero.
    pub fn ensure_eigen(&mut self) -> Result<()> {
        if self.eig_a.is_none() {
            self.eig_a = Some(clamped_eigh(&self.factor_a, self.layer, "A")?);
        }
        if self.eig_b.is_none() {
            self.eig_b = Some(clamped_eigh(&self.factor_b, self.layer, "B")?);
        }
        Ok(())
    }

    /// Consuming variant of [`Self::ensure_eigen`].
    pub fn with_eigen(mut self) -> Result<Self> {
        self.ensure_eigen()?;
        Ok(self)
    }

    /// `(A ⊗ B) w = vec(B W Aᵀ)`
    pub fn matvec(&self, w: &[f64]) -> Result<Vec<f64>> {
        kron_matvec(self.factor_a.matrix(), self.factor_b.matrix(), w)
    }

    /// The explicit `mn×mn` block; for small layers and tests.
    pub fn to_dense(&self) -> Matrix {
        kron_dense(self.factor_a.matrix(), self.factor_b.matrix())
    }
}

fn clamped_eigh(factor: &DenseSymMatrix, layer: usize, name: &str) -> Result<EigenDecomposition> {
    clamp_eigen(sym_eigh(factor)?, layer, name)
}

fn clamp_eigen(eig: EigenDecomposition, layer: usize, name: &str) -> Result<EigenDecomposition> {
    let mut values = eig.eigenvalues().to_vec();
    for v in &mut values {
        if *v < -FACTOR_EIG_TOL {
            return Err(Error::Numerical(format!(
                "layer {layer}: factor {name} has eigenvalue {v:e} below -{FACTOR_EIG_TOL:e}"
            )));
        }
        if *v < 0.0 {
            log::warn!("layer {layer}: clamping factor {name} eigenvalue {v:e} to 0");
            *v = 0.0;
        }
    }
    EigenDecomposition::new(eig.basis().clone(), values)
}

/// Weighted average of per-layer factors, e.g. over chunks of a dataset
/// weighted by their sample counts. Every entry must have the same layer
/// structure.
pub fn average_blocks(parts: &[(f64, Vec<KfacBlock>)]) -> Result<Vec<KfacBlock>> {
    let (_, first) = parts.first().ok_or_else(|| Error::validation("nothing to average"))?;
    let total: f64 = parts.iter().map(|(w, _)| *w).sum();
    if !(total > 0.0) || parts.iter().any(|(w, _)| *w < 0.0) {
        return Err(Error::validation(
            "averaging weights must be non-negative with a positive sum",
        ));
    }
    let mut out = Vec::with_capacity(first.len());
    for (l, reference) in first.iter().enumerate() {
        let (m, n) = (reference.input_dim(), reference.output_dim());
        let mut a = Matrix::zeros(m, m);
        let mut b = Matrix::zeros(n, n);
        for (w, blocks) in parts {
            let blk = blocks
                .get(l)
                .filter(|blk| blk.input_dim() == m && blk.output_dim() == n && blocks.len() == first.len())
                .ok_or_else(|| Error::validation("blocks to average have different layer structure"))?;
            a = a.add(&blk.factor_a.matrix().scaled(w / total));
            b = b.add(&blk.factor_b.matrix().scaled(w / total));
        }
        out.push(KfacBlock::from_factors(reference.layer, a, b)?);
    }
    Ok(out)
}
