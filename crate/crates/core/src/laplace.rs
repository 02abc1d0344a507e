//! K-FAC Laplace posterior `N(θ*, N⁻¹(K + βI)⁻¹)` over the weights.
//!
//! Each layer's precision block is `A ⊗ B + βI`. With `A = U_A S_A U_Aᵀ`
//! and `B = U_B S_B U_Bᵀ` it is diagonalized by `U = U_A ⊗ U_B` with
//! eigenvalues `s_A[i]·s_B[j] + β`, so sampling only needs the factor
//! eigenbases. Biases are kept at their MAP values.

use crate::linalg::{kron_matvec, standard_normal, EigenDecomposition, Matrix, Rng};
use crate::model::{average_blocks, Dataset, FisherMode, Mlp, ParamVector};
use crate::{Error, Result};

pub use crate::model::KfacBlock;

/// Default number of Monte-Carlo samples for the predictive.
pub const DEFAULT_PREDICTIVE_SAMPLES: usize = 40;

#[derive(Clone, Debug)]
pub struct LaplacePosterior {
    mean: ParamVector,
    blocks: Vec<KfacBlock>,
    ranges: Vec<std::ops::Range<usize>>,
    n_train: usize,
    beta: f64,
}

/// Builds the posterior; eigendecomposes every factor once.
///
/// Requires `β > 0` unless every Kronecker eigenvalue is positive.
pub fn build_posterior(
    blocks: Vec<KfacBlock>,
    mean: &ParamVector,
    n_train: usize,
    beta: f64,
) -> Result<LaplacePosterior> {
    if n_train == 0 {
        return Err(Error::validation("the training set size must be positive"));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::validation(format!(
            "prior precision β = {beta} must be finite and ≥ 0"
        )));
    }
    let layout = mean.layout();
    let mut ranges = Vec::with_capacity(blocks.len());
    let mut ready = Vec::with_capacity(blocks.len());
    for block in blocks {
        if block.layer() >= layout.n_layers() {
            return Err(Error::validation(format!(
                "K-FAC block for missing layer {}",
                block.layer()
            )));
        }
        let w = layout.weight_block(block.layer());
        if w.shape != (block.output_dim(), block.input_dim()) {
            return Err(Error::validation(format!(
                "K-FAC block for layer {} has shape {}×{}, weights are {:?}",
                block.layer(),
                block.output_dim(),
                block.input_dim(),
                w.shape
            )));
        }
        if ranges.iter().any(|r: &std::ops::Range<usize>| r.start == w.offset) {
            return Err(Error::validation(format!(
                "two K-FAC blocks for layer {}",
                block.layer()
            )));
        }
        let block = block.with_eigen()?;
        if beta == 0.0 {
            let (ea, eb) = bases(&block);
            let min = ea.eigenvalues().last().copied().unwrap_or(1.0) * eb.eigenvalues().last().copied().unwrap_or(1.0);
            if !(min > 0.0) {
                return Err(Error::Numerical(format!(
                    "layer {}: singular precision with β = 0",
                    block.layer()
                )));
            }
        }
        ranges.push(w.range());
        ready.push(block);
    }
    Ok(LaplacePosterior {
        mean: mean.clone(),
        blocks: ready,
        ranges,
        n_train,
        beta,
    })
}

fn bases(block: &KfacBlock) -> (&EigenDecomposition, &EigenDecomposition) {
    (
        block.eig_a().expect("posterior blocks are decomposed"),
        block.eig_b().expect("posterior blocks are decomposed"),
    )
}

impl LaplacePosterior {
    pub fn mean(&self) -> &ParamVector {
        &self.mean
    }

    pub fn blocks(&self) -> &[KfacBlock] {
        &self.blocks
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `1/(N(s_A[i]·s_B[j] + β))` at position `i·n + j`, matching the columns
    /// of `U_A ⊗ U_B`.
    pub fn block_covariance_eigenvalues(&self, index: usize) -> Vec<f64> {
        let (ea, eb) = bases(&self.blocks[index]);
        let n = self.n_train as f64;
        let mut out = Vec::with_capacity(ea.k() * eb.k());
        for sa in ea.eigenvalues() {
            for sb in eb.eigenvalues() {
                out.push(1.0 / (n * (sa * sb + self.beta)));
            }
        }
        out
    }

    /// Explicit covariance of one block; for small layers and tests.
    pub fn block_covariance_dense(&self, index: usize) -> Matrix {
        let (ea, eb) = bases(&self.blocks[index]);
        let u = crate::linalg::kron_dense(ea.basis(), eb.basis());
        let c = self.block_covariance_eigenvalues(index);
        let dim = c.len();
        Matrix::from_fn(dim, dim, |r, s| (0..dim).map(|k| u[(r, k)] * c[k] * u[(s, k)]).sum())
    }

    /// Marginal variance of every parameter (zero for biases).
    pub fn marginal_variances(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.mean.len()];
        for (idx, (block, range)) in self.blocks.iter().zip(&self.ranges).enumerate() {
            let (ea, eb) = bases(block);
            let (m, n) = (ea.dim(), eb.dim());
            let c = self.block_covariance_eigenvalues(idx);
            // diag[(i,j)] = Σ_{k,l} U_A[i,k]² U_B[j,l]² c[k·n + l]
            for i in 0..m {
                for j in 0..n {
                    let mut v = 0.0;
                    for k in 0..m {
                        let a2 = ea.basis()[(i, k)].powi(2);
                        for l in 0..n {
                            v += a2 * eb.basis()[(j, l)].powi(2) * c[k * n + l];
                        }
                    }
                    out[range.start + i * n + j] = v;
                }
            }
        }
        out
    }

    /// One posterior draw `θ* + N^{-1/2} U (S + β)^{-1/2} w`, `w ~ N(0, I)`.
    pub fn sample(&self, rng: &mut Rng) -> ParamVector {
        let mut values = self.mean.values().to_vec();
        for (idx, (block, range)) in self.blocks.iter().zip(&self.ranges).enumerate() {
            let (ea, eb) = bases(block);
            let scale = self.block_covariance_eigenvalues(idx);
            let w: Vec<f64> = standard_normal(rng, scale.len())
                .into_iter()
                .zip(&scale)
                .map(|(z, c)| z * c.sqrt())
                .collect();
            let delta = kron_matvec(ea.basis(), eb.basis(), &w).expect("block dimensions checked at construction");
            for (v, d) in values[range.clone()].iter_mut().zip(delta) {
                *v += d;
            }
        }
        self.mean.with_values(values).expect("same layout")
    }
}

/// See [`LaplacePosterior::sample`].
pub fn sample_params(post: &LaplacePosterior, rng: &mut Rng) -> ParamVector {
    post.sample(rng)
}

/// Re-measures the curvature of `blocks_b`'s eigenbasis on `blocks_tilde`.
///
/// Per layer, with `A = U_A S_A U_Aᵀ` from the first set and `C` the input
/// factor of the second, returns `Ã = U_A diag(U_AᵀCU_A) U_Aᵀ` (likewise for
/// the output side). The eigenbases are kept as the result's eigen caches.
pub fn debias_kfac(blocks_b: &[KfacBlock], blocks_tilde: &[KfacBlock]) -> Result<Vec<KfacBlock>> {
    if blocks_b.len() != blocks_tilde.len() {
        return Err(Error::validation(format!(
            "{} blocks to debias with {} blocks",
            blocks_b.len(),
            blocks_tilde.len()
        )));
    }
    blocks_b
        .iter()
        .zip(blocks_tilde)
        .map(|(b, t)| {
            if b.layer() != t.layer() || b.input_dim() != t.input_dim() || b.output_dim() != t.output_dim() {
                return Err(Error::validation(format!(
                    "block for layer {} ({}×{}) does not match layer {} ({}×{})",
                    b.layer(),
                    b.output_dim(),
                    b.input_dim(),
                    t.layer(),
                    t.output_dim(),
                    t.input_dim()
                )));
            }
            let b = b.clone().with_eigen()?;
            let (ea, eb) = bases(&b);
            let sa = projected_diagonal(ea.basis(), t.factor_a().matrix());
            let sb = projected_diagonal(eb.basis(), t.factor_b().matrix());
            KfacBlock::from_eigen(
                b.layer(),
                EigenDecomposition::new(ea.basis().clone(), sa)?,
                EigenDecomposition::new(eb.basis().clone(), sb)?,
            )
        })
        .collect()
}

/// `Diag(Uᵀ C U)`
fn projected_diagonal(u: &Matrix, c: &Matrix) -> Vec<f64> {
    (0..u.cols())
        .map(|k| {
            let col = u.column(k);
            crate::linalg::dot(&col, &c.matvec(&col))
        })
        .collect()
}

/// Sample-count-weighted K-FAC factors over consecutive chunks of `dataset`.
pub fn accumulate_kfac(
    mlp: &Mlp,
    theta: &ParamVector,
    dataset: &Dataset,
    fisher: FisherMode,
    rng: &mut Rng,
    chunk_size: usize,
) -> Result<Vec<KfacBlock>> {
    let chunks = dataset.chunks(chunk_size)?;
    let n = dataset.len() as f64;
    let parts = chunks
        .iter()
        .map(|b| Ok((b.len() as f64 / n, mlp.kfac_factors(theta, b, fisher, rng)?)))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().map(|(_, b)| b).unwrap_or_default());
    }
    average_blocks(&parts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictiveConfig {
    pub samples: usize,
    pub seed: u64,
}

impl PredictiveConfig {
    pub fn new(samples: usize, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::validation("the predictive needs at least one sample"));
        }
        Ok(Self { samples, seed })
    }
}

impl Default for PredictiveConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_PREDICTIVE_SAMPLES,
            seed: 0,
        }
    }
}

/// Monte-Carlo predictive of the linearized network.
///
/// Sample `s` is drawn from its own stream `(seed, s)`; each is pushed
/// through `f(θ*) + J(θ_s − θ*)` and a softmax, and the probabilities are
/// averaged in sample order.
pub fn predictive(post: &LaplacePosterior, mlp: &Mlp, inputs: &Matrix, cfg: &PredictiveConfig) -> Result<Matrix> {
    if cfg.samples == 0 {
        return Err(Error::validation("the predictive needs at least one sample"));
    }
    let mean = post.mean();
    let offsets: Vec<Vec<f64>> = (0..cfg.samples)
        .map(|s| {
            let draw = post.sample(&mut Rng::with_stream(cfg.seed, s as u64));
            draw.values().iter().zip(mean.values()).map(|(a, b)| a - b).collect()
        })
        .collect();
    let refs: Vec<&[f64]> = offsets.iter().map(Vec::as_slice).collect();
    let c = mlp.architecture().output_dim();
    let mut out = Matrix::zeros(inputs.rows(), c);
    for r in 0..inputs.rows() {
        let (f, jvps) = mlp.linearized_logits(mean, inputs.row(r), &refs)?;
        let row = out.row_mut(r);
        for jv in &jvps {
            let logits: Vec<f64> = f.iter().zip(jv).map(|(a, b)| a + b).collect();
            for (o, p) in row.iter_mut().zip(crate::model::softmax(&logits)) {
                *o += p;
            }
        }
        row.iter_mut().for_each(|v| *v /= cfg.samples as f64);
    }
    Ok(out)
}
