//! Local quadratic models of the regularized loss.
//!
//! `q(θ; B) = ½ (θ − θ₀)ᵀ H (θ − θ₀) + (θ − θ₀)ᵀ g + c` with `c`, `g` the
//! loss and gradient at the anchor `θ₀` and `H` a curvature proxy of the
//! batch loss plus `β·diag(mask) + δ·I`. Parameters are passed as plain
//! slices so that synthetic quadratics (dense `H`, no network) share the
//! same code paths as model-backed ones.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::linalg::{dot, norm, DenseSymMatrix, LinearOperator, Rng};
use crate::model::{average_blocks, Batch, Dataset, FisherMode, KfacBlock, Mlp, ParamVector};
use crate::{Error, Result};

/// Tolerance on `‖d‖ = 1` for [`Direction`].
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Tolerance on orthonormality of the two directions in [`QuadraticModel::subspace_eval`].
pub const ORTHONORMAL_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurvatureKind {
    Hessian,
    Ggn,
    /// Block-diagonal Kronecker-factored Fisher over the weights; `seed`
    /// drives the label sampling in [`FisherMode::McSample`].
    Kfac {
        fisher: FisherMode,
        seed: u64,
    },
}

impl CurvatureKind {
    pub fn name(&self) -> &'static str {
        match self {
            CurvatureKind::Hessian => "hessian",
            CurvatureKind::Ggn => "ggn",
            CurvatureKind::Kfac { .. } => "kfac",
        }
    }

    /// Parses `hessian`, `ggn` or `kfac` (the latter with the given options).
    pub fn parse(name: &str, fisher: FisherMode, seed: u64) -> Result<Self> {
        match name {
            "hessian" => Ok(CurvatureKind::Hessian),
            "ggn" => Ok(CurvatureKind::Ggn),
            "kfac" => Ok(CurvatureKind::Kfac { fisher, seed }),
            other => Err(Error::validation(format!("unknown curvature kind '{other}'"))),
        }
    }
}

/// A unit-norm direction in parameter space.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction(Vec<f64>);

impl Direction {
    /// Accepts `v` only if `‖v‖ = 1` within [`UNIT_NORM_TOL`].
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::validation(format!("direction has norm {n}, expected 1")));
        }
        Ok(Self(v))
    }

    /// Rescales `v` to unit norm; zero or non-finite vectors are rejected.
    pub fn normalize(v: &[f64]) -> Result<Self> {
        crate::linalg::normalized(v)
            .map(Self)
            .ok_or_else(|| Error::validation("cannot normalize a zero or non-finite vector"))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Neg for Direction {
    type Output = Direction;
    fn neg(self) -> Direction {
        Direction(self.0.into_iter().map(|v| -v).collect())
    }
}

enum Source {
    /// Exact Hessian or GGN products, averaged over weighted chunks.
    Model {
        mlp: Mlp,
        params: ParamVector,
        chunks: Vec<(f64, Batch)>,
        ggn: bool,
    },
    /// One Kronecker block per layer acting on that layer's weight slice.
    Kfac {
        blocks: Vec<KfacBlock>,
        ranges: Vec<std::ops::Range<usize>>,
    },
    Dense(DenseSymMatrix),
}

/// Matrix-free `v ↦ (C + β·diag(mask) + δ·I) v` for a curvature proxy `C`.
///
/// Counts its own matrix-vector products.
pub struct CurvatureOperator {
    source: Source,
    dim: usize,
    mask: Vec<f64>,
    beta: f64,
    delta: f64,
    matvecs: AtomicUsize,
}

impl std::fmt::Debug for CurvatureOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CurvatureOperator")
            .field("kind", &self.kind_name())
            .field("dim", &self.dim)
            .field("beta", &self.beta)
            .field("delta", &self.delta)
            .finish()
    }
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::validation(format!("{name} = {v} must be finite and ≥ 0")));
    }
    Ok(())
}

impl CurvatureOperator {
    fn with_source(source: Source, dim: usize, mask: Vec<f64>, beta: f64, delta: f64) -> Result<Self> {
        check_nonneg("β", beta)?;
        check_nonneg("δ", delta)?;
        if mask.len() != dim {
            return Err(Error::validation("regularizer mask length differs from the dimension"));
        }
        Ok(Self {
            source,
            dim,
            mask,
            beta,
            delta,
            matvecs: AtomicUsize::new(0),
        })
    }

    /// Exact Hessian (`ggn = false`) or GGN of the sample-weighted mean loss over `chunks`.
    fn model(
        mlp: &Mlp,
        params: &ParamVector,
        chunks: Vec<(f64, Batch)>,
        ggn: bool,
        beta: f64,
        delta: f64,
    ) -> Result<Self> {
        let dim = mlp.n_params();
        Self::with_source(
            Source::Model {
                mlp: mlp.clone(),
                params: params.clone(),
                chunks,
                ggn,
            },
            dim,
            mlp.mask().to_vec(),
            beta,
            delta,
        )
    }

    /// K-FAC blocks of `mlp`'s layers; bias coordinates get no curvature
    /// beyond the regularizer and damping.
    pub fn kfac(mlp: &Mlp, blocks: Vec<KfacBlock>, beta: f64, delta: f64) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::validation("K-FAC curvature needs at least one dense layer"));
        }
        let layout = mlp.layout();
        let mut ranges = Vec::with_capacity(blocks.len());
        for b in &blocks {
            if b.layer() >= layout.n_layers() {
                return Err(Error::validation(format!(
                    "K-FAC block for missing layer {}",
                    b.layer()
                )));
            }
            let w = layout.weight_block(b.layer());
            if w.shape != (b.output_dim(), b.input_dim()) {
                return Err(Error::validation(format!(
                    "K-FAC block {}×{} does not fit layer {} of shape {:?}",
                    b.output_dim(),
                    b.input_dim(),
                    b.layer(),
                    w.shape
                )));
            }
            ranges.push(w.range());
        }
        Self::with_source(
            Source::Kfac { blocks, ranges },
            mlp.n_params(),
            mlp.mask().to_vec(),
            beta,
            delta,
        )
    }

    /// An explicit symmetric matrix; `mask = None` regularizes every coordinate.
    pub fn dense(matrix: DenseSymMatrix, mask: Option<Vec<f64>>, beta: f64, delta: f64) -> Result<Self> {
        let dim = matrix.dim();
        let mask = mask.unwrap_or_else(|| vec![1.0; dim]);
        Self::with_source(Source::Dense(matrix), dim, mask, beta, delta)
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.source {
            Source::Model { ggn: true, .. } => "ggn",
            Source::Model { ggn: false, .. } => "hessian",
            Source::Kfac { .. } => "kfac",
            Source::Dense(_) => "dense",
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn kfac_blocks(&self) -> Option<&[KfacBlock]> {
        match &self.source {
            Source::Kfac { blocks, .. } => Some(blocks),
            _ => None,
        }
    }

    /// Matrix-vector products performed so far.
    pub fn matvec_count(&self) -> usize {
        self.matvecs.load(Ordering::Relaxed)
    }

    pub fn reset_matvec_count(&self) {
        self.matvecs.store(0, Ordering::Relaxed);
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::validation(format!(
                "vector of length {} for a curvature of dimension {}",
                v.len(),
                self.dim
            )));
        }
        self.matvecs.fetch_add(1, Ordering::Relaxed);
        let mut out = match &self.source {
            Source::Model {
                mlp,
                params,
                chunks,
                ggn,
            } => {
                let mut acc = vec![0.0; self.dim];
                for (w, batch) in chunks {
                    let part = if *ggn {
                        mlp.ggn_vp(params, batch, 0.0, v)?
                    } else {
                        mlp.hvp(params, batch, 0.0, v)?
                    };
                    if chunks.len() == 1 {
                        acc = part;
                    } else {
                        crate::linalg::axpy(*w, &part, &mut acc);
                    }
                }
                acc
            }
            Source::Kfac { blocks, ranges } => {
                let mut acc = vec![0.0; self.dim];
                for (b, r) in blocks.iter().zip(ranges) {
                    let part = b.matvec(&v[r.clone()])?;
                    acc[r.clone()].copy_from_slice(&part);
                }
                acc
            }
            Source::Dense(m) => m.matrix().matvec(v),
        };
        for ((o, vi), m) in out.iter_mut().zip(v).zip(&self.mask) {
            *o += (self.beta * m + self.delta) * vi;
        }
        Ok(out)
    }
}

impl LinearOperator for CurvatureOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    /// Panics on a length mismatch; use [`CurvatureOperator::matvec`] for a checked call.
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matvec(v).expect("curvature matvec")
    }
}

/// `q(θ) = ½ Δᵀ H Δ + Δᵀ g + c` with `Δ = θ − θ₀`.
#[derive(Debug)]
pub struct QuadraticModel {
    anchor: Vec<f64>,
    constant: f64,
    gradient: Vec<f64>,
    curvature: CurvatureOperator,
    label: String,
}

/// Six scalars that determine `q` on a 2D affine slice, see
/// [`QuadraticModel::subspace_coefficients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubspaceCoefficients {
    pub h11: f64,
    pub h12: f64,
    pub h22: f64,
    pub g1: f64,
    pub g2: f64,
    pub c: f64,
}

impl SubspaceCoefficients {
    pub fn eval(&self, t1: f64, t2: f64) -> f64 {
        0.5 * (self.h11 * t1 * t1 + 2.0 * self.h12 * t1 * t2 + self.h22 * t2 * t2)
            + t1 * self.g1
            + t2 * self.g2
            + self.c
    }
}

impl QuadraticModel {
    /// Assembles a quadratic from explicit parts.
    pub fn from_parts(
        anchor: Vec<f64>,
        constant: f64,
        gradient: Vec<f64>,
        curvature: CurvatureOperator,
        label: impl Into<String>,
    ) -> Result<Self> {
        if anchor.len() != curvature.dim || gradient.len() != curvature.dim {
            return Err(Error::validation(format!(
                "anchor ({}), gradient ({}) and curvature ({}) dimensions differ",
                anchor.len(),
                gradient.len(),
                curvature.dim
            )));
        }
        if !constant.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite loss or gradient at the anchor".into()));
        }
        Ok(Self {
            anchor,
            constant,
            gradient,
            curvature,
            label: label.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn gradient(&self) -> &[f64] {
        &self.gradient
    }

    pub fn curvature(&self) -> &CurvatureOperator {
        &self.curvature
    }

    /// Identifies the data the quadratic was built on.
    pub fn label(&self) -> &str {
        &self.label
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::validation(format!(
                "vector of length {} for a quadratic of dimension {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn displacement(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(theta)?;
        Ok(theta.iter().zip(&self.anchor).map(|(t, a)| t - a).collect())
    }

    /// `q(θ)`; one curvature product.
    pub fn value_at(&self, theta: &[f64]) -> Result<f64> {
        let d = self.displacement(theta)?;
        let hd = self.curvature.matvec(&d)?;
        Ok(0.5 * dot(&d, &hd) + dot(&d, &self.gradient) + self.constant)
    }

    /// `∇q(θ) = H (θ − θ₀) + g`; one curvature product (none at the anchor).
    pub fn grad_at(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let d = self.displacement(theta)?;
        if d.iter().all(|v| *v == 0.0) {
            return Ok(self.gradient.clone());
        }
        let mut out = self.curvature.matvec(&d)?;
        crate::linalg::axpy(1.0, &self.gradient, &mut out);
        Ok(out)
    }

    /// `dᵀ ∇q(θ)`
    pub fn directional_slope(&self, theta: &[f64], d: &Direction) -> Result<f64> {
        self.check_dim(d.as_slice())?;
        Ok(dot(d.as_slice(), &self.grad_at(theta)?))
    }

    /// `dᵀ H d`, independent of the position.
    pub fn directional_curvature(&self, d: &Direction) -> Result<f64> {
        Ok(dot(d.as_slice(), &self.curvature.matvec(d.as_slice())?))
    }

    /// Coefficients of `(τ₁, τ₂) ↦ q(θ* + τ₁u₁ + τ₂u₂)`.
    ///
    /// Costs two curvature products when `θ*` is the anchor and one more
    /// otherwise.
    pub fn subspace_coefficients(
        &self,
        theta_star: &[f64],
        u1: &Direction,
        u2: &Direction,
    ) -> Result<SubspaceCoefficients> {
        self.check_dim(u1.as_slice())?;
        self.check_dim(u2.as_slice())?;
        let overlap = dot(u1.as_slice(), u2.as_slice());
        if overlap.abs() > ORTHONORMAL_TOL {
            return Err(Error::validation(format!(
                "directions are not orthogonal (u₁ᵀu₂ = {overlap:e})"
            )));
        }
        let d = self.displacement(theta_star)?;
        let hu1 = self.curvature.matvec(u1.as_slice())?;
        let hu2 = self.curvature.matvec(u2.as_slice())?;
        let (g_star, c_star) = if d.iter().all(|v| *v == 0.0) {
            (self.gradient.clone(), self.constant)
        } else {
            let hd = self.curvature.matvec(&d)?;
            let mut g = hd.clone();
            crate::linalg::axpy(1.0, &self.gradient, &mut g);
            (g, 0.5 * dot(&d, &hd) + dot(&d, &self.gradient) + self.constant)
        };
        Ok(SubspaceCoefficients {
            h11: dot(u1.as_slice(), &hu1),
            h12: 0.5 * (dot(u1.as_slice(), &hu2) + dot(u2.as_slice(), &hu1)),
            h22: dot(u2.as_slice(), &hu2),
            g1: dot(u1.as_slice(), &g_star),
            g2: dot(u2.as_slice(), &g_star),
            c: c_star,
        })
    }

    /// `q(θ* + τ₁u₁ + τ₂u₂)` for every grid point.
    pub fn subspace_eval(
        &self,
        theta_star: &[f64],
        u1: &Direction,
        u2: &Direction,
        grid: &[(f64, f64)],
    ) -> Result<Vec<f64>> {
        let coeffs = self.subspace_coefficients(theta_star, u1, u2)?;
        Ok(grid.iter().map(|&(t1, t2)| coeffs.eval(t1, t2)).collect())
    }
}

fn batch_label(batch: &Batch) -> String {
    match (batch.indices().first(), batch.indices().last()) {
        (Some(first), Some(last)) => format!("batch[{} samples, {first}..{last}]", batch.len()),
        _ => "batch[empty]".into(),
    }
}

/// Quadratic of `L_reg(·; batch)` around `anchor`.
pub fn build_quadratic(
    mlp: &Mlp,
    anchor: &ParamVector,
    batch: &Batch,
    kind: CurvatureKind,
    beta: f64,
    delta: f64,
) -> Result<QuadraticModel> {
    build_from_chunks(
        mlp,
        anchor,
        vec![(1.0, batch.clone())],
        kind,
        beta,
        delta,
        batch_label(batch),
    )
}

/// Quadratic of the full-data loss, accumulated over consecutive chunks of
/// at most `chunk_size` samples. Loss and gradient are sample-weighted chunk
/// averages; Hessian and GGN products stream the chunks on every call; K-FAC
/// averages the per-chunk factors.
pub fn fullbatch_quadratic(
    mlp: &Mlp,
    anchor: &ParamVector,
    dataset: &Dataset,
    kind: CurvatureKind,
    beta: f64,
    delta: f64,
    chunk_size: usize,
) -> Result<QuadraticModel> {
    let chunks = dataset.chunks(chunk_size)?;
    let n = dataset.len() as f64;
    let weighted = chunks.into_iter().map(|b| (b.len() as f64 / n, b)).collect();
    build_from_chunks(
        mlp,
        anchor,
        weighted,
        kind,
        beta,
        delta,
        format!("dataset[{} samples]", dataset.len()),
    )
}

fn build_from_chunks(
    mlp: &Mlp,
    anchor: &ParamVector,
    chunks: Vec<(f64, Batch)>,
    kind: CurvatureKind,
    beta: f64,
    delta: f64,
    label: String,
) -> Result<QuadraticModel> {
    let mut constant = 0.0;
    let mut gradient = vec![0.0; mlp.n_params()];
    for (w, batch) in &chunks {
        let (l, g) = mlp.loss_and_grad(anchor, batch, beta)?;
        if chunks.len() == 1 {
            constant = l;
            gradient = g;
        } else {
            constant += w * l;
            crate::linalg::axpy(*w, &g, &mut gradient);
        }
    }
    let curvature = match kind {
        CurvatureKind::Hessian => CurvatureOperator::model(mlp, anchor, chunks, false, beta, delta)?,
        CurvatureKind::Ggn => CurvatureOperator::model(mlp, anchor, chunks, true, beta, delta)?,
        CurvatureKind::Kfac { fisher, seed } => {
            let mut rng = Rng::new(seed);
            let parts = chunks
                .iter()
                .map(|(w, b)| Ok((*w, mlp.kfac_factors(anchor, b, fisher, &mut rng)?)))
                .collect::<Result<Vec<_>>>()?;
            let blocks = if parts.len() == 1 {
                parts.into_iter().next().map(|(_, b)| b).unwrap_or_default()
            } else {
                average_blocks(&parts)?
            };
            CurvatureOperator::kfac(mlp, blocks, beta, delta)?
        }
    };
    QuadraticModel::from_parts(anchor.values().to_vec(), constant, gradient, curvature, label)
}
