//! Directional scans across mini-batches, eigenspace overlaps and relative-bias
//! summaries.

use rayon::prelude::*;
use serde::Serialize;

use crate::cg::{cg_minimize, CgConfig, CgTrace, Termination};
use crate::linalg::{dot, norm, top_k_eigenpairs, EigenDecomposition, Matrix, Rng};
use crate::model::{Batch, Dataset, Mlp, ParamVector};
use crate::quadratic::{
    build_quadratic, fullbatch_quadratic, CurvatureKind, Direction, QuadraticModel, ORTHONORMAL_TOL,
};
use crate::{Error, Result};

/// Full-batch values below this magnitude make relative errors meaningless.
pub const RELATIVE_ERROR_GUARD: f64 = 1e-14;

/// Floor of the overlap display scale; values at or below it render black.
pub const OVERLAP_DISPLAY_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    Eigen,
    Cg,
}

/// Directions computed from one source batch.
///
/// Eigen sets carry the eigenvalues and are orthonormal; CG sets carry the
/// iterate `θ_p` at which direction `p` was taken.
#[derive(Clone, Debug)]
pub struct DirectionSet {
    kind: DirectionKind,
    source: usize,
    directions: Vec<Direction>,
    eigenvalues: Vec<f64>,
    anchors: Vec<Vec<f64>>,
}

impl DirectionSet {
    pub fn from_eigen(source: usize, eig: &EigenDecomposition) -> Result<Self> {
        let directions = eig
            .vectors()
            .into_iter()
            .map(|v| Direction::normalize(&v))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..directions.len() {
            for j in 0..i {
                let c = dot(directions[i].as_slice(), directions[j].as_slice());
                if c.abs() > ORTHONORMAL_TOL {
                    return Err(Error::Numerical(format!(
                        "eigenvectors {j} and {i} have inner product {c:e}"
                    )));
                }
            }
        }
        Ok(Self {
            kind: DirectionKind::Eigen,
            source,
            directions,
            eigenvalues: eig.eigenvalues().to_vec(),
            anchors: Vec::new(),
        })
    }

    pub fn from_trace(source: usize, trace: &CgTrace) -> Self {
        let k = trace.directions.len();
        Self {
            kind: DirectionKind::Cg,
            source,
            directions: trace.directions.clone(),
            eigenvalues: Vec::new(),
            anchors: trace.iterates[..k].to_vec(),
        }
    }

    pub fn kind(&self) -> DirectionKind {
        self.kind
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Empty for CG sets.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Empty for eigen sets.
    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }
}

/// Slope and curvature of one quadratic along one direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Directional {
    pub slope: f64,
    pub curvature: f64,
}

impl Directional {
    /// Minimizer of the 1D restriction, `−slope/curvature`.
    pub fn newton_magnitude(&self) -> f64 {
        -self.slope / self.curvature
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BatchId {
    Batch(usize),
    Full,
}

impl std::fmt::Display for BatchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BatchId::Batch(i) => write!(f, "{i}"),
            BatchId::Full => f.write_str("FULL"),
        }
    }
}

impl std::str::FromStr for BatchId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "FULL" {
            return Ok(BatchId::Full);
        }
        s.parse()
            .map(BatchId::Batch)
            .map_err(|_| Error::validation(format!("bad batch id '{s}'")))
    }
}

/// One line of a scan table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanRow {
    pub direction: usize,
    pub batch: BatchId,
    pub slope: f64,
    pub curvature: f64,
}

/// Slopes and curvatures of every batch's quadratic (and the full-batch
/// one) along the directions of one source batch.
#[derive(Clone, Debug)]
pub struct ScanReport {
    source: usize,
    /// `cells[direction][batch]`
    cells: Vec<Vec<Directional>>,
    full: Vec<Directional>,
    termination: Option<Termination>,
}

impl ScanReport {
    pub fn new(
        source: usize,
        cells: Vec<Vec<Directional>>,
        full: Vec<Directional>,
        termination: Option<Termination>,
    ) -> Result<Self> {
        if cells.len() != full.len() {
            return Err(Error::validation("scan needs one full-batch entry per direction"));
        }
        let n_batches = cells.first().map_or(0, Vec::len);
        if cells.iter().any(|row| row.len() != n_batches) {
            return Err(Error::validation("ragged scan table"));
        }
        if !cells.is_empty() && source >= n_batches {
            return Err(Error::validation(format!("source batch {source} out of range")));
        }
        Ok(Self {
            source,
            cells,
            full,
            termination,
        })
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn n_directions(&self) -> usize {
        self.cells.len()
    }

    pub fn n_batches(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    pub fn cell(&self, direction: usize, batch: usize) -> Directional {
        self.cells[direction][batch]
    }

    pub fn full(&self, direction: usize) -> Directional {
        self.full[direction]
    }

    pub fn same_batch(&self, direction: usize) -> Directional {
        self.cells[direction][self.source]
    }

    pub fn get(&self, direction: usize, batch: BatchId) -> Directional {
        match batch {
            BatchId::Batch(b) => self.cell(direction, b),
            BatchId::Full => self.full(direction),
        }
    }

    /// CG scans only: how the underlying run ended.
    pub fn termination(&self) -> Option<Termination> {
        self.termination
    }

    /// The CG run hit non-positive curvature before the requested length.
    pub fn truncated(&self) -> bool {
        self.termination == Some(Termination::NegativeCurvature)
    }

    /// Per-direction mean over the evaluation batches.
    pub fn batch_mean(&self, direction: usize) -> Directional {
        let row = &self.cells[direction];
        let n = row.len() as f64;
        Directional {
            slope: row.iter().map(|c| c.slope).sum::<f64>() / n,
            curvature: row.iter().map(|c| c.curvature).sum::<f64>() / n,
        }
    }

    /// Largest relative deviation of the batch mean from the full-batch
    /// value, over directions and both quantities. Zero only when the batches
    /// are a disjoint equal-size partition and the curvature is linear in the
    /// data (Hessian, GGN).
    pub fn batch_mean_deviation(&self) -> f64 {
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(RELATIVE_ERROR_GUARD);
        (0..self.n_directions())
            .map(|i| {
                let m = self.batch_mean(i);
                let f = self.full(i);
                rel(m.slope, f.slope).max(rel(m.curvature, f.curvature))
            })
            .fold(0.0, f64::max)
    }

    /// Rows ordered by direction, then batch, the full-batch row last.
    pub fn rows(&self) -> Vec<ScanRow> {
        let mut out = Vec::with_capacity(self.n_directions() * (self.n_batches() + 1));
        for (i, row) in self.cells.iter().enumerate() {
            let ids = (0..row.len()).map(BatchId::Batch).chain([BatchId::Full]);
            for id in ids {
                let v = self.get(i, id);
                out.push(ScanRow {
                    direction: i,
                    batch: id,
                    slope: v.slope,
                    curvature: v.curvature,
                });
            }
        }
        out
    }

    /// Presentation view: directions whose same-batch slope is negative are
    /// flipped (negating every slope, curvatures unchanged), then sorted by
    /// descending same-batch slope. The report itself is left untouched.
    pub fn display_normalized(&self) -> DisplayScan {
        let flipped: Vec<bool> = (0..self.n_directions())
            .map(|i| self.same_batch(i).slope < 0.0)
            .collect();
        let sign = |i: usize| if flipped[i] { -1.0 } else { 1.0 };
        let mut order: Vec<usize> = (0..self.n_directions()).collect();
        order.sort_by(|&a, &b| {
            let sa = sign(a) * self.same_batch(a).slope;
            let sb = sign(b) * self.same_batch(b).slope;
            sb.total_cmp(&sa).then(a.cmp(&b))
        });
        let mut rows = Vec::new();
        for &i in &order {
            for mut row in self.rows().into_iter().filter(|r| r.direction == i) {
                row.slope *= sign(i);
                rows.push(row);
            }
        }
        DisplayScan { order, flipped, rows }
    }
}

/// Output of [`ScanReport::display_normalized`]. `rows` keep the original
/// direction indices.
#[derive(Clone, Debug)]
pub struct DisplayScan {
    /// Original direction index at each display position.
    pub order: Vec<usize>,
    /// Indexed by original direction.
    pub flipped: Vec<bool>,
    pub rows: Vec<ScanRow>,
}

/// Mini-batch quadratics and the full-batch quadratic, all anchored at the
/// same point.
pub struct ScanContext {
    batches: Vec<QuadraticModel>,
    full: QuadraticModel,
}

impl ScanContext {
    pub fn new(batches: Vec<QuadraticModel>, full: QuadraticModel) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::validation("a scan needs at least one batch"));
        }
        if batches.iter().any(|q| q.anchor() != full.anchor()) {
            return Err(Error::validation("scan quadratics must share the anchor"));
        }
        Ok(Self { batches, full })
    }

    /// Quadratics of `L_reg` around `theta` for each batch and for the whole
    /// dataset (streamed in chunks of `chunk_size`).
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        mlp: &Mlp,
        theta: &ParamVector,
        batches: &[Batch],
        dataset: &Dataset,
        kind: CurvatureKind,
        beta: f64,
        delta: f64,
        chunk_size: usize,
    ) -> Result<Self> {
        let quads = batches
            .par_iter()
            .map(|b| build_quadratic(mlp, theta, b, kind, beta, delta))
            .collect::<Result<Vec<_>>>()?;
        let full = fullbatch_quadratic(mlp, theta, dataset, kind, beta, delta, chunk_size)?;
        Self::new(quads, full)
    }

    pub fn batches(&self) -> &[QuadraticModel] {
        &self.batches
    }

    pub fn full(&self) -> &QuadraticModel {
        &self.full
    }

    pub fn dim(&self) -> usize {
        self.full.dim()
    }

    fn quad(&self, source: usize) -> Result<&QuadraticModel> {
        self.batches
            .get(source)
            .ok_or_else(|| Error::validation(format!("source batch {source} out of range")))
    }

    /// Slopes at `anchors[i]` and curvatures along `directions[i]` for every
    /// batch quadratic and the full one.
    fn evaluate(
        &self,
        directions: &[Direction],
        anchors: Option<&[Vec<f64>]>,
    ) -> Result<(Vec<Vec<Directional>>, Vec<Directional>)> {
        let at = |i: usize| anchors.map_or(self.full.anchor(), |a| &a[i]);
        let one = |q: &QuadraticModel, i: usize| -> Result<Directional> {
            let d = &directions[i];
            Ok(Directional {
                slope: q.directional_slope(at(i), d)?,
                curvature: q.directional_curvature(d)?,
            })
        };
        let cells = (0..directions.len())
            .into_par_iter()
            .map(|i| self.batches.iter().map(|q| one(q, i)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let full = (0..directions.len())
            .into_par_iter()
            .map(|i| one(&self.full, i))
            .collect::<Result<Vec<_>>>()?;
        Ok((cells, full))
    }
}

/// Top-`k` eigenvectors of one batch's curvature, scanned across all batches.
pub fn eigendirection_scan_source(
    ctx: &ScanContext,
    source: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<(DirectionSet, ScanReport)> {
    if k > ctx.dim() {
        return Err(Error::validation(format!(
            "k = {k} exceeds the {} parameters",
            ctx.dim()
        )));
    }
    let q = ctx.quad(source)?;
    let eig = top_k_eigenpairs(q.curvature(), k, rng)?;
    let set = DirectionSet::from_eigen(source, &eig)?;
    let (cells, full) = ctx.evaluate(set.directions(), None)?;
    let report = ScanReport::new(source, cells, full, None)?;
    Ok((set, report))
}

/// [`eigendirection_scan_source`] for every batch in turn; each source gets
/// its own RNG stream.
pub fn eigendirection_scan(ctx: &ScanContext, k: usize, seed: u64) -> Result<Vec<(DirectionSet, ScanReport)>> {
    (0..ctx.batches.len())
        .map(|m| eigendirection_scan_source(ctx, m, k, &mut Rng::with_stream(seed, m as u64)))
        .collect()
}

/// Runs CG on one batch's quadratic for at most `k` steps and evaluates every
/// quadratic along each search direction `d_p` at its iterate `θ_p`.
pub fn cg_direction_scan(
    ctx: &ScanContext,
    source: usize,
    k: usize,
    config: &CgConfig,
) -> Result<(DirectionSet, CgTrace, ScanReport)> {
    let q = ctx.quad(source)?;
    let config = CgConfig::new(config.tol, config.max_iter.min(k))?;
    let trace = cg_minimize(q, &config)?;
    let set = DirectionSet::from_trace(source, &trace);
    let (cells, full) = ctx.evaluate(set.directions(), Some(set.anchors()))?;
    let report = ScanReport::new(source, cells, full, Some(trace.termination))?;
    if report.truncated() {
        log::warn!(
            "CG scan of batch {source} truncated after {} directions (non-positive curvature)",
            report.n_directions()
        );
    }
    Ok((set, trace, report))
}

/// `Ω_{i,p} = (u_iᵀũ_p)²` between two direction sets.
#[derive(Clone, Debug)]
pub struct OverlapMatrix {
    omega: Matrix,
    sources: (usize, usize),
    ambient_dim: usize,
}

impl OverlapMatrix {
    pub fn omega(&self) -> &Matrix {
        &self.omega
    }

    pub fn get(&self, i: usize, p: usize) -> f64 {
        self.omega[(i, p)]
    }

    pub fn sources(&self) -> (usize, usize) {
        self.sources
    }

    /// `Σ_p Ω_{i,p}` per row; exactly one when `ũ` spans the whole space.
    pub fn captured_mass(&self) -> Vec<f64> {
        (0..self.omega.rows()).map(|i| self.omega.row(i).iter().sum()).collect()
    }

    pub fn spans_full_space(&self) -> bool {
        self.omega.cols() == self.ambient_dim
    }
}

/// Grayscale level in `[0, 1]` on a logarithmic scale: 0 (black) for values
/// at or below [`OVERLAP_DISPLAY_FLOOR`], 1 (white) at 1.
pub fn overlap_gray_level(value: f64) -> f64 {
    let lo = OVERLAP_DISPLAY_FLOOR.log10();
    ((value.max(OVERLAP_DISPLAY_FLOOR).log10() - lo) / -lo).clamp(0.0, 1.0)
}

/// Overlap of raw direction lists, rows from `u`, columns from `u_tilde`.
pub fn overlap_of(u: &[Direction], u_tilde: &[Direction]) -> Result<Matrix> {
    let dim = u.first().or(u_tilde.first()).map_or(0, Direction::len);
    if u.iter().chain(u_tilde).any(|d| d.len() != dim) {
        return Err(Error::validation("overlap needs directions of equal dimension"));
    }
    Ok(Matrix::from_fn(u.len(), u_tilde.len(), |i, p| {
        dot(u[i].as_slice(), u_tilde[p].as_slice()).powi(2)
    }))
}

pub fn overlap_matrix(u: &DirectionSet, u_tilde: &DirectionSet) -> Result<OverlapMatrix> {
    if u.kind != DirectionKind::Eigen || u_tilde.kind != DirectionKind::Eigen {
        return Err(Error::validation("overlap matrices compare eigenbases"));
    }
    let omega = overlap_of(&u.directions, &u_tilde.directions)?;
    let ambient_dim = u
        .directions
        .first()
        .or(u_tilde.directions.first())
        .map_or(0, Direction::len);
    Ok(OverlapMatrix {
        omega,
        sources: (u.source, u_tilde.source),
        ambient_dim,
    })
}

/// Predicted curvature of `H_B̃` along each `u_i`: `Σ_p λ̃_p Ω_{i,p}`.
///
/// `eig_b_tilde` must be complete so that the columns of `omega` cover its
/// whole eigenbasis; `eig_b` supplies the rows.
pub fn spectral_transfer(
    eig_b: &EigenDecomposition,
    eig_b_tilde: &EigenDecomposition,
    omega: &OverlapMatrix,
) -> Result<Vec<f64>> {
    if eig_b_tilde.k() != eig_b_tilde.dim() {
        return Err(Error::validation(format!(
            "spectral transfer needs a full decomposition, got {} of {} eigenpairs",
            eig_b_tilde.k(),
            eig_b_tilde.dim()
        )));
    }
    if omega.omega.rows() != eig_b.k() || omega.omega.cols() != eig_b_tilde.k() || eig_b.dim() != eig_b_tilde.dim() {
        return Err(Error::validation("overlap shape does not match the decompositions"));
    }
    Ok(omega.omega.matvec(eig_b_tilde.eigenvalues()))
}

/// Slopes of two quadratics along the steepest-descent direction of the first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SlopeBias {
    /// `−‖∇q(θ; B)‖`
    pub slope_b: f64,
    /// `dᵀ∇q(θ; B̃)`
    pub slope_b_tilde: f64,
    /// Angle between the two gradients, in `[0, π]`.
    pub angle: f64,
    pub grad_norm_b: f64,
    pub grad_norm_b_tilde: f64,
    /// `|slope_B̃ + ∇q(B)ᵀ∇q(B̃)/‖∇q(B)‖|`, zero up to rounding.
    pub identity_residual: f64,
}

impl SlopeBias {
    /// `‖∇q(θ; B)‖(1 − cos α)`, which equals `slope_B̃ − slope_B` when the
    /// gradient norms agree.
    pub fn equal_norm_gap(&self) -> f64 {
        self.grad_norm_b * (1.0 - self.angle.cos())
    }
}

pub fn slope_bias(q_b: &QuadraticModel, q_b_tilde: &QuadraticModel, theta: &[f64]) -> Result<SlopeBias> {
    let g = q_b.grad_at(theta)?;
    let g_tilde = q_b_tilde.grad_at(theta)?;
    let grad_norm_b = norm(&g);
    let grad_norm_b_tilde = norm(&g_tilde);
    if grad_norm_b == 0.0 || !grad_norm_b.is_finite() {
        return Err(Error::validation("steepest descent needs a nonzero gradient"));
    }
    let d = Direction::normalize(&g.iter().map(|v| -v).collect::<Vec<_>>())?;
    let slope_b = dot(d.as_slice(), &g);
    let slope_b_tilde = dot(d.as_slice(), &g_tilde);
    let gg = dot(&g, &g_tilde);
    let cos = if grad_norm_b_tilde > 0.0 {
        (gg / (grad_norm_b * grad_norm_b_tilde)).clamp(-1.0, 1.0)
    } else {
        1.0
    };
    Ok(SlopeBias {
        slope_b,
        slope_b_tilde,
        angle: cos.acos(),
        grad_norm_b,
        grad_norm_b_tilde,
        identity_residual: (slope_b_tilde + gg / grad_norm_b).abs(),
    })
}

/// `|measured − truth| / |truth|`, `None` where `|truth|` is below
/// [`RELATIVE_ERROR_GUARD`].
pub fn relative_errors(measured: &[f64], truth: &[f64]) -> Result<Vec<Option<f64>>> {
    if measured.len() != truth.len() {
        return Err(Error::validation("measured and reference lengths differ"));
    }
    Ok(measured
        .iter()
        .zip(truth)
        .map(|(m, t)| (t.abs() >= RELATIVE_ERROR_GUARD).then(|| (m - t).abs() / t.abs()))
        .collect())
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasQuantity {
    Slope,
    Curvature,
}

/// Which batch's measurement is compared with the full-batch value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// The batch the directions came from.
    SameBatch,
    /// Every other batch.
    CrossBatch,
}

/// Context recorded alongside a summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SummaryMeta {
    pub batch_size: usize,
    pub n_params: usize,
    pub epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasSummary {
    pub errors: Vec<f64>,
    /// Directions dropped because the full-batch value vanished.
    pub excluded: usize,
    pub mean: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    #[serde(flatten)]
    pub meta: SummaryMeta,
}

impl BiasSummary {
    pub fn from_values(measured: &[f64], truth: &[f64], meta: SummaryMeta) -> Result<Self> {
        let all = relative_errors(measured, truth)?;
        let excluded = all.iter().filter(|e| e.is_none()).count();
        let errors: Vec<f64> = all.into_iter().flatten().collect();
        if errors.is_empty() {
            return Err(Error::validation("no direction has a usable full-batch reference"));
        }
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mean: errors.iter().sum::<f64>() / errors.len() as f64,
            p25: percentile(&sorted, 0.25),
            median: percentile(&sorted, 0.5),
            p75: percentile(&sorted, 0.75),
            errors,
            excluded,
            meta,
        })
    }
}

/// Relative errors of batch measurements against the full-batch values,
/// pooled over all directions of all `scans`.
pub fn bias_summary(
    scans: &[ScanReport],
    quantity: BiasQuantity,
    pairing: Pairing,
    meta: SummaryMeta,
) -> Result<BiasSummary> {
    let pick = |d: Directional| match quantity {
        BiasQuantity::Slope => d.slope,
        BiasQuantity::Curvature => d.curvature,
    };
    let mut measured = Vec::new();
    let mut truth = Vec::new();
    for scan in scans {
        for i in 0..scan.n_directions() {
            let batches: Vec<usize> = match pairing {
                Pairing::SameBatch => vec![scan.source],
                Pairing::CrossBatch => (0..scan.n_batches()).filter(|&b| b != scan.source).collect(),
            };
            for b in batches {
                measured.push(pick(scan.cell(i, b)));
                truth.push(pick(scan.full(i)));
            }
        }
    }
    BiasSummary::from_values(&measured, &truth, meta)
}
