//! Experiment protocols: bias scans, overlaps, CG comparisons, Laplace
//! sweeps, and bias trends over training and model size.
//!
//! Each protocol has a typed entry point returning in-memory results and a
//! writer used by [`run_experiment`]. Every random choice is drawn from a
//! named stream of an explicit seed, so results are a pure function of the
//! configuration.

use std::path::Path;

use mbq_core::cg::{cg_minimize, debiased_cg, CgConfig, CgTrace, DebiasMode};
use mbq_core::diagnostics::{
    bias_summary, cg_direction_scan, eigendirection_scan_source, overlap_gray_level, overlap_matrix, BiasQuantity,
    BiasSummary, DirectionSet, OverlapMatrix, Pairing, ScanContext, ScanReport, SummaryMeta,
};
use mbq_core::laplace::{accumulate_kfac, build_posterior, debias_kfac, predictive, PredictiveConfig};
use mbq_core::linalg::{top_k_eigenpairs, Matrix, Rng};
use mbq_core::metrics::{accuracy, auroc, ece, nll, predictive_entropy, ProbTable, DEFAULT_ECE_BINS};
use mbq_core::model::{Batch, Dataset, KfacBlock, Mlp, MlpArchitecture, ParamVector};
use mbq_core::quadratic::{build_quadratic, fullbatch_quadratic, QuadraticModel};
use rayon::prelude::*;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::data::{generate_dataset, GeneratedData};
use crate::error::{Context, HarnessError, Result};
use crate::plot::{heatmap, xy_plot, Series, PALETTE};
use crate::report::{fmt_float, Sink, Table};
use crate::train::train;

const STREAM_PARTITION: u64 = 10;
const STREAM_CG_SINGLE: u64 = 20;
const STREAM_CG_DEBIASED: u64 = 21;
const STREAM_HALF_SPLIT: u64 = 22;
const STREAM_LA_SINGLE: u64 = 30;
const STREAM_LA_DEBIASED: u64 = 31;
const STREAM_LA_FULL: u64 = 32;
const STREAM_KFAC: u64 = 33;
const STREAM_PREDICTIVE: u64 = 34;
const STREAM_LANCZOS: u64 = 1000;

/// Data, network and trained checkpoints shared by all protocols.
pub struct Fixture {
    pub data: GeneratedData,
    pub mlp: Mlp,
    pub checkpoints: Vec<Checkpoint>,
    anchor: usize,
}

impl Fixture {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        Self::with_hidden(cfg, &cfg.model.hidden)
    }

    /// Generates the data and trains (or loads) a network with the given
    /// hidden widths.
    pub fn with_hidden(cfg: &ExperimentConfig, hidden: &[usize]) -> Result<Self> {
        let data = generate_dataset(&cfg.data)?;
        let sizes: Vec<usize> = std::iter::once(cfg.data.d)
            .chain(hidden.iter().copied())
            .chain([cfg.data.c])
            .collect();
        let arch = MlpArchitecture::new(sizes, cfg.model.activation, cfg.model.loss)?;
        let mlp = Mlp::new(arch, cfg.model.regularize);
        let checkpoints = match &cfg.train.checkpoint {
            Some(path) => {
                let c = Checkpoint::load(path)?;
                if c.architecture != *mlp.architecture() {
                    return Err(HarnessError::validation(format!(
                        "{} holds a different architecture",
                        path.display()
                    )));
                }
                vec![c]
            }
            None => train(&mlp, &data.train, &cfg.train, &cfg.digest())?,
        };
        let anchor = match cfg.train.anchor_epoch {
            Some(e) => checkpoints
                .iter()
                .position(|c| c.epoch == e)
                .ok_or_else(|| HarnessError::validation(format!("no checkpoint at epoch {e}")))?,
            None => checkpoints.len() - 1,
        };
        Ok(Self {
            data,
            mlp,
            checkpoints,
            anchor,
        })
    }

    pub fn anchor(&self) -> &Checkpoint {
        &self.checkpoints[self.anchor]
    }

    pub fn theta(&self) -> &ParamVector {
        &self.anchor().params
    }
}

/// Fraction of correctly classified samples under the MAP network.
pub fn map_accuracy(mlp: &Mlp, theta: &ParamVector, data: &Dataset) -> Result<f64> {
    let probs = mlp.predict_proba(theta, data.inputs())?;
    Ok(accuracy(&ProbTable::new(probs, data.labels().to_vec())?)?)
}

fn dataset_of(batch: &Batch, c: usize) -> Result<Dataset> {
    Ok(Dataset::new(batch.inputs().clone(), batch.labels(), c)?)
}

// ---------------------------------------------------------------- scans

/// Eigen and CG scans of one batch size and seed.
pub struct ScanRun {
    pub batch_size: usize,
    pub seed: u64,
    pub n_batches: usize,
    pub eigen: Vec<(DirectionSet, ScanReport)>,
    pub cg: Vec<(CgTrace, ScanReport)>,
}

impl ScanRun {
    /// Same-batch over full-batch curvature along each source's top eigenvector.
    pub fn top_curvature_ratios(&self) -> Vec<f64> {
        self.eigen
            .iter()
            .map(|(_, r)| r.same_batch(0).curvature / r.full(0).curvature)
            .collect()
    }

    pub fn summary(
        &self,
        directions: &str,
        quantity: BiasQuantity,
        pairing: Pairing,
        meta: SummaryMeta,
    ) -> Result<BiasSummary> {
        let reports: Vec<ScanReport> = match directions {
            "eigen" => self.eigen.iter().map(|(_, r)| r.clone()).collect(),
            _ => self.cg.iter().map(|(_, r)| r.clone()).collect(),
        };
        Ok(bias_summary(&reports, quantity, pairing, meta)?)
    }
}

/// Partitions the training set into batches of `batch_size` (seeded),
/// takes the first `cfg.scan.sources` as sources and scans their top-k
/// eigenvectors and first CG directions across all batches and the full data.
pub fn scan_run(
    fix: &Fixture,
    theta: &ParamVector,
    cfg: &ExperimentConfig,
    batch_size: usize,
    seed: u64,
    with_cg: bool,
) -> Result<ScanRun> {
    let ctx_err = || format!("bias scan (batch size {batch_size}, seed {seed})");
    let batches = fix
        .data
        .train
        .partition(batch_size, &mut Rng::with_stream(seed, STREAM_PARTITION))
        .context(ctx_err)?;
    let c = &cfg.curvature;
    let ctx = ScanContext::build(
        &fix.mlp,
        theta,
        &batches,
        &fix.data.train,
        c.kind(seed)?,
        c.beta,
        c.delta,
        c.chunk_size,
    )
    .context(ctx_err)?;
    let sources = cfg.scan.sources.min(batches.len());
    let eigen = (0..sources)
        .into_par_iter()
        .map(|m| {
            let mut rng = Rng::with_stream(seed, STREAM_LANCZOS + m as u64);
            eigendirection_scan_source(&ctx, m, cfg.scan.k, &mut rng)
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .context(ctx_err)?;
    let cg = if with_cg && cfg.scan.cg_directions > 0 {
        let cg_cfg = CgConfig::new(cfg.cg.tol, cfg.scan.cg_directions).context(ctx_err)?;
        (0..sources)
            .into_par_iter()
            .map(|m| cg_direction_scan(&ctx, m, cfg.scan.cg_directions, &cg_cfg).map(|(_, t, r)| (t, r)))
            .collect::<std::result::Result<Vec<_>, _>>()
            .context(ctx_err)?
    } else {
        Vec::new()
    };
    Ok(ScanRun {
        batch_size,
        seed,
        n_batches: batches.len(),
        eigen,
        cg,
    })
}

pub const SUMMARY_HEADER: [&str; 13] = [
    "batch_size",
    "n_params",
    "epoch",
    "seed",
    "directions",
    "quantity",
    "pairing",
    "count",
    "excluded",
    "mean",
    "p25",
    "p50",
    "p75",
];

fn summary_rows(table: &mut Table, run: &ScanRun, n_params: usize, epoch: usize) -> Result<Vec<BiasSummary>> {
    let mut out = Vec::new();
    let kinds: &[&str] = if run.cg.is_empty() {
        &["eigen"]
    } else {
        &["eigen", "cg"]
    };
    for &directions in kinds {
        for (quantity, qname) in [(BiasQuantity::Slope, "slope"), (BiasQuantity::Curvature, "curvature")] {
            for (pairing, pname) in [(Pairing::SameBatch, "same_batch"), (Pairing::CrossBatch, "cross_batch")] {
                if pairing == Pairing::CrossBatch && run.n_batches < 2 {
                    continue;
                }
                let meta = SummaryMeta {
                    batch_size: run.batch_size,
                    n_params,
                    epoch: Some(epoch),
                };
                let s = match run.summary(directions, quantity, pairing, meta) {
                    Ok(s) => s,
                    Err(HarnessError::Core { source, .. }) if !source.is_numerical() => {
                        log::warn!(
                            "no usable {directions} {qname} values for batch size {}",
                            run.batch_size
                        );
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                table.push(vec![
                    run.batch_size.to_string(),
                    n_params.to_string(),
                    epoch.to_string(),
                    run.seed.to_string(),
                    directions.into(),
                    qname.into(),
                    pname.into(),
                    s.errors.len().to_string(),
                    s.excluded.to_string(),
                    fmt_float(s.mean),
                    fmt_float(s.p25),
                    fmt_float(s.median),
                    fmt_float(s.p75),
                ]);
                out.push(s);
            }
        }
    }
    Ok(out)
}

pub fn scan_table(report: &ScanReport) -> Table {
    let mut t = Table::new(&["direction_index", "batch_id", "slope", "curvature"]);
    for r in report.rows() {
        t.push(vec![
            r.direction.to_string(),
            r.batch.to_string(),
            fmt_float(r.slope),
            fmt_float(r.curvature),
        ]);
    }
    t
}

fn scan_svg(title: &str, report: &ScanReport, quantity: BiasQuantity) -> String {
    let view = report.display_normalized();
    let pick = |r: &mbq_core::diagnostics::ScanRow| match quantity {
        BiasQuantity::Slope => r.slope,
        BiasQuantity::Curvature => r.curvature,
    };
    let pos = |d: usize| view.order.iter().position(|&o| o == d).unwrap_or(0) as f64;
    let mut same = Vec::new();
    let mut other = Vec::new();
    let mut full = Vec::new();
    for r in &view.rows {
        let p = (pos(r.direction), pick(r));
        match r.batch {
            mbq_core::diagnostics::BatchId::Full => full.push(p),
            mbq_core::diagnostics::BatchId::Batch(b) if b == report.source() => same.push(p),
            _ => other.push(p),
        }
    }
    let series = [
        Series {
            label: "other batches".into(),
            color: PALETTE[5],
            points: other,
            line: false,
        },
        Series {
            label: "same batch".into(),
            color: PALETTE[1],
            points: same,
            line: false,
        },
        Series {
            label: "full batch".into(),
            color: PALETTE[0],
            points: full,
            line: false,
        },
    ];
    let name = match quantity {
        BiasQuantity::Slope => "slope",
        BiasQuantity::Curvature => "curvature",
    };
    xy_plot(title, "direction", name, &series, quantity == BiasQuantity::Curvature)
}

fn write_scan_run(sink: &mut Sink, run: &ScanRun, svg: bool) -> Result<()> {
    let dir = format!("scans/b{}_s{}", run.batch_size, run.seed);
    for (set, report) in &run.eigen {
        sink.csv(&format!("{dir}/eigen_m{:03}.csv", set.source()), &scan_table(report))?;
    }
    for (_, report) in &run.cg {
        sink.csv(&format!("{dir}/cg_m{:03}.csv", report.source()), &scan_table(report))?;
    }
    if svg {
        if let Some((_, r)) = run.eigen.first() {
            for q in [BiasQuantity::Slope, BiasQuantity::Curvature] {
                let name = if q == BiasQuantity::Slope { "slope" } else { "curvature" };
                let title = format!("eigenvectors of batch 0 (size {}): {name}", run.batch_size);
                sink.svg(&format!("{dir}/eigen_m000_{name}.svg"), &scan_svg(&title, r, q))?;
            }
        }
        if let Some((_, r)) = run.cg.first() {
            let title = format!("CG directions of batch 0 (size {}): slope", run.batch_size);
            sink.svg(
                &format!("{dir}/cg_m000_slope.svg"),
                &scan_svg(&title, r, BiasQuantity::Slope),
            )?;
        }
    }
    Ok(())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    mbq_core::diagnostics::percentile(&v, 0.5)
}

fn run_bias_scan(cfg: &ExperimentConfig, fix: &Fixture, sink: &mut Sink) -> Result<serde_json::Value> {
    let theta = fix.theta();
    let mut table = Table::new(&SUMMARY_HEADER);
    let mut runs_json = Vec::new();
    for &b in &cfg.scan.batch_sizes {
        for &seed in &cfg.seeds {
            let run = scan_run(fix, theta, cfg, b, seed, true)?;
            let summaries = summary_rows(&mut table, &run, fix.mlp.n_params(), fix.anchor().epoch)?;
            write_scan_run(sink, &run, cfg.svg && seed == cfg.seeds[0])?;
            let ratios = run.top_curvature_ratios();
            let over = ratios.iter().filter(|r| **r > 1.0).count() as f64 / ratios.len() as f64;
            let same_curv = summaries
                .iter()
                .zip(table.rows.iter().rev().take(summaries.len()).rev())
                .find(|(_, row)| row[4] == "eigen" && row[5] == "curvature" && row[6] == "same_batch")
                .map(|(s, _)| s.median);
            runs_json.push(json!({
                "batch_size": b,
                "seed": seed,
                "n_batches": run.n_batches,
                "sources": run.eigen.len(),
                "top_curvature_over_fraction": over,
                "top_curvature_median_ratio": median(&ratios),
                "same_batch_curvature_median_error": same_curv,
                "cg_terminations": run.cg.iter().map(|(t, _)| t.termination.name()).collect::<Vec<_>>(),
                "cg_truncated": run.cg.iter().any(|(_, r)| r.truncated()),
            }));
        }
    }
    sink.csv("bias_summary.csv", &table)?;
    Ok(json!({ "runs": runs_json }))
}

// -------------------------------------------------------------- overlap

/// Top-k eigenbases of the first few batches and their pairwise overlaps.
pub struct OverlapRun {
    pub sets: Vec<DirectionSet>,
    /// `(m, m', Ω)` for all ordered pairs.
    pub overlaps: Vec<(usize, usize, OverlapMatrix)>,
}

pub fn overlap_run(
    fix: &Fixture,
    cfg: &ExperimentConfig,
    batch_size: usize,
    seed: u64,
    n_sets: usize,
) -> Result<OverlapRun> {
    let batches = fix
        .data
        .train
        .partition(batch_size, &mut Rng::with_stream(seed, STREAM_PARTITION))?;
    let c = &cfg.curvature;
    let n_sets = n_sets.min(batches.len());
    let sets = (0..n_sets)
        .into_par_iter()
        .map(|m| -> Result<DirectionSet> {
            let q = build_quadratic(&fix.mlp, fix.theta(), &batches[m], c.kind(seed)?, c.beta, c.delta)?;
            let mut rng = Rng::with_stream(seed, STREAM_LANCZOS + m as u64);
            let eig = top_k_eigenpairs(q.curvature(), cfg.scan.k, &mut rng)
                .context(|| format!("eigenvectors of batch {m}"))?;
            Ok(DirectionSet::from_eigen(m, &eig)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut overlaps = Vec::new();
    for a in &sets {
        for b in &sets {
            overlaps.push((a.source(), b.source(), overlap_matrix(a, b)?));
        }
    }
    Ok(OverlapRun { sets, overlaps })
}

fn run_overlap(cfg: &ExperimentConfig, fix: &Fixture, sink: &mut Sink) -> Result<serde_json::Value> {
    let b = cfg.scan.batch_sizes[0];
    let seed = cfg.seeds[0];
    let run = overlap_run(fix, cfg, b, seed, 3.min(cfg.scan.sources))?;
    let mut mass = Vec::new();
    for (m, mp, o) in &run.overlaps {
        let mut t = Table::new(&["i", "j", "omega"]);
        for i in 0..o.omega().rows() {
            for j in 0..o.omega().cols() {
                t.push(vec![i.to_string(), j.to_string(), fmt_float(o.get(i, j))]);
            }
        }
        sink.csv(&format!("overlap/m{m}_m{mp}.csv"), &t)?;
        if cfg.svg {
            let levels = Matrix::from_fn(o.omega().rows(), o.omega().cols(), |i, j| {
                overlap_gray_level(o.get(i, j))
            });
            sink.svg(
                &format!("overlap/m{m}_m{mp}.svg"),
                &heatmap(&format!("overlap of batches {m} and {mp}"), &levels),
            )?;
        }
        mass.push(
            json!({ "m": m, "m_prime": mp, "captured_mass": o.captured_mass(), "full_basis": o.spans_full_space() }),
        );
    }
    Ok(json!({ "batch_size": b, "seed": seed, "pairs": mass }))
}

// ----------------------------------------------------------- cg-compare

/// Evaluation of one CG iterate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterateMetrics {
    pub q_full: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub struct Trajectory {
    pub method: &'static str,
    pub seed: Option<u64>,
    pub trace: CgTrace,
    pub metrics: Vec<IterateMetrics>,
    /// Curvature products spent, including those of the direction run.
    pub matvecs: usize,
}

pub struct CgCompare {
    pub single: Vec<Trajectory>,
    pub debiased: Vec<Trajectory>,
    /// Plain CG on the full data and the half/half debiased variant.
    pub fullbatch: Vec<Trajectory>,
}

fn evaluate_trajectory(
    fix: &Fixture,
    q_full: &QuadraticModel,
    beta: f64,
    trace: &CgTrace,
) -> Result<Vec<IterateMetrics>> {
    let train = fix.data.train.full_batch()?;
    let test = fix.data.test.full_batch()?;
    trace
        .iterates
        .par_iter()
        .map(|theta| {
            let p = fix.mlp.params(theta.clone())?;
            Ok(IterateMetrics {
                q_full: q_full.value_at(theta)?,
                train_loss: fix.mlp.loss(&p, &train, beta)?,
                test_loss: fix.mlp.loss(&p, &test, beta)?,
                train_accuracy: map_accuracy(&fix.mlp, &p, &fix.data.train)?,
                test_accuracy: map_accuracy(&fix.mlp, &p, &fix.data.test)?,
            })
        })
        .collect()
}

/// Single-batch CG at `cfg.cg.batch_size` against debiased CG on two
/// independent batches of half that size, for every seed.
pub fn cg_compare(fix: &Fixture, cfg: &ExperimentConfig) -> Result<CgCompare> {
    let c = &cfg.curvature;
    let theta = fix.theta();
    let cg_cfg = CgConfig::new(cfg.cg.tol, cfg.cg.iterations)?;
    let q_full = fullbatch_quadratic(
        &fix.mlp,
        theta,
        &fix.data.train,
        c.kind(cfg.data.seed)?,
        c.beta,
        c.delta,
        c.chunk_size,
    )?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<(Trajectory, Trajectory)> {
            let ctx = || format!("cg-compare seed {seed}");
            let kind = c.kind(seed)?;
            let single = fix
                .data
                .train
                .partition(cfg.cg.batch_size, &mut Rng::with_stream(seed, STREAM_CG_SINGLE))
                .context(ctx)?;
            let q_single = build_quadratic(&fix.mlp, theta, &single[0], kind, c.beta, c.delta).context(ctx)?;
            let single_trace = cg_minimize(&q_single, &cg_cfg).context(ctx)?;
            let debiased_run = if cfg.cg.force_same_batch {
                debiased_cg(
                    &q_single,
                    &q_single,
                    cfg.cg.iterations,
                    &cg_cfg,
                    DebiasMode::Interleaved,
                )
                .context(ctx)?
            } else {
                let halves = fix
                    .data
                    .train
                    .partition(cfg.cg.batch_size / 2, &mut Rng::with_stream(seed, STREAM_CG_DEBIASED))
                    .context(ctx)?;
                let q_dir = build_quadratic(&fix.mlp, theta, &halves[0], kind, c.beta, c.delta).context(ctx)?;
                let q_mag = build_quadratic(&fix.mlp, theta, &halves[1], kind, c.beta, c.delta).context(ctx)?;
                debiased_cg(&q_dir, &q_mag, cfg.cg.iterations, &cg_cfg, DebiasMode::Interleaved).context(ctx)?
            };
            let debiased_matvecs = debiased_run.total_matvecs();
            let debiased_trace = debiased_run.debiased;
            Ok((
                Trajectory {
                    method: "single",
                    seed: Some(seed),
                    metrics: evaluate_trajectory(fix, &q_full, c.beta, &single_trace)?,
                    matvecs: single_trace.matvecs,
                    trace: single_trace,
                },
                Trajectory {
                    method: "debiased",
                    seed: Some(seed),
                    metrics: evaluate_trajectory(fix, &q_full, c.beta, &debiased_trace)?,
                    matvecs: debiased_matvecs,
                    trace: debiased_trace,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (single, debiased) = per_seed.into_iter().unzip();

    let mut fullbatch = Vec::new();
    if cfg.cg.fullbatch {
        let trace = cg_minimize(&q_full, &cg_cfg).context(|| "full-batch CG".into())?;
        fullbatch.push(Trajectory {
            method: "fullbatch",
            seed: None,
            metrics: evaluate_trajectory(fix, &q_full, c.beta, &trace)?,
            matvecs: trace.matvecs,
            trace,
        });
        let n = fix.data.train.len();
        let mut ids: Vec<usize> = (0..n).collect();
        Rng::with_stream(cfg.data.seed, STREAM_HALF_SPLIT).shuffle(&mut ids);
        let k = cfg.data.c;
        let first = dataset_of(&fix.data.train.subset(&ids[..n / 2])?, k)?;
        let second = dataset_of(&fix.data.train.subset(&ids[n / 2..])?, k)?;
        let kind = c.kind(cfg.data.seed)?;
        let q_dir = fullbatch_quadratic(&fix.mlp, theta, &first, kind, c.beta, c.delta, c.chunk_size)?;
        let q_mag = fullbatch_quadratic(&fix.mlp, theta, &second, kind, c.beta, c.delta, c.chunk_size)?;
        let run = debiased_cg(&q_dir, &q_mag, cfg.cg.iterations, &cg_cfg, DebiasMode::Interleaved)
            .context(|| "debiased full-batch CG".into())?;
        let matvecs = run.total_matvecs();
        let trace = run.debiased;
        fullbatch.push(Trajectory {
            method: "fullbatch_debiased",
            seed: None,
            metrics: evaluate_trajectory(fix, &q_full, c.beta, &trace)?,
            matvecs,
            trace,
        });
    }
    Ok(CgCompare {
        single,
        debiased,
        fullbatch,
    })
}

fn run_cg_compare(cfg: &ExperimentConfig, fix: &Fixture, sink: &mut Sink) -> Result<serde_json::Value> {
    let res = cg_compare(fix, cfg)?;
    let mut t = Table::new(&["method", "seed", "iteration", "metric", "value"]);
    let all: Vec<&Trajectory> = res.single.iter().chain(&res.debiased).chain(&res.fullbatch).collect();
    let mut terminations = Vec::new();
    for tr in &all {
        let seed = tr.seed.map_or("-".into(), |s| s.to_string());
        for (p, m) in tr.metrics.iter().enumerate() {
            for (name, v) in [
                ("q_full", m.q_full),
                ("train_loss", m.train_loss),
                ("test_loss", m.test_loss),
                ("train_accuracy", m.train_accuracy),
                ("test_accuracy", m.test_accuracy),
            ] {
                t.push(vec![
                    tr.method.into(),
                    seed.clone(),
                    p.to_string(),
                    name.into(),
                    fmt_float(v),
                ]);
            }
        }
        terminations.push(json!({
            "method": tr.method,
            "seed": tr.seed,
            "iterations": tr.trace.iterations(),
            "termination": tr.trace.termination.name(),
            "matvecs": tr.matvecs,
        }));
    }
    sink.csv("cg_compare.csv", &t)?;
    if cfg.svg {
        for (metric, pick) in [
            ("q_full", (|m: &IterateMetrics| m.q_full) as fn(&IterateMetrics) -> f64),
            ("test_loss", |m: &IterateMetrics| m.test_loss),
            ("test_accuracy", |m: &IterateMetrics| m.test_accuracy),
        ] {
            let series: Vec<Series> = all
                .iter()
                .map(|tr| Series {
                    label: format!("{} {}", tr.method, tr.seed.map_or(String::new(), |s| s.to_string())),
                    color: match tr.method {
                        "single" => PALETTE[3],
                        "debiased" => PALETTE[2],
                        "fullbatch" => PALETTE[0],
                        _ => PALETTE[4],
                    },
                    points: tr
                        .metrics
                        .iter()
                        .enumerate()
                        .map(|(p, m)| (p as f64, pick(m)))
                        .collect(),
                    line: true,
                })
                .collect();
            sink.svg(
                &format!("cg_compare_{metric}.svg"),
                &xy_plot(metric, "CG iteration", metric, &series, false),
            )?;
        }
    }
    let q0 = res.single.first().map(|t| t.metrics[0].q_full);
    Ok(json!({ "q_full_start": q0, "trajectories": terminations }))
}

// -------------------------------------------------------- laplace-sweep

#[derive(Clone, Debug, PartialEq)]
pub struct LaplaceRow {
    pub method: &'static str,
    pub beta: f64,
    pub metric: &'static str,
    pub value: f64,
    pub seed: u64,
}

fn prob_metrics(probs: Matrix, labels: &[usize], prefix: &'static str) -> Result<Vec<(&'static str, f64)>> {
    let t = ProbTable::new(probs, labels.to_vec())?;
    let names: [&'static str; 3] = match prefix {
        "ood" => ["ood_accuracy", "ood_nll", "ood_ece"],
        _ => ["accuracy", "nll", "ece"],
    };
    Ok(vec![
        (names[0], accuracy(&t)?),
        (names[1], nll(&t)?),
        (names[2], ece(&t, DEFAULT_ECE_BINS)?),
    ])
}

fn entropies(probs: &Matrix) -> Vec<f64> {
    (0..probs.rows()).map(|r| predictive_entropy(probs.row(r))).collect()
}

/// Metrics of one predictive on the test set and, if present, the OOD set
/// (with the entropy AUROC separating the two).
fn evaluate_predictive(
    fix: &Fixture,
    probs_of: &dyn Fn(&Matrix) -> Result<Matrix>,
) -> Result<Vec<(&'static str, f64)>> {
    let test_probs = probs_of(fix.data.test.inputs())?;
    let test_entropy = entropies(&test_probs);
    let mut out = prob_metrics(test_probs, fix.data.test.labels(), "test")?;
    if let Some(ood) = &fix.data.ood {
        let ood_probs = probs_of(ood.inputs())?;
        let ood_entropy = entropies(&ood_probs);
        out.extend(prob_metrics(ood_probs, ood.labels(), "ood")?);
        let scores: Vec<f64> = test_entropy.iter().chain(&ood_entropy).copied().collect();
        let positive: Vec<bool> = std::iter::repeat_n(false, test_entropy.len())
            .chain(std::iter::repeat_n(true, ood_entropy.len()))
            .collect();
        out.push(("auroc", auroc(&scores, &positive)?));
    }
    Ok(out)
}

/// K-FAC blocks of one batch with seeded label sampling.
fn batch_kfac(fix: &Fixture, cfg: &ExperimentConfig, batch: &Batch, seed: u64, stream: u64) -> Result<Vec<KfacBlock>> {
    Ok(fix.mlp.kfac_factors(
        fix.theta(),
        batch,
        cfg.curvature.fisher,
        &mut Rng::with_stream(seed, stream),
    )?)
}

/// Vanilla MAP, single-batch, debiased (two half-size batches) and
/// full-batch K-FAC Laplace approximations over the prior-precision grid.
pub fn laplace_sweep(fix: &Fixture, cfg: &ExperimentConfig) -> Result<Vec<LaplaceRow>> {
    let theta = fix.theta();
    let n_train = fix.data.train.len();
    let full_blocks = accumulate_kfac(
        &fix.mlp,
        theta,
        &fix.data.train,
        cfg.curvature.fisher,
        &mut Rng::with_stream(cfg.data.seed, STREAM_LA_FULL),
        cfg.curvature.chunk_size,
    )?;
    let map_metrics = evaluate_predictive(fix, &|x| Ok(fix.mlp.predict_proba(theta, x)?))?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<LaplaceRow>> {
            let ctx = || format!("laplace-sweep seed {seed}");
            let single_batch = &fix
                .data
                .train
                .partition(cfg.laplace.batch_size, &mut Rng::with_stream(seed, STREAM_LA_SINGLE))
                .context(ctx)?[0];
            let halves = fix
                .data
                .train
                .partition(
                    cfg.laplace.batch_size / 2,
                    &mut Rng::with_stream(seed, STREAM_LA_DEBIASED),
                )
                .context(ctx)?;
            let single = batch_kfac(fix, cfg, single_batch, seed, STREAM_KFAC)?;
            let dir = batch_kfac(fix, cfg, &halves[0], seed, STREAM_KFAC + 1)?;
            let mag = batch_kfac(fix, cfg, &halves[1], seed, STREAM_KFAC + 2)?;
            let debiased = debias_kfac(&dir, &mag).context(ctx)?;
            let pred = PredictiveConfig::new(cfg.laplace.samples, seed ^ (STREAM_PREDICTIVE << 32)).context(ctx)?;
            let mut rows = Vec::new();
            for &beta in &cfg.laplace.betas {
                for (metric, value) in &map_metrics {
                    rows.push(LaplaceRow {
                        method: "map",
                        beta,
                        metric,
                        value: *value,
                        seed,
                    });
                }
                for (method, blocks) in [
                    ("single", &single),
                    ("debiased", &debiased),
                    ("fullbatch", &full_blocks),
                ] {
                    let post = build_posterior(blocks.clone(), theta, n_train, beta)
                        .context(|| format!("{method} posterior at β = {beta}, seed {seed}"))?;
                    let metrics = evaluate_predictive(fix, &|x| Ok(predictive(&post, &fix.mlp, x, &pred)?))?;
                    for (metric, value) in metrics {
                        rows.push(LaplaceRow {
                            method,
                            beta,
                            metric,
                            value,
                            seed,
                        });
                    }
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

pub fn laplace_table(rows: &[LaplaceRow]) -> Table {
    let mut t = Table::new(&["method", "beta", "metric", "value", "seed"]);
    for r in rows {
        t.push(vec![
            r.method.into(),
            fmt_float(r.beta),
            r.metric.into(),
            fmt_float(r.value),
            r.seed.to_string(),
        ]);
    }
    t
}

fn run_laplace_sweep(cfg: &ExperimentConfig, fix: &Fixture, sink: &mut Sink) -> Result<serde_json::Value> {
    let rows = laplace_sweep(fix, cfg)?;
    sink.csv("laplace_sweep.csv", &laplace_table(&rows))?;
    if cfg.svg {
        for metric in ["accuracy", "nll", "ece"] {
            let series: Vec<Series> = ["map", "single", "debiased", "fullbatch"]
                .iter()
                .enumerate()
                .map(|(i, method)| {
                    let points = cfg
                        .laplace
                        .betas
                        .iter()
                        .map(|&b| {
                            let vals: Vec<f64> = rows
                                .iter()
                                .filter(|r| r.method == *method && r.metric == metric && r.beta == b)
                                .map(|r| r.value)
                                .collect();
                            (b.log10(), vals.iter().sum::<f64>() / vals.len() as f64)
                        })
                        .collect();
                    Series {
                        label: method.to_string(),
                        color: PALETTE[i],
                        points,
                        line: true,
                    }
                })
                .collect();
            sink.svg(
                &format!("laplace_{metric}.svg"),
                &xy_plot(
                    &format!("test {metric} (seed mean)"),
                    "log10 prior precision",
                    metric,
                    &series,
                    false,
                ),
            )?;
        }
    }
    Ok(json!({ "rows": rows.len(), "betas": cfg.laplace.betas, "samples": cfg.laplace.samples }))
}

// ------------------------------------------------------ training / size

/// Bias summaries keyed by epoch or parameter count.
pub type TrendSeries = Vec<(usize, Vec<BiasSummary>)>;

/// Same-batch and cross-batch eigen bias summaries at every checkpoint.
pub fn bias_over_training(fix: &Fixture, cfg: &ExperimentConfig) -> Result<(Table, TrendSeries)> {
    let b = cfg.scan.batch_sizes[0];
    let seed = cfg.seeds[0];
    let mut table = Table::new(&SUMMARY_HEADER);
    let mut series = Vec::new();
    for c in &fix.checkpoints {
        let run = scan_run(fix, &c.params, cfg, b, seed, false)?;
        series.push((c.epoch, summary_rows(&mut table, &run, fix.mlp.n_params(), c.epoch)?));
    }
    Ok((table, series))
}

/// Bias summaries for networks of each hidden width (depth from the config),
/// each trained with the same recipe.
pub fn size_sweep(cfg: &ExperimentConfig) -> Result<(Table, TrendSeries)> {
    let b = cfg.scan.batch_sizes[0];
    let mut table = Table::new(&SUMMARY_HEADER);
    let mut series = Vec::new();
    for &w in &cfg.sweep.widths {
        let hidden = vec![w; cfg.model.hidden.len()];
        let fix = Fixture::with_hidden(cfg, &hidden)?;
        let mut all = Vec::new();
        for &seed in &cfg.seeds {
            let run = scan_run(&fix, fix.theta(), cfg, b, seed, false)?;
            all.extend(summary_rows(&mut table, &run, fix.mlp.n_params(), fix.anchor().epoch)?);
        }
        series.push((fix.mlp.n_params(), all));
    }
    Ok((table, series))
}

fn same_batch_curvature_medians(table: &Table, key: &str) -> Vec<(f64, f64)> {
    let col = |n: &str| table.column(n).expect("summary column");
    let (k, dirs, q, p, med) = (col(key), col("directions"), col("quantity"), col("pairing"), col("p50"));
    table
        .rows
        .iter()
        .filter(|r| r[dirs] == "eigen" && r[q] == "curvature" && r[p] == "same_batch")
        .map(|r| (r[k].parse().unwrap_or(f64::NAN), r[med].parse().unwrap_or(f64::NAN)))
        .collect()
}

fn trend_json(points: &[(f64, f64)]) -> serde_json::Value {
    let mut keys: Vec<f64> = points.iter().map(|p| p.0).collect();
    keys.dedup();
    let means: Vec<f64> = keys
        .iter()
        .map(|k| {
            let v: Vec<f64> = points.iter().filter(|p| p.0 == *k).map(|p| p.1).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    let increasing = means.windows(2).all(|w| w[1] >= w[0]);
    json!({ "x": keys, "median_curvature_error": means, "increasing": increasing })
}

fn run_bias_over_training(cfg: &ExperimentConfig, fix: &Fixture, sink: &mut Sink) -> Result<serde_json::Value> {
    let (table, _) = bias_over_training(fix, cfg)?;
    sink.csv("bias_over_training.csv", &table)?;
    let points = same_batch_curvature_medians(&table, "epoch");
    let trend = trend_json(&points);
    log::info!("curvature bias over training (increase expected, not enforced): {trend}");
    if cfg.svg {
        let series = [Series {
            label: "same-batch curvature".into(),
            color: PALETTE[1],
            points,
            line: true,
        }];
        sink.svg(
            "bias_over_training.svg",
            &xy_plot("median relative curvature error", "epoch", "error", &series, true),
        )?;
    }
    Ok(json!({ "trend": trend }))
}

fn run_size_sweep(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<serde_json::Value> {
    let (table, _) = size_sweep(cfg)?;
    sink.csv("size_sweep.csv", &table)?;
    let points = same_batch_curvature_medians(&table, "n_params");
    let trend = trend_json(&points);
    log::info!("curvature bias over model size (increase expected, not enforced): {trend}");
    if cfg.svg {
        let series = [Series {
            label: "same-batch curvature".into(),
            color: PALETTE[1],
            points,
            line: false,
        }];
        sink.svg(
            "size_sweep.svg",
            &xy_plot("median relative curvature error", "parameters", "error", &series, true),
        )?;
    }
    Ok(json!({ "widths": cfg.sweep.widths, "trend": trend }))
}

// ---------------------------------------------------------------- runner

/// What a run wrote.
#[derive(Debug)]
pub struct RunSummary {
    pub digest: String,
    pub files: Vec<std::path::PathBuf>,
    pub details: serde_json::Value,
}

fn write_checkpoints(sink: &mut Sink, fix: &Fixture) -> Result<Vec<serde_json::Value>> {
    let mut out = Vec::new();
    for c in &fix.checkpoints {
        sink.checkpoint(&format!("checkpoints/epoch_{:04}.ckpt", c.epoch), c)?;
        out.push(json!({
            "epoch": c.epoch,
            "train_accuracy": map_accuracy(&fix.mlp, &c.params, &fix.data.train)?,
            "test_accuracy": map_accuracy(&fix.mlp, &c.params, &fix.data.test)?,
        }));
    }
    Ok(out)
}

fn finish(sink: &mut Sink, cfg: &ExperimentConfig, details: serde_json::Value) -> Result<RunSummary> {
    let files: Vec<String> = sink.written().iter().map(|p| p.display().to_string()).collect();
    sink.json(
        "summary.json",
        json!({
            "experiment": cfg.kind.name(),
            "seeds": cfg.seeds,
            "files": files,
            "details": details,
        }),
    )?;
    Ok(RunSummary {
        digest: sink.digest().to_string(),
        files: sink.written().to_vec(),
        details,
    })
}

/// Runs the configured protocol and writes its tables, plots, checkpoints
/// and `summary.json` under `out_dir`, preceded by the canonical config.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let mut sink = Sink::new(out_dir, &cfg.digest())?;
    sink.text("config.txt", &cfg.to_text())?;
    let details = if cfg.kind == ExperimentKind::SizeSweep {
        run_size_sweep(cfg, &mut sink)?
    } else {
        let fix = Fixture::prepare(cfg)?;
        let training = write_checkpoints(&mut sink, &fix)?;
        let result = match cfg.kind {
            ExperimentKind::BiasScan => run_bias_scan(cfg, &fix, &mut sink)?,
            ExperimentKind::Overlap => run_overlap(cfg, &fix, &mut sink)?,
            ExperimentKind::CgCompare => run_cg_compare(cfg, &fix, &mut sink)?,
            ExperimentKind::LaplaceSweep => run_laplace_sweep(cfg, &fix, &mut sink)?,
            ExperimentKind::BiasOverTraining => run_bias_over_training(cfg, &fix, &mut sink)?,
            ExperimentKind::SizeSweep => unreachable!("handled above"),
        };
        json!({ "anchor_epoch": fix.anchor().epoch, "training": training, "result": result })
    };
    finish(&mut sink, cfg, details)
}

/// Trains and writes the checkpoints only.
pub fn run_training(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let mut sink = Sink::new(out_dir, &cfg.digest())?;
    sink.text("config.txt", &cfg.to_text())?;
    let fix = Fixture::prepare(cfg)?;
    let training = write_checkpoints(&mut sink, &fix)?;
    finish(&mut sink, cfg, json!({ "training": training }))
}

/// Writes the generated datasets in the dataset CSV format under `data/`.
pub fn run_gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let mut sink = Sink::new(out_dir, &cfg.digest())?;
    sink.text("config.txt", &cfg.to_text())?;
    let data = generate_dataset(&cfg.data)?;
    let mut sizes = vec![("train", data.train.len()), ("test", data.test.len())];
    crate::data::write_csv(&sink.path("data/train.csv")?, &data.train)?;
    crate::data::write_csv(&sink.path("data/test.csv")?, &data.test)?;
    if let Some(ood) = &data.ood {
        crate::data::write_csv(&sink.path("data/ood.csv")?, ood)?;
        sizes.push(("ood", ood.len()));
    }
    let sizes: serde_json::Map<String, serde_json::Value> =
        sizes.into_iter().map(|(k, v)| (k.to_string(), v.into())).collect();
    finish(&mut sink, cfg, json!({ "datasets": sizes }))
}

/// Bitwise comparison helper used by determinism checks.
pub fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
