//! Experiment configuration files.
//!
//! Grammar, one item per line:
//!
//! ```text
//! # comment (also allowed after a value)
//! [section]
//! key = value
//! ```
//!
//! Lists are comma separated. Every key has a default, so a file may be as
//! short as `[experiment]\nkind = bias-scan`. Unknown sections or keys are
//! rejected. The digest is the SHA-256 of the canonical rendering
//! ([`ExperimentConfig::to_text`]) of the fully resolved configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mbq_core::model::{Activation, FisherMode, LossKind, RegularizerMask};
use mbq_core::quadratic::CurvatureKind;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    BiasScan,
    Overlap,
    CgCompare,
    LaplaceSweep,
    BiasOverTraining,
    SizeSweep,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::BiasScan,
        ExperimentKind::Overlap,
        ExperimentKind::CgCompare,
        ExperimentKind::LaplaceSweep,
        ExperimentKind::BiasOverTraining,
        ExperimentKind::SizeSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::BiasScan => "bias-scan",
            ExperimentKind::Overlap => "overlap",
            ExperimentKind::CgCompare => "cg-compare",
            ExperimentKind::LaplaceSweep => "laplace-sweep",
            ExperimentKind::BiasOverTraining => "bias-over-training",
            ExperimentKind::SizeSweep => "size-sweep",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| HarnessError::validation(format!("unknown experiment kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    GaussianBlobs,
    TwoArcs,
    Spirals,
    CsvFile,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::GaussianBlobs => "gaussian_blobs",
            Generator::TwoArcs => "two_arcs",
            Generator::Spirals => "spirals",
            Generator::CsvFile => "csv_file",
        }
    }
}

impl FromStr for Generator {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" => Ok(Generator::GaussianBlobs),
            "two_arcs" => Ok(Generator::TwoArcs),
            "spirals" => Ok(Generator::Spirals),
            "csv_file" => Ok(Generator::CsvFile),
            other => Err(HarnessError::validation(format!("unsupported generator '{other}'"))),
        }
    }
}

/// Distribution shift applied to fresh test-distribution draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OodShift {
    /// Length of the translation along a seeded random unit vector.
    pub translation: f64,
    /// Factor applied to the noise standard deviation.
    pub noise_multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSpec {
    pub generator: Generator,
    /// Total samples before the train/test split.
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub noise: f64,
    /// Scale of the class means (`gaussian_blobs`).
    pub separation: f64,
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub ood_shift: Option<OodShift>,
    pub seed: u64,
    /// Input file for `csv_file`.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            generator: Generator::GaussianBlobs,
            n: 2560,
            d: 8,
            c: 4,
            noise: 1.0,
            separation: 1.0,
            train_fraction: 0.8,
            test_fraction: 0.2,
            ood_shift: Some(OodShift {
                translation: 3.0,
                noise_multiplier: 1.5,
            }),
            seed: 1,
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    pub regularize: RegularizerMask,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Relu,
            loss: LossKind::CrossEntropy,
            regularize: RegularizerMask::WeightsOnly,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSpec {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub seed: u64,
    /// Load this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint epoch used as the anchor θ*; the last one if unset.
    pub anchor_epoch: Option<usize>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            epochs: 100,
            batch_size: 64,
            beta: 5e-4,
            seed: 2,
            checkpoint: None,
            anchor_epoch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvatureSpec {
    pub kind: String,
    pub fisher: FisherMode,
    pub beta: f64,
    pub delta: f64,
    /// Samples per chunk when streaming the full dataset.
    pub chunk_size: usize,
}

impl Default for CurvatureSpec {
    fn default() -> Self {
        Self {
            kind: "ggn".into(),
            fisher: FisherMode::McSample,
            beta: 5e-4,
            delta: 0.0,
            chunk_size: 512,
        }
    }
}

impl CurvatureSpec {
    /// `seed` only matters for K-FAC label sampling.
    pub fn kind(&self, seed: u64) -> Result<CurvatureKind> {
        Ok(CurvatureKind::parse(&self.kind, self.fisher, seed)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanSpec {
    pub batch_sizes: Vec<usize>,
    /// Number of source batches whose directions are scanned.
    pub sources: usize,
    /// Eigenvectors per source batch.
    pub k: usize,
    /// CG search directions per source batch; 0 skips the CG scan.
    pub cg_directions: usize,
}

impl Default for ScanSpec {
    fn default() -> Self {
        Self {
            batch_sizes: vec![32],
            sources: 20,
            k: 10,
            cg_directions: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CgSpec {
    pub iterations: usize,
    /// Single-batch size; the debiased run uses two batches of half this size.
    pub batch_size: usize,
    pub tol: f64,
    /// Use the single batch for both debiased roles.
    pub force_same_batch: bool,
    /// Also run full-batch CG and the half/half debiased full-batch variant.
    pub fullbatch: bool,
}

impl Default for CgSpec {
    fn default() -> Self {
        Self {
            iterations: 30,
            batch_size: 64,
            tol: 1e-12,
            force_same_batch: false,
            fullbatch: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LaplaceSpec {
    pub betas: Vec<f64>,
    /// Single-batch size; debiased runs use half of it.
    pub batch_size: usize,
    pub samples: usize,
}

/// 13 log-equidistant values in `[1e-4, 1]` followed by 10.
pub fn default_beta_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..13).map(|i| 10f64.powf(-4.0 + i as f64 / 3.0)).collect();
    grid[0] = 1e-4;
    grid[12] = 1.0;
    grid.push(10.0);
    grid
}

impl Default for LaplaceSpec {
    fn default() -> Self {
        Self {
            betas: default_beta_grid(),
            batch_size: 64,
            samples: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSpec {
    pub widths: Vec<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            widths: vec![8, 32, 128],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Seeds of the repeated batch draws.
    pub seeds: Vec<u64>,
    pub svg: bool,
    pub data: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub curvature: CurvatureSpec,
    pub scan: ScanSpec,
    pub cg: CgSpec,
    pub laplace: LaplaceSpec,
    pub sweep: SweepSpec,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            seeds: vec![0, 1, 2, 3, 4],
            svg: true,
            data: DatasetSpec::default(),
            model: ModelSpec::default(),
            train: TrainSpec::default(),
            curvature: CurvatureSpec::default(),
            scan: ScanSpec::default(),
            cg: CgSpec::default(),
            laplace: LaplaceSpec::default(),
            sweep: SweepSpec::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    /// `kind` may be omitted from the text only if `default_kind` is given.
    pub fn parse_with_kind(text: &str, default_kind: Option<ExperimentKind>) -> Result<Self> {
        let mut raw = RawConfig::parse(text)?;
        let kind = match (raw.take("experiment", "kind"), default_kind) {
            (Some(k), Some(d)) => {
                let k: ExperimentKind = k.value.parse()?;
                if k != d {
                    return Err(HarnessError::validation(format!(
                        "config describes a {} experiment, not {}",
                        k.name(),
                        d.name()
                    )));
                }
                k
            }
            (Some(k), None) => k.value.parse()?,
            (None, Some(d)) => d,
            (None, None) => return Err(HarnessError::validation("missing [experiment] kind")),
        };
        let mut cfg = Self::new(kind);
        cfg.apply(&mut raw)?;
        raw.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_kind(text, None)
    }

    fn apply(&mut self, raw: &mut RawConfig) -> Result<()> {
        raw.set("experiment", "seeds", &mut self.seeds, parse_list)?;
        raw.set("experiment", "svg", &mut self.svg, parse_scalar)?;

        let d = &mut self.data;
        raw.set("data", "generator", &mut d.generator, parse_scalar)?;
        raw.set("data", "n", &mut d.n, parse_scalar)?;
        raw.set("data", "d", &mut d.d, parse_scalar)?;
        raw.set("data", "c", &mut d.c, parse_scalar)?;
        raw.set("data", "noise", &mut d.noise, parse_scalar)?;
        raw.set("data", "separation", &mut d.separation, parse_scalar)?;
        raw.set("data", "train_fraction", &mut d.train_fraction, parse_scalar)?;
        raw.set("data", "test_fraction", &mut d.test_fraction, parse_scalar)?;
        raw.set("data", "ood_shift", &mut d.ood_shift, parse_ood)?;
        raw.set("data", "seed", &mut d.seed, parse_scalar)?;
        raw.set("data", "path", &mut d.path, |s| Ok(optional(s).map(PathBuf::from)))?;

        let m = &mut self.model;
        raw.set("model", "hidden", &mut m.hidden, parse_list)?;
        raw.set("model", "activation", &mut m.activation, parse_core)?;
        raw.set("model", "loss", &mut m.loss, parse_core)?;
        raw.set("model", "regularize", &mut m.regularize, parse_reg_mask)?;

        let t = &mut self.train;
        raw.set("train", "lr", &mut t.lr, parse_scalar)?;
        raw.set("train", "momentum", &mut t.momentum, parse_scalar)?;
        raw.set("train", "epochs", &mut t.epochs, parse_scalar)?;
        raw.set("train", "batch_size", &mut t.batch_size, parse_scalar)?;
        raw.set("train", "beta", &mut t.beta, parse_scalar)?;
        raw.set("train", "seed", &mut t.seed, parse_scalar)?;
        raw.set("train", "checkpoint", &mut t.checkpoint, |s| {
            Ok(optional(s).map(PathBuf::from))
        })?;
        raw.set("train", "anchor_epoch", &mut t.anchor_epoch, |s| {
            optional(s).map(parse_scalar).transpose()
        })?;

        let c = &mut self.curvature;
        raw.set("curvature", "kind", &mut c.kind, |s| Ok(s.to_string()))?;
        raw.set("curvature", "fisher", &mut c.fisher, parse_core)?;
        raw.set("curvature", "beta", &mut c.beta, parse_scalar)?;
        raw.set("curvature", "delta", &mut c.delta, parse_scalar)?;
        raw.set("curvature", "chunk_size", &mut c.chunk_size, parse_scalar)?;

        let s = &mut self.scan;
        raw.set("scan", "batch_sizes", &mut s.batch_sizes, parse_list)?;
        raw.set("scan", "sources", &mut s.sources, parse_scalar)?;
        raw.set("scan", "k", &mut s.k, parse_scalar)?;
        raw.set("scan", "cg_directions", &mut s.cg_directions, parse_scalar)?;

        let g = &mut self.cg;
        raw.set("cg", "iterations", &mut g.iterations, parse_scalar)?;
        raw.set("cg", "batch_size", &mut g.batch_size, parse_scalar)?;
        raw.set("cg", "tol", &mut g.tol, parse_scalar)?;
        raw.set("cg", "force_same_batch", &mut g.force_same_batch, parse_scalar)?;
        raw.set("cg", "fullbatch", &mut g.fullbatch, parse_scalar)?;

        let l = &mut self.laplace;
        raw.set("laplace", "betas", &mut l.betas, |v| {
            if v == "default" {
                Ok(default_beta_grid())
            } else {
                parse_list(v)
            }
        })?;
        raw.set("laplace", "batch_size", &mut l.batch_size, parse_scalar)?;
        raw.set("laplace", "samples", &mut l.samples, parse_scalar)?;

        raw.set("sweep", "widths", &mut self.sweep.widths, parse_list)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(HarnessError::validation(msg));
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        let d = &self.data;
        if d.n < d.c || d.c < 2 || d.d == 0 {
            return fail(format!(
                "dataset needs n ≥ c ≥ 2 and d ≥ 1 (n = {}, c = {}, d = {})",
                d.n, d.c, d.d
            ));
        }
        if (d.train_fraction + d.test_fraction - 1.0).abs() > 1e-12 || d.train_fraction <= 0.0 || d.test_fraction < 0.0
        {
            return fail("train and test fractions must be non-negative and sum to 1".into());
        }
        if !(d.noise >= 0.0) {
            return fail("noise must be non-negative".into());
        }
        if d.generator == Generator::CsvFile && d.path.is_none() {
            return fail("csv_file needs [data] path".into());
        }
        let t = &self.train;
        if !(t.lr >= 0.0) || !(0.0..1.0).contains(&t.momentum) || t.batch_size == 0 || !(t.beta >= 0.0) {
            return fail("training needs lr ≥ 0, momentum in [0, 1), batch size ≥ 1 and β ≥ 0".into());
        }
        self.curvature.kind(0)?;
        if self.curvature.chunk_size == 0 {
            return fail("chunk_size must be positive".into());
        }
        if self.scan.batch_sizes.is_empty()
            || self.scan.batch_sizes.contains(&0)
            || self.scan.k == 0
            || self.scan.sources == 0
        {
            return fail("scan needs positive batch sizes, sources and k".into());
        }
        if self.cg.batch_size < 2 || self.laplace.batch_size < 2 {
            return fail("single-batch sizes must be at least 2 so the debiased halves are nonempty".into());
        }
        if self.laplace.betas.is_empty() || self.laplace.betas.iter().any(|b| !(*b > 0.0)) {
            return fail("prior precisions must be positive".into());
        }
        if self.laplace.samples == 0 {
            return fail("predictive needs at least one sample".into());
        }
        if self.sweep.widths.is_empty() || self.sweep.widths.contains(&0) {
            return fail("sweep widths must be positive".into());
        }
        Ok(())
    }

    /// Canonical rendering: every key, fixed order, floats in shortest
    /// round-trip form. Parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = |name: &str, entries: Vec<(&str, String)>| {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        };
        section(
            "experiment",
            vec![
                ("kind", self.kind.name().into()),
                ("seeds", join(&self.seeds)),
                ("svg", self.svg.to_string()),
            ],
        );
        let d = &self.data;
        section(
            "data",
            vec![
                ("generator", d.generator.name().into()),
                ("n", d.n.to_string()),
                ("d", d.d.to_string()),
                ("c", d.c.to_string()),
                ("noise", float(d.noise)),
                ("separation", float(d.separation)),
                ("train_fraction", float(d.train_fraction)),
                ("test_fraction", float(d.test_fraction)),
                (
                    "ood_shift",
                    d.ood_shift.map_or("none".into(), |o| {
                        format!("{}, {}", float(o.translation), float(o.noise_multiplier))
                    }),
                ),
                ("seed", d.seed.to_string()),
                (
                    "path",
                    d.path.as_ref().map_or("none".into(), |p| p.display().to_string()),
                ),
            ],
        );
        let m = &self.model;
        section(
            "model",
            vec![
                ("hidden", join(&m.hidden)),
                ("activation", m.activation.name().into()),
                ("loss", m.loss.name().into()),
                ("regularize", reg_mask_name(m.regularize).into()),
            ],
        );
        let t = &self.train;
        section(
            "train",
            vec![
                ("lr", float(t.lr)),
                ("momentum", float(t.momentum)),
                ("epochs", t.epochs.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("beta", float(t.beta)),
                ("seed", t.seed.to_string()),
                (
                    "checkpoint",
                    t.checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()),
                ),
                ("anchor_epoch", t.anchor_epoch.map_or("none".into(), |e| e.to_string())),
            ],
        );
        let c = &self.curvature;
        section(
            "curvature",
            vec![
                ("kind", c.kind.clone()),
                ("fisher", fisher_name(c.fisher).into()),
                ("beta", float(c.beta)),
                ("delta", float(c.delta)),
                ("chunk_size", c.chunk_size.to_string()),
            ],
        );
        let s = &self.scan;
        section(
            "scan",
            vec![
                ("batch_sizes", join(&s.batch_sizes)),
                ("sources", s.sources.to_string()),
                ("k", s.k.to_string()),
                ("cg_directions", s.cg_directions.to_string()),
            ],
        );
        let g = &self.cg;
        section(
            "cg",
            vec![
                ("iterations", g.iterations.to_string()),
                ("batch_size", g.batch_size.to_string()),
                ("tol", float(g.tol)),
                ("force_same_batch", g.force_same_batch.to_string()),
                ("fullbatch", g.fullbatch.to_string()),
            ],
        );
        let l = &self.laplace;
        section(
            "laplace",
            vec![
                (
                    "betas",
                    l.betas.iter().map(|b| float(*b)).collect::<Vec<_>>().join(", "),
                ),
                ("batch_size", l.batch_size.to_string()),
                ("samples", l.samples.to_string()),
            ],
        );
        section("sweep", vec![("widths", join(&self.sweep.widths))]);
        out
    }

    /// Hex SHA-256 of [`Self::to_text`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

pub fn reg_mask_name(m: RegularizerMask) -> &'static str {
    match m {
        RegularizerMask::WeightsOnly => "weights",
        RegularizerMask::All => "all",
    }
}

fn fisher_name(f: FisherMode) -> &'static str {
    match f {
        FisherMode::McSample => "mc_sample",
        FisherMode::Empirical => "empirical",
    }
}

fn optional(s: &str) -> Option<&str> {
    (s != "none").then_some(s)
}

fn parse_scalar<T: FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| HarnessError::validation(format!("cannot parse '{s}'")))
}

fn parse_core<T: FromStr<Err = mbq_core::Error>>(s: &str) -> Result<T> {
    Ok(s.parse()?)
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| parse_scalar(p.trim())).collect()
}

fn parse_reg_mask(s: &str) -> Result<RegularizerMask> {
    match s {
        "weights" => Ok(RegularizerMask::WeightsOnly),
        "all" => Ok(RegularizerMask::All),
        other => Err(HarnessError::validation(format!("unknown regularizer mask '{other}'"))),
    }
}

fn parse_ood(s: &str) -> Result<Option<OodShift>> {
    let Some(s) = optional(s) else { return Ok(None) };
    match parse_list::<f64>(s)?.as_slice() {
        [t, m] if *m >= 0.0 => Ok(Some(OodShift {
            translation: *t,
            noise_multiplier: *m,
        })),
        _ => Err(HarnessError::validation(
            "ood_shift is 'translation, noise_multiplier' or 'none'",
        )),
    }
}

struct Entry {
    value: String,
    line: usize,
}

/// Sections of `key = value` pairs; keys are consumed as they are applied.
struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

const SECTIONS: [&str; 9] = [
    "experiment",
    "data",
    "model",
    "train",
    "curvature",
    "scan",
    "cg",
    "laplace",
    "sweep",
];

impl RawConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(HarnessError::validation(format!(
                        "line {line_no}: unknown section [{name}]"
                    )));
                }
                sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::validation(format!(
                    "line {line_no}: expected 'key = value'"
                )));
            };
            let Some(section) = &current else {
                return Err(HarnessError::validation(format!(
                    "line {line_no}: key outside any section"
                )));
            };
            let key = key.trim().to_string();
            let entry = Entry {
                value: value.trim().to_string(),
                line: line_no,
            };
            let keys = sections.get_mut(section).expect("section registered");
            if keys.insert(key.clone(), entry).is_some() {
                return Err(HarnessError::validation(format!(
                    "line {line_no}: duplicate key [{section}] {key}"
                )));
            }
        }
        Ok(Self { sections })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<Entry> {
        self.sections.get_mut(section)?.remove(key)
    }

    fn set<T>(&mut self, section: &str, key: &str, slot: &mut T, parse: impl Fn(&str) -> Result<T>) -> Result<()> {
        if let Some(entry) = self.take(section, key) {
            *slot = parse(&entry.value)
                .map_err(|e| HarnessError::validation(format!("line {}: [{section}] {key}: {e}", entry.line)))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        for (section, keys) in self.sections {
            if let Some((key, entry)) = keys.into_iter().next() {
                return Err(HarnessError::validation(format!(
                    "line {}: unknown key [{section}] {key}",
                    entry.line
                )));
            }
        }
        Ok(())
    }
}
