#![allow(dead_code)]

use mbq_harness::config::{ExperimentConfig, ExperimentKind};

/// A few hundred samples and a narrow net, for tests that exercise the
/// pipeline rather than the phenomena.
pub const SMALL: &str = "
[experiment]
seeds = 0, 1
svg = true

[data]
n = 320
d = 4
c = 3

[model]
hidden = 12

[train]
epochs = 15
batch_size = 32

[scan]
batch_sizes = 32
sources = 3
k = 4
cg_directions = 4

[cg]
iterations = 8
batch_size = 32

[laplace]
batch_size = 32
samples = 6

[sweep]
widths = 4, 6
";

pub fn small(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig::parse_with_kind(SMALL, Some(kind)).unwrap()
}

pub fn small_with(kind: ExperimentKind, extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse_with_kind(&format!("{SMALL}\n{extra}"), Some(kind)).unwrap()
}
