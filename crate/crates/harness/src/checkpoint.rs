//! Checkpoint files: one UTF-8 JSON metadata line, a newline, then the
//! parameters as raw little-endian `f64`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use mbq_core::linalg::Rng;
use mbq_core::model::{Mlp, MlpArchitecture, ParamBlock, ParamVector, RegularizerMask};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const FORMAT: &str = "mbq-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a training RNG stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Decimal; JSON numbers cannot hold every `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: rng.seed(),
            stream: rng.stream(),
            word_pos: rng.word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        let pos = self
            .word_pos
            .parse()
            .map_err(|_| HarnessError::validation(format!("bad rng position '{}'", self.word_pos)))?;
        Ok(Rng::from_state(self.seed, self.stream, pos))
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: ParamVector,
    pub architecture: MlpArchitecture,
    pub regularizer: RegularizerMask,
    pub config_digest: String,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    epoch: usize,
    architecture: MlpArchitecture,
    regularizer: RegularizerMask,
    layout: Vec<ParamBlock>,
    n_params: usize,
    config_digest: String,
    rng: RngState,
}

impl Checkpoint {
    pub fn mlp(&self) -> Mlp {
        Mlp::new(self.architecture.clone(), self.regularizer)
    }

    /// Bitwise equality of everything stored.
    pub fn same_as(&self, other: &Checkpoint) -> bool {
        self.epoch == other.epoch
            && self.architecture == other.architecture
            && self.regularizer == other.regularizer
            && self.config_digest == other.config_digest
            && self.rng == other.rng
            && self.params.len() == other.params.len()
            && self
                .params
                .values()
                .iter()
                .zip(other.params.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            epoch: self.epoch,
            architecture: self.architecture.clone(),
            regularizer: self.regularizer,
            layout: self.params.layout().blocks().to_vec(),
            n_params: self.params.len(),
            config_digest: self.config_digest.clone(),
            rng: self.rng.clone(),
        };
        let mut bytes = serde_json::to_vec(&header).map_err(|e| HarnessError::validation(e.to_string()))?;
        bytes.push(b'\n');
        for v in self.params.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
        let mut reader = BufReader::new(f);
        let mut line = Vec::new();
        reader
            .read_until(b'\n', &mut line)
            .map_err(|e| HarnessError::io(path, e))?;
        let bad = |msg: String| HarnessError::validation(format!("{}: {msg}", path.display()));
        let header: Header = serde_json::from_slice(&line).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format != FORMAT || header.version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format {} version {} (expected {FORMAT} version {FORMAT_VERSION})",
                header.format, header.version
            )));
        }
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw).map_err(|e| HarnessError::io(path, e))?;
        if raw.len() != 8 * header.n_params {
            return Err(bad(format!(
                "expected {} parameters, found {} bytes",
                header.n_params,
                raw.len()
            )));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mlp = Mlp::new(header.architecture.clone(), header.regularizer);
        if mlp.layout().blocks() != header.layout.as_slice() {
            return Err(bad("layout does not match the architecture".into()));
        }
        Ok(Self {
            epoch: header.epoch,
            params: mlp.params(values)?,
            architecture: header.architecture,
            regularizer: header.regularizer,
            config_digest: header.config_digest,
            rng: header.rng,
        })
    }
}

/// The `config_digest` of a checkpoint file, read from its header line.
pub fn read_digest(path: &Path) -> Result<String> {
    let f = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut line = Vec::new();
    BufReader::new(f)
        .read_until(b'\n', &mut line)
        .map_err(|e| HarnessError::io(path, e))?;
    let v: serde_json::Value = serde_json::from_slice(&line)
        .map_err(|e| HarnessError::validation(format!("{}: bad header: {e}", path.display())))?;
    v["config_digest"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| HarnessError::validation(format!("{}: no config_digest", path.display())))
}
