//! Result files. Every file carries the config digest: CSV tables on a
//! leading `# config_digest=<hex>` line, JSON in a `config_digest` field, SVG
//! in a leading comment, checkpoints in their header.

use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::error::{HarnessError, Result};

pub const DIGEST_PREFIX: &str = "# config_digest=";

/// 17 significant digits, enough to round-trip every `f64`.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn parse_float(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| HarnessError::validation(format!("not a number: '{s}'")))
}

/// A CSV table in memory: header plus string cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_csv(&self, digest: &str) -> Result<String> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        let body = w.into_inner().map_err(|e| HarnessError::validation(e.to_string()))?;
        Ok(format!("{DIGEST_PREFIX}{digest}\n{}", String::from_utf8_lossy(&body)))
    }

    /// Parses text written by [`Self::to_csv`]; returns the digest too.
    pub fn from_csv(text: &str) -> Result<(String, Self)> {
        let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
        let digest = first
            .strip_prefix(DIGEST_PREFIX)
            .ok_or_else(|| HarnessError::validation("CSV lacks the config digest line"))?
            .trim()
            .to_string();
        let mut r = csv::ReaderBuilder::new().from_reader(rest.as_bytes());
        let header = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()).map_err(csv_err))
            .collect::<Result<Vec<Vec<String>>>>()?;
        Ok((digest, Self { header, rows }))
    }

    pub fn read(path: &Path) -> Result<(String, Self)> {
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?)
    }
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::validation(format!("CSV: {e}"))
}

/// All writes of one run go through here, in call order.
pub struct Sink {
    root: PathBuf,
    digest: String,
    written: Vec<PathBuf>,
}

impl Sink {
    pub fn new(root: &Path, digest: &str) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| HarnessError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            digest: digest.to_string(),
            written: Vec::new(),
        })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Relative paths of everything written so far.
    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        Ok(p)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel)?;
        std::fs::write(&p, bytes).map_err(|e| HarnessError::io(&p, e))?;
        self.written.push(PathBuf::from(rel));
        Ok(p)
    }

    pub fn text(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        self.write(rel, text.as_bytes())
    }

    pub fn csv(&mut self, rel: &str, table: &Table) -> Result<PathBuf> {
        let text = table.to_csv(&self.digest)?;
        self.write(rel, text.as_bytes())
    }

    /// Adds `config_digest` to a JSON object.
    pub fn json(&mut self, rel: &str, mut value: serde_json::Value) -> Result<PathBuf> {
        if let Some(obj) = value.as_object_mut() {
            obj.insert("config_digest".into(), self.digest.clone().into());
        }
        let text = serde_json::to_string_pretty(&value).map_err(|e| HarnessError::validation(e.to_string()))?;
        self.write(rel, format!("{text}\n").as_bytes())
    }

    pub fn svg(&mut self, rel: &str, body: &str) -> Result<PathBuf> {
        let text = body.replacen("<svg", &format!("<!-- config_digest={} -->\n<svg", self.digest), 1);
        self.write(rel, text.as_bytes())
    }

    pub fn checkpoint(&mut self, rel: &str, c: &checkpoint::Checkpoint) -> Result<PathBuf> {
        let p = self.path(rel)?;
        c.save(&p)?;
        self.written.push(PathBuf::from(rel));
        Ok(p)
    }
}

/// Digest recorded in one result file, by extension; `None` for files that
/// carry none (e.g. exported datasets).
pub fn file_digest(path: &Path) -> Result<Option<String>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let read = || std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e));
    match ext {
        "csv" => {
            let text = read()?;
            Ok(text
                .lines()
                .next()
                .and_then(|l| l.strip_prefix(DIGEST_PREFIX))
                .map(|d| d.trim().to_string()))
        }
        "json" => {
            let v: serde_json::Value = serde_json::from_str(&read()?)
                .map_err(|e| HarnessError::validation(format!("{}: {e}", path.display())))?;
            Ok(v["config_digest"].as_str().map(str::to_string))
        }
        "svg" => {
            let text = read()?;
            Ok(text
                .lines()
                .next()
                .and_then(|l| l.strip_prefix("<!-- config_digest="))
                .and_then(|l| l.strip_suffix(" -->"))
                .map(str::to_string))
        }
        "ckpt" => checkpoint::read_digest(path).map(Some),
        _ => Ok(None),
    }
}

/// Outcome of [`verify_dir`].
#[derive(Debug)]
pub struct Verification {
    pub digest: Option<String>,
    pub checked: usize,
    /// Files whose digest differs from the reference, or that lack one.
    pub mismatched: Vec<(PathBuf, Option<String>)>,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.mismatched.is_empty() && self.checked > 0
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| HarnessError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| HarnessError::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Checks that every digest-bearing file under `dir` agrees. The reference
/// is the digest of `config.txt` when present, else the first file's.
pub fn verify_dir(dir: &Path) -> Result<Verification> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    let mut reference = None;
    let config = dir.join("config.txt");
    if config.exists() {
        reference = Some(crate::config::ExperimentConfig::load(&config)?.digest());
    }
    let mut checked = 0;
    let mut mismatched = Vec::new();
    for f in files {
        let ext = f.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !matches!(ext, "csv" | "json" | "svg" | "ckpt") || f.starts_with(dir.join("data")) {
            continue;
        }
        let d = file_digest(&f)?;
        checked += 1;
        match (&reference, &d) {
            (None, Some(d)) => reference = Some(d.clone()),
            (Some(r), Some(d)) if r == d => {}
            _ => mismatched.push((f, d)),
        }
    }
    Ok(Verification {
        digest: reference,
        checked,
        mismatched,
    })
}
