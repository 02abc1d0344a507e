//! Synthetic classification datasets and the CSV dataset format.
//!
//! CSV layout: header `x0,...,x{D-1},label`, one sample per row, labels as
//! 0-based integers.

use std::path::Path;

use mbq_core::linalg::{standard_normal, Matrix, Rng};
use mbq_core::model::Dataset;

use crate::config::{DatasetSpec, Generator};
use crate::error::{HarnessError, Result};

/// RNG streams of one dataset seed.
const STREAM_SAMPLES: u64 = 0;
const STREAM_OOD: u64 = 1;
const STREAM_SPLIT: u64 = 2;

#[derive(Clone, Debug)]
pub struct GeneratedData {
    pub train: Dataset,
    pub test: Dataset,
    /// Shifted draws from the test distribution, same size as `test`.
    pub ood: Option<Dataset>,
}

/// Labels `i mod c` in seeded random order, so every class count is within
/// one of `n/c`.
fn balanced_labels(n: usize, c: usize, rng: &mut Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    rng.shuffle(&mut labels);
    labels
}

/// Noise-free class prototypes and per-sample positions for one generator.
struct Sampler {
    generator: Generator,
    d: usize,
    c: usize,
    means: Vec<Vec<f64>>,
}

impl Sampler {
    fn new(spec: &DatasetSpec, rng: &mut Rng) -> Result<Self> {
        let (d, c) = (spec.d, spec.c);
        match spec.generator {
            Generator::TwoArcs if c != 2 => {
                return Err(HarnessError::validation("two_arcs produces exactly 2 classes"));
            }
            Generator::TwoArcs | Generator::Spirals if d < 2 => {
                return Err(HarnessError::validation("arcs and spirals need d ≥ 2"));
            }
            _ => {}
        }
        let means = match spec.generator {
            Generator::GaussianBlobs => (0..c)
                .map(|_| {
                    standard_normal(rng, d)
                        .into_iter()
                        .map(|v| spec.separation * v)
                        .collect()
                })
                .collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            generator: spec.generator,
            d,
            c,
            means,
        })
    }

    fn clean(&self, label: usize, rng: &mut Rng) -> Vec<f64> {
        let mut x = vec![0.0; self.d];
        match self.generator {
            Generator::GaussianBlobs => x.copy_from_slice(&self.means[label]),
            Generator::TwoArcs => {
                let t = std::f64::consts::PI * rng.uniform();
                if label == 0 {
                    x[0] = t.cos();
                    x[1] = t.sin();
                } else {
                    x[0] = 1.0 - t.cos();
                    x[1] = 0.5 - t.sin();
                }
            }
            Generator::Spirals => {
                let t = rng.uniform();
                let r = 0.1 + 0.9 * t;
                let angle = 2.0 * std::f64::consts::PI * label as f64 / self.c as f64 + 3.0 * std::f64::consts::PI * t;
                x[0] = r * angle.cos();
                x[1] = r * angle.sin();
            }
            Generator::CsvFile => unreachable!("csv datasets are loaded, not sampled"),
        }
        x
    }

    fn draw(&self, labels: &[usize], noise: f64, rng: &mut Rng) -> Result<Matrix> {
        let mut data = Vec::with_capacity(labels.len() * self.d);
        for &y in labels {
            let clean = self.clean(y, rng);
            data.extend(clean.iter().map(|v| v + noise * rng.normal()));
        }
        Ok(Matrix::from_vec(labels.len(), self.d, data)?)
    }
}

fn translate(inputs: &mut Matrix, shift: &[f64]) {
    for r in 0..inputs.rows() {
        for (v, s) in inputs.row_mut(r).iter_mut().zip(shift) {
            *v += s;
        }
    }
}

/// A seeded random unit vector scaled to `length`.
fn shift_vector(d: usize, length: f64, rng: &mut Rng) -> Vec<f64> {
    let u = standard_normal(rng, d);
    let n = mbq_core::linalg::norm(&u);
    u.iter().map(|v| length * v / n).collect()
}

fn split_sizes(spec: &DatasetSpec, n: usize) -> Result<(usize, usize)> {
    let n_test = (spec.test_fraction * n as f64).round() as usize;
    let n_train = n - n_test;
    if n_train == 0 {
        return Err(HarnessError::validation("train split is empty"));
    }
    Ok((n_train, n_test))
}

fn dataset(inputs: Matrix, labels: Vec<usize>, c: usize) -> Result<Dataset> {
    Ok(Dataset::new(inputs, labels, c)?)
}

fn rows(m: &Matrix, ids: &[usize]) -> Result<Matrix> {
    let mut data = Vec::with_capacity(ids.len() * m.cols());
    for &i in ids {
        data.extend_from_slice(m.row(i));
    }
    Ok(Matrix::from_vec(ids.len(), m.cols(), data)?)
}

/// Builds the train/test split and the optional OOD set; a pure function of `spec`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<GeneratedData> {
    if spec.n < spec.c {
        return Err(HarnessError::validation(format!(
            "n = {} is smaller than c = {}",
            spec.n, spec.c
        )));
    }
    if spec.generator == Generator::CsvFile {
        return load_split(spec);
    }
    let mut rng = Rng::with_stream(spec.seed, STREAM_SAMPLES);
    let sampler = Sampler::new(spec, &mut rng)?;
    let labels = balanced_labels(spec.n, spec.c, &mut rng);
    let inputs = sampler.draw(&labels, spec.noise, &mut rng)?;
    let (n_train, _) = split_sizes(spec, spec.n)?;
    let train_ids: Vec<usize> = (0..n_train).collect();
    let test_ids: Vec<usize> = (n_train..spec.n).collect();
    let test_labels: Vec<usize> = test_ids.iter().map(|&i| labels[i]).collect();

    let ood = match spec.ood_shift {
        Some(shift) if !test_ids.is_empty() => {
            let mut rng = Rng::with_stream(spec.seed, STREAM_OOD);
            let mut x = sampler.draw(&test_labels, spec.noise * shift.noise_multiplier, &mut rng)?;
            translate(&mut x, &shift_vector(spec.d, shift.translation, &mut rng));
            Some(dataset(x, test_labels.clone(), spec.c)?)
        }
        _ => None,
    };
    Ok(GeneratedData {
        train: dataset(
            rows(&inputs, &train_ids)?,
            train_ids.iter().map(|&i| labels[i]).collect(),
            spec.c,
        )?,
        test: dataset(rows(&inputs, &test_ids)?, test_labels, spec.c)?,
        ood,
    })
}

/// `csv_file`: seeded shuffle, then split. The OOD set translates the test
/// inputs and adds Gaussian noise so that the total noise standard deviation
/// becomes `noise · noise_multiplier`.
fn load_split(spec: &DatasetSpec) -> Result<GeneratedData> {
    let path = spec
        .path
        .as_ref()
        .ok_or_else(|| HarnessError::validation("csv_file needs a path"))?;
    let all = load_csv(path, spec.c)?;
    if all.input_dim() != spec.d {
        return Err(HarnessError::validation(format!(
            "{} has {} input columns, config says d = {}",
            path.display(),
            all.input_dim(),
            spec.d
        )));
    }
    let n = all.len();
    let mut ids: Vec<usize> = (0..n).collect();
    Rng::with_stream(spec.seed, STREAM_SPLIT).shuffle(&mut ids);
    let (n_train, _) = split_sizes(spec, n)?;
    let pick = |ids: &[usize]| -> Result<Dataset> {
        dataset(
            rows(all.inputs(), ids)?,
            ids.iter().map(|&i| all.labels()[i]).collect(),
            spec.c,
        )
    };
    let train = pick(&ids[..n_train])?;
    let test = pick(&ids[n_train..])?;
    let ood = match spec.ood_shift {
        Some(shift) if !test.is_empty() => {
            let mut rng = Rng::with_stream(spec.seed, STREAM_OOD);
            let mut x = test.inputs().clone();
            translate(&mut x, &shift_vector(spec.d, shift.translation, &mut rng));
            let extra = spec.noise * (shift.noise_multiplier.powi(2) - 1.0).max(0.0).sqrt();
            for v in x.as_mut_slice() {
                *v += extra * rng.normal();
            }
            Some(dataset(x, test.labels().to_vec(), spec.c)?)
        }
        _ => None,
    };
    Ok(GeneratedData { train, test, ood })
}

/// Reads the dataset CSV format. `n_classes` bounds the labels.
pub fn load_csv(path: &Path, n_classes: usize) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let d = header.len().saturating_sub(1);
    let expected: Vec<String> = (0..d).map(|i| format!("x{i}")).chain(["label".to_string()]).collect();
    if d == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(HarnessError::validation(format!(
            "{}: header must be x0,...,x{{D-1}},label",
            path.display()
        )));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let bad = |what: &str| HarnessError::validation(format!("{} row {}: bad {what}", path.display(), i + 1));
        for field in record.iter().take(d) {
            values.push(field.trim().parse::<f64>().map_err(|_| bad("value"))?);
        }
        let label: usize = record[d].trim().parse().map_err(|_| bad("label"))?;
        if label >= n_classes {
            return Err(bad("label"));
        }
        labels.push(label);
    }
    let n = labels.len();
    dataset(Matrix::from_vec(n, d, values)?, labels, n_classes)
}

/// Writes `data` in the dataset CSV format with shortest round-trip floats.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let d = data.input_dim();
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).chain(["label".to_string()]).collect();
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (r, label) in data.labels().iter().enumerate() {
        let row: Vec<String> = data
            .inputs()
            .row(r)
            .iter()
            .map(|v| format!("{v:?}"))
            .chain([label.to_string()])
            .collect();
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HarnessError::io(path, io),
        other => HarnessError::validation(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::OodShift;

    fn spec(generator: Generator, c: usize) -> DatasetSpec {
        DatasetSpec {
            generator,
            n: 101,
            c,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn labels_are_balanced() {
        for (g, c) in [
            (Generator::GaussianBlobs, 4),
            (Generator::TwoArcs, 2),
            (Generator::Spirals, 3),
        ] {
            let data = generate_dataset(&spec(g, c)).unwrap();
            let mut counts = vec![0usize; c];
            for &y in data.train.labels().iter().chain(data.test.labels()) {
                counts[y] += 1;
            }
            let lo = 101 / c;
            assert!(counts.iter().all(|&k| k == lo || k == lo + 1), "{counts:?}");
            assert_eq!(data.train.len() + data.test.len(), 101);
            assert_eq!(data.test.len(), 20);
            let ood = data.ood.unwrap();
            assert_eq!(ood.len(), data.test.len());
            assert_eq!(ood.labels(), data.test.labels());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = DatasetSpec::default();
        let a = generate_dataset(&s).unwrap();
        let b = generate_dataset(&s).unwrap();
        assert_eq!(a.train.inputs(), b.train.inputs());
        assert_eq!(a.train.labels(), b.train.labels());
        assert_eq!(a.ood.unwrap().inputs(), b.ood.unwrap().inputs());
        let other = generate_dataset(&DatasetSpec { seed: 9, ..s }).unwrap();
        assert_ne!(other.train.inputs(), a.train.inputs());
    }

    #[test]
    fn ood_set_is_shifted() {
        let s = DatasetSpec {
            ood_shift: Some(OodShift {
                translation: 50.0,
                noise_multiplier: 1.0,
            }),
            ..DatasetSpec::default()
        };
        let data = generate_dataset(&s).unwrap();
        let mean = |m: &Matrix| -> Vec<f64> {
            (0..m.cols())
                .map(|j| m.column(j).iter().sum::<f64>() / m.rows() as f64)
                .collect()
        };
        let shift = mbq_core::linalg::norm(&mbq_core::linalg::sub(
            &mean(data.ood.unwrap().inputs()),
            &mean(data.test.inputs()),
        ));
        assert!((shift - 50.0).abs() < 2.0, "{shift}");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_dataset(&spec(Generator::TwoArcs, 3)).is_err());
        assert!(generate_dataset(&DatasetSpec {
            n: 3,
            ..DatasetSpec::default()
        })
        .is_err());
        assert!(generate_dataset(&DatasetSpec {
            d: 1,
            ..spec(Generator::Spirals, 3)
        })
        .is_err());
        assert!("mnist".parse::<Generator>().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = generate_dataset(&spec(Generator::Spirals, 3)).unwrap();
        write_csv(&path, &data.train).unwrap();
        let back = load_csv(&path, 3).unwrap();
        assert_eq!(back.inputs(), data.train.inputs());
        assert_eq!(back.labels(), data.train.labels());
    }

    #[test]
    fn csv_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        for text in ["a,b,label\n1,2,0\n", "x0,label\n1,7\n", "x0,label\nz,0\n"] {
            std::fs::write(&path, text).unwrap();
            assert!(load_csv(&path, 2).is_err(), "{text}");
        }
    }
}
