use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, Rng};
use crate::{Error, Result};

/// A subset of the training data with one-hot targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Matrix,
    targets: Matrix,
    indices: Vec<usize>,
}

impl Batch {
    /// Checks that every target row is one-hot and the shapes line up.
    pub fn new(inputs: Matrix, targets: Matrix, indices: Vec<usize>) -> Result<Self> {
        if inputs.rows() != targets.rows() || inputs.rows() != indices.len() {
            return Err(Error::validation(format!(
                "batch has {} inputs, {} targets and {} indices",
                inputs.rows(),
                targets.rows(),
                indices.len()
            )));
        }
        for r in 0..targets.rows() {
            let row = targets.row(r);
            let ones = row.iter().filter(|v| **v == 1.0).count();
            let zeros = row.iter().filter(|v| **v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::validation(format!("target row {r} is not one-hot")));
            }
        }
        Ok(Self {
            inputs,
            targets,
            indices,
        })
    }

    pub fn from_labels(inputs: Matrix, labels: &[usize], n_classes: usize) -> Result<Self> {
        let targets = one_hot(labels, n_classes)?;
        let indices = (0..labels.len()).collect();
        Self::new(inputs, targets, indices)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    /// Row ids of the samples in the parent dataset.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.targets.rows())
            .map(|r| {
                self.targets
                    .row(r)
                    .iter()
                    .position(|v| *v == 1.0)
                    .expect("one-hot invariant")
            })
            .collect()
    }
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), n_classes);
    for (r, &c) in labels.iter().enumerate() {
        if c >= n_classes {
            return Err(Error::validation(format!(
                "label {c} out of range for {n_classes} classes"
            )));
        }
        m[(r, c)] = 1.0;
    }
    Ok(m)
}

/// A labelled dataset: `N×D` inputs and class indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::validation(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&c| c >= n_classes) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The batch made of the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Batch> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::validation(format!(
                    "row {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        let inputs = Matrix::from_vec(indices.len(), d, data)?;
        Batch::new(inputs, one_hot(&labels, self.n_classes)?, indices.to_vec())
    }

    pub fn full_batch(&self) -> Result<Batch> {
        self.subset(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Consecutive chunks of at most `chunk_size` rows in dataset order.
    pub fn chunks(&self, chunk_size: usize) -> Result<Vec<Batch>> {
        if chunk_size == 0 {
            return Err(Error::validation("chunk size must be at least 1"));
        }
        if self.is_empty() {
            return Err(Error::validation("dataset is empty"));
        }
        let ids: Vec<usize> = (0..self.len()).collect();
        ids.chunks(chunk_size).map(|c| self.subset(c)).collect()
    }

    /// Seeded shuffle followed by disjoint sequential slicing into batches of
    /// exactly `batch_size`; a trailing remainder is dropped.
    pub fn partition(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
        if batch_size == 0 || batch_size > self.len() {
            return Err(Error::validation(format!(
                "batch size {batch_size} invalid for dataset of {}",
                self.len()
            )));
        }
        let mut ids: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut ids);
        ids.chunks_exact(batch_size).map(|c| self.subset(c)).collect()
    }
}
