//! Datasets, synthetic generators, federated sharding and trigger sets.

mod split;
mod synthetic;
mod triggers;

pub use split::{split, Shard, SplitMode};
pub use synthetic::{make_synthetic, Synthetic};
pub use triggers::{
    client_target, forge_pattern_triggers, forge_pgd_triggers, PgdConfig, PgdOutcome, Provenance, TriggerSet,
};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Labelled samples. `inputs` has the batch dimension first.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::input("dataset must hold at least one sample"));
        }
        if inputs.shape().len() < 2 || inputs.rows() != labels.len() {
            return Err(Error::input(format!(
                "inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape (without the batch dimension).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Rows in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::input(format!(
                "row {bad} out of range for {} samples",
                self.len()
            )));
        }
        Dataset::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
        )
    }

    /// Count of samples per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
