//! Named parameter collections and their vector-space operations.

use std::collections::BTreeMap;
use std::fmt;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// What a parameter tensor does inside its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    /// Dense weight matrix or convolution kernel.
    Kernel,
    /// Per-channel multiplicative scale of a normalization layer.
    Scale,
    Bias,
    /// Normalization running mean (buffer, not trained by gradients).
    RunningMean,
    /// Normalization running variance (buffer, not trained by gradients).
    RunningVar,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Kernel,
        Role::Scale,
        Role::Bias,
        Role::RunningMean,
        Role::RunningVar,
    ];

    pub fn is_trainable(self) -> bool {
        matches!(self, Role::Kernel | Role::Scale | Role::Bias)
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Kernel => "kernel",
            Role::Scale => "scale",
            Role::Bias => "bias",
            Role::RunningMean => "running_mean",
            Role::RunningVar => "running_var",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Role::Kernel => 0,
            Role::Scale => 1,
            Role::Bias => 2,
            Role::RunningMean => 3,
            Role::RunningVar => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.code() == code)
    }

    pub fn from_name(name: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.name() == name)
    }
}

/// Address of one parameter tensor: layer index plus role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: usize,
    pub role: Role,
}

impl ParamKey {
    pub fn new(layer: usize, role: Role) -> Self {
        Self { layer, role }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.role.name())
    }
}

/// Map from `(layer, role)` to tensor. Iteration order is the key order,
/// which fixes the flattening layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    entries: BTreeMap<ParamKey, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: ParamKey, value: Tensor) {
        self.entries.insert(key, value);
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        self.entries.get_mut(key)
    }

    pub fn require(&self, key: &ParamKey) -> Result<&Tensor> {
        self.entries
            .get(key)
            .ok_or_else(|| Error::key(format!("no parameter {key}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamKey, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Same keys, same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (*k, Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// True when both collections have identical key sets and shapes.
    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
    }

    pub fn check_layout(&self, other: &ModelParams) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::state("parameter sets have different keys or shapes"))
        }
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &ModelParams) -> Result<()> {
        self.check_layout(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(other.entries.iter()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += factor * y;
            }
        }
        Ok(())
    }

    pub fn add(&self, other: &ModelParams) -> Result<ModelParams> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn scale(&self, factor: f64) -> ModelParams {
        let mut out = self.clone();
        for t in out.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        out
    }

    /// Concatenate every entry in key order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten), using `self` as the layout template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.numel() {
            return Err(Error::input(format!(
                "flat vector has {} values, layout needs {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        let mut entries = BTreeMap::new();
        for (k, t) in &self.entries {
            let n = t.len();
            let slice = flat[offset..offset + n].to_vec();
            entries.insert(*k, Tensor::new(t.shape().to_vec(), slice)?);
            offset += n;
        }
        Ok(ModelParams { entries })
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Largest absolute elementwise difference between two same-layout sets.
    pub fn max_abs_diff(&self, other: &ModelParams) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .entries
            .values()
            .zip(other.entries.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }
}
