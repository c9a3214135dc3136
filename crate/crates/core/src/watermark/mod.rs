//! Ownership signatures: key generation, extraction from parameters,
//! embedding regularizers and white-box / black-box verification.

mod keygen;
mod regularizer;
mod verify;

pub use keygen::{default_kernel_layer, keygen, selection_for, KeygenSpec, Placement};
pub use regularizer::{accumulate_regularizer, bce_reg, hinge_reg, regularizer};
pub use verify::{
    default_eps_h, verify_aggregated, verify_black, verify_white, VerificationResult, VerifyMode, DEFAULT_EPS_Y,
};

use crate::data::TriggerSet;
use crate::error::{Error, Result};
use crate::nn::{Architecture, ModelParams, ParamKey, Tensor};

/// Hinge margin used when none is given.
pub const DEFAULT_MARGIN: f64 = 0.1;

/// Target bits in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureBits(Vec<i8>);

impl SignatureBits {
    pub fn from_signs(bits: Vec<i8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::input("signature must have at least one bit"));
        }
        if bits.iter().any(|&b| b != 1 && b != -1) {
            return Err(Error::input("signature bits must be -1 or +1"));
        }
        Ok(Self(bits))
    }

    /// Maps `0 -> -1` and `1 -> +1`.
    pub fn from_binary(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(-1),
                1 => Ok(1),
                _ => Err(Error::input("binary signature bits must be 0 or 1")),
            })
            .collect::<Result<Vec<_>>>()
            .and_then(Self::from_signs)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        self.0.iter().map(|&b| u8::from(b > 0)).collect()
    }

    pub fn signs(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of positions where the two signatures differ.
    pub fn hamming(&self, other: &SignatureBits) -> Result<usize> {
        if self.len() != other.len() {
            return Err(Error::key(format!(
                "signature lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count())
    }
}

/// Where the signature lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmbedMode {
    /// Normalization scales, one coordinate per bit.
    ScaleNorm,
    /// Kernel weights of one layer through a dense Gaussian projection.
    Kernel,
}

impl EmbedMode {
    pub fn name(self) -> &'static str {
        match self {
            EmbedMode::ScaleNorm => "scalenorm",
            EmbedMode::Kernel => "kernel",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "scalenorm" | "scale-norm" | "gamma" => Some(EmbedMode::ScaleNorm),
            "kernel" => Some(EmbedMode::Kernel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegLoss {
    Hinge,
    Bce,
}

impl RegLoss {
    pub fn name(self) -> &'static str {
        match self {
            RegLoss::Hinge => "hinge",
            RegLoss::Bce => "bce",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "hinge" => Some(RegLoss::Hinge),
            "bce" => Some(RegLoss::Bce),
            _ => None,
        }
    }
}

/// Linear map from the selected parameters to signature space.
#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    /// `b_j = w[coords[j]]`: an identity-column matrix stored sparsely.
    Coordinates(Vec<usize>),
    /// Row-major `M x N` matrix.
    Dense(Tensor),
}

impl Extractor {
    pub fn bits(&self) -> usize {
        match self {
            Extractor::Coordinates(c) => c.len(),
            Extractor::Dense(e) => e.shape()[1],
        }
    }

    /// Dense `M x N` form.
    pub fn to_dense(&self, m: usize) -> Tensor {
        match self {
            Extractor::Dense(e) => e.clone(),
            Extractor::Coordinates(c) => {
                let n = c.len();
                let mut e = Tensor::zeros(&[m, n]);
                for (j, &i) in c.iter().enumerate() {
                    e.data_mut()[i * n + j] = 1.0;
                }
                e
            }
        }
    }
}

/// Selector `S` plus extraction matrix `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionKey {
    pub selector: Vec<ParamKey>,
    pub extractor: Extractor,
}

impl ExtractionKey {
    pub fn new(selector: Vec<ParamKey>, extractor: Extractor) -> Result<Self> {
        if selector.is_empty() {
            return Err(Error::input("selector names no parameters"));
        }
        if extractor.bits() == 0 {
            return Err(Error::input("extractor has no columns"));
        }
        match &extractor {
            Extractor::Dense(e) if e.shape().len() != 2 => {
                return Err(Error::input("dense extractor must be a matrix"))
            }
            Extractor::Coordinates(c) => {
                let mut sorted = c.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != c.len() {
                    return Err(Error::input("coordinate extractor repeats an index"));
                }
            }
            _ => {}
        }
        Ok(Self { selector, extractor })
    }

    pub fn bits(&self) -> usize {
        self.extractor.bits()
    }

    /// Concatenated selected parameters in selector order.
    pub fn gather(&self, params: &ModelParams) -> Result<Vec<f64>> {
        let mut w = Vec::new();
        for key in &self.selector {
            let t = params
                .get(key)
                .ok_or_else(|| Error::key(format!("selected parameter {key} not in model")))?;
            w.extend_from_slice(t.data());
        }
        self.check_rows(w.len())?;
        Ok(w)
    }

    fn check_rows(&self, m: usize) -> Result<()> {
        let ok = match &self.extractor {
            Extractor::Coordinates(c) => c.iter().all(|&i| i < m),
            Extractor::Dense(e) => e.shape()[0] == m,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::key(format!(
                "extractor does not fit the {m} selected parameters"
            )))
        }
    }

    /// Checks the selector against an architecture without parameters.
    pub fn check_arch(&self, arch: &Architecture) -> Result<usize> {
        let mut m = 0;
        for key in &self.selector {
            m += arch
                .param_len(key)
                .ok_or_else(|| Error::key(format!("selected parameter {key} not in architecture")))?;
        }
        self.check_rows(m)?;
        Ok(m)
    }

    /// Scatters `dL/db` back onto the selected parameters, adding
    /// `weight * E dL/db` into `grads`.
    pub(crate) fn scatter(&self, dl_db: &[f64], weight: f64, grads: &mut ModelParams) -> Result<()> {
        let m: usize = self
            .selector
            .iter()
            .map(|k| {
                grads
                    .get(k)
                    .map(Tensor::len)
                    .ok_or_else(|| Error::key(format!("gradient slot {k} missing")))
            })
            .sum::<Result<usize>>()?;
        self.check_rows(m)?;
        let mut dw = vec![0.0; m];
        match &self.extractor {
            Extractor::Coordinates(c) => {
                for (j, &i) in c.iter().enumerate() {
                    dw[i] += dl_db[j];
                }
            }
            Extractor::Dense(e) => {
                let n = e.shape()[1];
                for (i, row) in e.data().chunks(n).enumerate() {
                    dw[i] = row.iter().zip(dl_db).map(|(a, b)| a * b).sum();
                }
            }
        }
        let mut offset = 0;
        for key in &self.selector {
            let t = grads.get_mut(key).expect("checked above");
            let len = t.len();
            for (g, d) in t.data_mut().iter_mut().zip(&dw[offset..offset + len]) {
                *g += weight * d;
            }
            offset += len;
        }
        Ok(())
    }
}

/// Feature-based part of a client's key.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureKey {
    pub bits: SignatureBits,
    pub extraction: ExtractionKey,
    pub mode: EmbedMode,
    pub loss: RegLoss,
    /// Hinge margin `mu`; unused by the BCE loss.
    pub margin: f64,
}

impl FeatureKey {
    pub fn new(
        bits: SignatureBits,
        extraction: ExtractionKey,
        mode: EmbedMode,
        loss: RegLoss,
        margin: f64,
    ) -> Result<Self> {
        if bits.len() != extraction.bits() {
            return Err(Error::input(format!(
                "{} signature bits but extractor has {} columns",
                bits.len(),
                extraction.bits()
            )));
        }
        if !(margin > 0.0) || !margin.is_finite() {
            return Err(Error::input(format!("hinge margin must be positive, got {margin}")));
        }
        Ok(Self {
            bits,
            extraction,
            mode,
            loss,
            margin,
        })
    }

    pub fn n_bits(&self) -> usize {
        self.bits.len()
    }
}

/// One client's secret: a feature signature, a trigger set, or both.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkKey {
    pub client_id: usize,
    pub seed: u64,
    pub feature: Option<FeatureKey>,
    pub triggers: Option<TriggerSet>,
}

/// `flatten(selected)^T E`.
pub fn extract(params: &ModelParams, key: &ExtractionKey) -> Result<Vec<f64>> {
    let w = key.gather(params)?;
    Ok(match &key.extractor {
        Extractor::Coordinates(c) => c.iter().map(|&i| w[i]).collect(),
        Extractor::Dense(e) => {
            let n = e.shape()[1];
            let mut b = vec![0.0; n];
            for (wi, row) in w.iter().zip(e.data().chunks(n)) {
                for (bj, eij) in b.iter_mut().zip(row) {
                    *bj += wi * eij;
                }
            }
            b
        }
    })
}

/// Elementwise sign with `sign(0) = +1`.
pub fn read_bits(b: &[f64]) -> Result<SignatureBits> {
    SignatureBits::from_signs(b.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect())
}
