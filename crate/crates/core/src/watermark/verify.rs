//! White-box, black-box and aggregated verification.

use super::{extract, read_bits, FeatureKey, WatermarkKey};
use crate::data::TriggerSet;
use crate::error::{Error, Result};
use crate::nn::{ModelParams, Network};

pub const DEFAULT_EPS_Y: f64 = 0.2;

/// `ceil(0.05 N)`.
pub fn default_eps_h(bits: usize) -> usize {
    (bits * 5).div_ceil(100)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyMode {
    White,
    Black,
    Aggregated,
}

impl VerifyMode {
    pub fn name(self) -> &'static str {
        match self {
            VerifyMode::White => "white",
            VerifyMode::Black => "black",
            VerifyMode::Aggregated => "aggregated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationResult {
    pub mode: VerifyMode,
    pub client_id: Option<usize>,
    /// Mismatched bits (white; summed over clients when aggregated).
    pub hamming: Option<usize>,
    /// Signature length the Hamming distance is taken over.
    pub bits: Option<usize>,
    /// Fraction of triggers not classified as their target (black; pooled
    /// over all trigger sets when aggregated).
    pub trigger_error: Option<f64>,
    /// `1 - hamming / bits` for signatures, `1 - trigger_error` for
    /// trigger sets. Aggregated results report the signature rate when any
    /// signature is present.
    pub eta: f64,
    pub verdict: bool,
    /// Aggregated over an empty key set.
    pub degenerate: bool,
    /// Per-key white and black results behind an aggregated verdict.
    pub components: Vec<VerificationResult>,
}

/// Hamming test of the key's bits against `sign(extract(W))`.
pub fn verify_white(params: &ModelParams, key: &FeatureKey, eps_h: usize) -> Result<VerificationResult> {
    let read = read_bits(&extract(params, &key.extraction)?)?;
    let hamming = key.bits.hamming(&read)?;
    let n = key.n_bits();
    Ok(VerificationResult {
        mode: VerifyMode::White,
        client_id: None,
        hamming: Some(hamming),
        bits: Some(n),
        trigger_error: None,
        eta: 1.0 - hamming as f64 / n as f64,
        verdict: hamming <= eps_h,
        degenerate: false,
        components: Vec::new(),
    })
}

fn trigger_misses(net: &Network, triggers: &TriggerSet) -> Result<usize> {
    if triggers.samples().shape()[1..] != *net.arch().input_shape() {
        return Err(Error::key(format!(
            "trigger samples {:?} do not fit model input {:?}",
            &triggers.samples().shape()[1..],
            net.arch().input_shape()
        )));
    }
    let pred = net.classify(triggers.samples())?;
    Ok(pred.iter().zip(triggers.targets()).filter(|(p, t)| p != t).count())
}

/// Prediction-only test: error rate on the trigger set against `eps_y`.
pub fn verify_black(net: &Network, triggers: &TriggerSet, eps_y: f64) -> Result<VerificationResult> {
    let err = trigger_misses(net, triggers)? as f64 / triggers.len() as f64;
    Ok(VerificationResult {
        mode: VerifyMode::Black,
        client_id: None,
        hamming: None,
        bits: None,
        trigger_error: Some(err),
        eta: 1.0 - err,
        verdict: err <= eps_y,
        degenerate: false,
        components: Vec::new(),
    })
}

/// Conjunction of every key's white check (against `eps_h`, or the
/// per-key default when `None`) and black check. The summary counts pool
/// all signatures and all triggers. An empty key set verifies vacuously
/// and is flagged degenerate.
pub fn verify_aggregated(
    net: &Network,
    keys: &[WatermarkKey],
    eps_h: Option<usize>,
    eps_y: f64,
) -> Result<VerificationResult> {
    let mut components = Vec::new();
    let (mut hamming, mut bits) = (0usize, 0usize);
    let (mut misses, mut triggers) = (0usize, 0usize);
    let mut verdict = true;
    for key in keys {
        if let Some(f) = &key.feature {
            let eps = eps_h.unwrap_or_else(|| default_eps_h(f.n_bits()));
            let mut r = verify_white(net.params(), f, eps)?;
            r.client_id = Some(key.client_id);
            hamming += r.hamming.unwrap_or(0);
            bits += f.n_bits();
            verdict &= r.verdict;
            components.push(r);
        }
        if let Some(t) = &key.triggers {
            let mut r = verify_black(net, t, eps_y)?;
            r.client_id = Some(key.client_id);
            misses += trigger_misses(net, t)?;
            triggers += t.len();
            verdict &= r.verdict;
            components.push(r);
        }
    }
    let trigger_error = (triggers > 0).then(|| misses as f64 / triggers as f64);
    let eta = if bits > 0 {
        1.0 - hamming as f64 / bits as f64
    } else {
        1.0 - trigger_error.unwrap_or(0.0)
    };
    Ok(VerificationResult {
        mode: VerifyMode::Aggregated,
        client_id: None,
        hamming: (bits > 0).then_some(hamming),
        bits: (bits > 0).then_some(bits),
        trigger_error,
        eta,
        verdict,
        degenerate: components.is_empty(),
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Provenance, TriggerSet};
    use crate::nn::{Architecture, ParamKey, Role, Tensor};
    use crate::watermark::{EmbedMode, ExtractionKey, Extractor, RegLoss, SignatureBits};

    fn scale_key(bits: Vec<i8>, coords: Vec<usize>) -> FeatureKey {
        FeatureKey::new(
            SignatureBits::from_signs(bits).unwrap(),
            ExtractionKey::new(vec![ParamKey::new(1, Role::Scale)], Extractor::Coordinates(coords)).unwrap(),
            EmbedMode::ScaleNorm,
            RegLoss::Hinge,
            0.1,
        )
        .unwrap()
    }

    fn net_with_scales(values: &[f64]) -> Network {
        let arch = Architecture::mlp(3, &[values.len()], 2).unwrap();
        let mut net = Network::new(arch, 0);
        let mut p = net.params().clone();
        p.get_mut(&ParamKey::new(1, Role::Scale))
            .unwrap()
            .data_mut()
            .copy_from_slice(values);
        net.set_params(p).unwrap();
        net
    }

    #[test]
    fn white_counts_and_eta() {
        let net = net_with_scales(&[0.5, -0.5, 0.5, -0.5, 0.5, -0.5, 0.5, -0.5]);
        let perfect = scale_key(vec![1, -1, 1, -1, 1, -1, 1, -1], (0..8).collect());
        let r = verify_white(net.params(), &perfect, 0).unwrap();
        assert_eq!((r.hamming, r.eta, r.verdict), (Some(0), 1.0, true));
        let two_off = scale_key(vec![-1, 1, 1, -1, 1, -1, 1, -1], (0..8).collect());
        let r = verify_white(net.params(), &two_off, 1).unwrap();
        assert_eq!((r.hamming, r.eta, r.verdict), (Some(2), 0.75, false));
    }

    #[test]
    fn default_thresholds() {
        assert_eq!(default_eps_h(8), 1);
        assert_eq!(default_eps_h(20), 1);
        assert_eq!(default_eps_h(21), 2);
        assert_eq!(default_eps_h(32), 2);
    }

    fn triggers_for(net: &Network, hit: bool) -> TriggerSet {
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let pred = net.classify(&x).unwrap();
        let targets = pred.iter().map(|&p| if hit { p } else { 1 - p }).collect();
        TriggerSet::new(x, targets, 2, Provenance::Pattern, None).unwrap()
    }

    #[test]
    fn black_thresholds() {
        let net = net_with_scales(&[1.0; 4]);
        let r = verify_black(&net, &triggers_for(&net, true), 0.2).unwrap();
        assert_eq!((r.trigger_error, r.verdict), (Some(0.0), true));
        let miss = triggers_for(&net, false);
        assert!(!verify_black(&net, &miss, 0.2).unwrap().verdict);
        assert!(verify_black(&net, &miss, 1.0).unwrap().verdict);
    }

    #[test]
    fn aggregated_is_a_conjunction() {
        let net = net_with_scales(&[0.5, -0.5, 0.5, -0.5]);
        let good = WatermarkKey {
            client_id: 0,
            seed: 0,
            feature: Some(scale_key(vec![1, -1], vec![0, 1])),
            triggers: Some(triggers_for(&net, true)),
        };
        let r = verify_aggregated(&net, std::slice::from_ref(&good), None, 0.2).unwrap();
        assert!(r.verdict && !r.degenerate);
        assert_eq!(r.components.len(), 2);
        let bad = WatermarkKey {
            client_id: 1,
            seed: 0,
            feature: Some(scale_key(vec![-1, -1], vec![2, 3])),
            triggers: None,
        };
        let r = verify_aggregated(&net, &[good, bad], Some(0), 0.2).unwrap();
        assert!(!r.verdict);
        assert_eq!((r.hamming, r.bits), (Some(1), Some(4)));
        let r = verify_aggregated(&net, &[], None, 0.2).unwrap();
        assert!(r.verdict && r.degenerate);
    }
}
