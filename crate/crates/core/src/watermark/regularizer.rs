//! Embedding regularizers and their gradients.

use super::{extract, FeatureKey, RegLoss};
use crate::error::Result;
use crate::nn::ModelParams;

/// Adds `weight * dR/dW` into `grads` and returns `R`.
pub fn accumulate_regularizer(
    params: &ModelParams,
    key: &FeatureKey,
    weight: f64,
    grads: &mut ModelParams,
) -> Result<f64> {
    let b = extract(params, &key.extraction)?;
    let t = key.bits.signs();
    let mut loss = 0.0;
    let mut dl_db = vec![0.0; b.len()];
    match key.loss {
        RegLoss::Hinge => {
            for (j, (&bj, &tj)) in b.iter().zip(t).enumerate() {
                let gap = key.margin - f64::from(tj) * bj;
                if gap > 0.0 {
                    loss += gap;
                    dl_db[j] = -f64::from(tj);
                }
            }
        }
        RegLoss::Bce => {
            for (j, (&bj, &tj)) in b.iter().zip(t).enumerate() {
                let target = if tj > 0 { 1.0 } else { 0.0 };
                // -t log f - (1 - t) log(1 - f) = softplus(b) - t b
                let softplus = bj.max(0.0) + (-bj.abs()).exp().ln_1p();
                loss += softplus - target * bj;
                dl_db[j] = 1.0 / (1.0 + (-bj).exp()) - target;
            }
        }
    }
    if weight != 0.0 {
        key.extraction.scatter(&dl_db, weight, grads)?;
    }
    Ok(loss)
}

/// Loss and full-layout gradient of the key's own regularizer.
pub fn regularizer(params: &ModelParams, key: &FeatureKey) -> Result<(f64, ModelParams)> {
    let mut grads = params.zeros_like();
    let loss = accumulate_regularizer(params, key, 1.0, &mut grads)?;
    Ok((loss, grads))
}

/// `sum_j max(mu - t_j b_j, 0)` regardless of the key's declared loss.
pub fn hinge_reg(params: &ModelParams, key: &FeatureKey) -> Result<(f64, ModelParams)> {
    let key = FeatureKey {
        loss: RegLoss::Hinge,
        ..key.clone()
    };
    regularizer(params, &key)
}

/// Binary cross-entropy between `sigmoid(b)` and the `{0, 1}` bits,
/// regardless of the key's declared loss.
pub fn bce_reg(params: &ModelParams, key: &FeatureKey) -> Result<(f64, ModelParams)> {
    let key = FeatureKey {
        loss: RegLoss::Bce,
        ..key.clone()
    };
    regularizer(params, &key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamKey, Role, Tensor};
    use crate::watermark::{EmbedMode, ExtractionKey, Extractor, SignatureBits};

    fn single(b: f64, t: i8, margin: f64) -> (ModelParams, FeatureKey) {
        let key = ParamKey::new(0, Role::Scale);
        let mut p = ModelParams::new();
        p.insert(key, Tensor::new(vec![1], vec![b]).unwrap());
        let fk = FeatureKey::new(
            SignatureBits::from_signs(vec![t]).unwrap(),
            ExtractionKey::new(vec![key], Extractor::Coordinates(vec![0])).unwrap(),
            EmbedMode::ScaleNorm,
            RegLoss::Hinge,
            margin,
        )
        .unwrap();
        (p, fk)
    }

    #[test]
    fn hinge_terms() {
        let (p, k) = single(1.0, 1, 0.5);
        let (l, g) = hinge_reg(&p, &k).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        let (p, k) = single(-0.2, 1, 0.5);
        let (l, g) = hinge_reg(&p, &k).unwrap();
        assert!((l - 0.7).abs() < 1e-15);
        assert_eq!(g.flatten(), vec![-1.0]);
    }

    #[test]
    fn bce_at_zero_is_ln2() {
        for t in [1, -1] {
            let (p, k) = single(0.0, t, 0.1);
            let (l, _) = bce_reg(&p, &k).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let (p, k) = single(40.0, 1, 0.1);
        assert!(bce_reg(&p, &k).unwrap().0 < 1e-12);
    }
}
