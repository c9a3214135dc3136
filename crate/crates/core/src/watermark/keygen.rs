//! Key generation.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{EmbedMode, ExtractionKey, Extractor, FeatureKey, RegLoss, SignatureBits, DEFAULT_MARGIN};
use crate::error::{Error, Result};
use crate::nn::{Architecture, ParamKey, Role, Tensor};
use crate::rng::{self, purpose};

/// How scale-norm coordinates are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// A random subset drawn from the client's own seed.
    Random,
    /// Positions `offset..offset + N` (mod M) of a permutation shared by
    /// every client holding the same `layout_seed`. Clients given
    /// consecutive offsets get disjoint coordinates while the total stays
    /// within M.
    Window { layout_seed: u64, offset: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeygenSpec {
    pub bits: usize,
    pub mode: EmbedMode,
    pub loss: RegLoss,
    pub margin: f64,
    /// Layers to embed into; `None` picks the mode's default.
    pub layers: Option<Vec<usize>>,
    pub placement: Placement,
}

impl KeygenSpec {
    pub fn new(bits: usize, mode: EmbedMode, loss: RegLoss) -> Self {
        Self {
            bits,
            mode,
            loss,
            margin: DEFAULT_MARGIN,
            layers: None,
            placement: Placement::Random,
        }
    }
}

/// Last kernel-carrying layer before the classifier head.
pub fn default_kernel_layer(arch: &Architecture) -> Option<usize> {
    let kernels: Vec<usize> = arch.keys_with_role(Role::Kernel).iter().map(|k| k.layer).collect();
    match kernels.len() {
        0 => None,
        1 => Some(kernels[0]),
        n => Some(kernels[n - 2]),
    }
}

/// Parameter pool for a mode: every scale vector (or those of `layers`),
/// or the kernel of the default layer (or of `layers`).
pub fn selection_for(arch: &Architecture, mode: EmbedMode, layers: Option<&[usize]>) -> Result<Vec<ParamKey>> {
    let role = match mode {
        EmbedMode::ScaleNorm => Role::Scale,
        EmbedMode::Kernel => Role::Kernel,
    };
    let available = arch.keys_with_role(role);
    let chosen: Vec<ParamKey> = match layers {
        Some(ls) => ls
            .iter()
            .map(|&l| {
                let key = ParamKey::new(l, role);
                if available.contains(&key) {
                    Ok(key)
                } else {
                    Err(Error::input(format!("layer {l} has no {} parameters", role.name())))
                }
            })
            .collect::<Result<_>>()?,
        None => match mode {
            EmbedMode::ScaleNorm => available,
            EmbedMode::Kernel => default_kernel_layer(arch)
                .map(|l| vec![ParamKey::new(l, Role::Kernel)])
                .unwrap_or_default(),
        },
    };
    if chosen.is_empty() {
        return Err(Error::input(format!(
            "architecture has no {} parameters to embed into",
            role.name()
        )));
    }
    Ok(chosen)
}

/// Draws a client's feature key. Bits are i.i.d. uniform; kernel mode uses
/// an i.i.d. standard-normal `E`; scale-norm mode selects `N` distinct
/// coordinates. Deterministic in `(seed, client_id)` and the placement.
pub fn keygen(arch: &Architecture, client_id: usize, spec: &KeygenSpec, seed: u64) -> Result<FeatureKey> {
    if spec.bits == 0 {
        return Err(Error::input("signature length must be at least 1"));
    }
    let selector = selection_for(arch, spec.mode, spec.layers.as_deref())?;
    let m: usize = selector
        .iter()
        .map(|k| arch.param_len(k).expect("selected from arch"))
        .sum();
    let mut rng = rng::rng_for(seed, &[purpose::KEYGEN, client_id as u64]);
    let bits: Vec<i8> = (0..spec.bits)
        .map(|_| if rng.random_bool(0.5) { 1 } else { -1 })
        .collect();
    let extractor = match spec.mode {
        EmbedMode::ScaleNorm => {
            if spec.bits > m {
                return Err(Error::Capacity {
                    requested: spec.bits,
                    available: m,
                });
            }
            let coords = match spec.placement {
                Placement::Random => index::sample(&mut rng, m, spec.bits).into_vec(),
                Placement::Window { layout_seed, offset } => {
                    let mut perm: Vec<usize> = (0..m).collect();
                    perm.shuffle(&mut rng::rng_for(layout_seed, &[purpose::LAYOUT]));
                    (0..spec.bits).map(|j| perm[(offset + j) % m]).collect()
                }
            };
            Extractor::Coordinates(coords)
        }
        EmbedMode::Kernel => {
            let data = (0..m * spec.bits).map(|_| rng.sample(StandardNormal)).collect();
            Extractor::Dense(Tensor::new(vec![m, spec.bits], data)?)
        }
    };
    FeatureKey::new(
        SignatureBits::from_signs(bits)?,
        ExtractionKey::new(selector, extractor)?,
        spec.mode,
        spec.loss,
        spec.margin,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> Architecture {
        Architecture::mlp(20, &[16, 16], 10).unwrap()
    }

    #[test]
    fn scale_mode_picks_distinct_channels() {
        let arch = Architecture::mlp(20, &[16], 10).unwrap();
        let k = keygen(&arch, 0, &KeygenSpec::new(8, EmbedMode::ScaleNorm, RegLoss::Hinge), 1).unwrap();
        let Extractor::Coordinates(c) = &k.extraction.extractor else {
            panic!()
        };
        let mut s = c.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 8);
        assert!(s.iter().all(|&i| i < 16));
    }

    #[test]
    fn over_capacity_is_rejected() {
        let spec = KeygenSpec::new(33, EmbedMode::ScaleNorm, RegLoss::Hinge);
        assert!(matches!(
            keygen(&mlp(), 0, &spec, 1),
            Err(Error::Capacity {
                requested: 33,
                available: 32
            })
        ));
    }

    #[test]
    fn kernel_keys_differ_across_clients_and_seeds() {
        let spec = KeygenSpec::new(16, EmbedMode::Kernel, RegLoss::Bce);
        let a = keygen(&mlp(), 0, &spec, 1).unwrap();
        let b = keygen(&mlp(), 1, &spec, 1).unwrap();
        let c = keygen(&mlp(), 0, &spec, 2).unwrap();
        assert_ne!(a.extraction.extractor, b.extraction.extractor);
        assert_ne!(a.extraction.extractor, c.extraction.extractor);
        assert_eq!(a, keygen(&mlp(), 0, &spec, 1).unwrap());
        assert_eq!(a.extraction.selector, vec![ParamKey::new(3, Role::Kernel)]);
        assert_eq!(a.extraction.check_arch(&mlp()).unwrap(), 256);
    }

    #[test]
    fn windows_are_disjoint_within_capacity() {
        let arch = mlp();
        let mut seen = Vec::new();
        for client in 0..4 {
            let mut spec = KeygenSpec::new(8, EmbedMode::ScaleNorm, RegLoss::Hinge);
            spec.placement = Placement::Window {
                layout_seed: 5,
                offset: 8 * client,
            };
            let k = keygen(&arch, client, &spec, 100 + client as u64).unwrap();
            let Extractor::Coordinates(c) = k.extraction.extractor else {
                panic!()
            };
            seen.extend(c);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn cnn_defaults() {
        let arch = Architecture::mini_cnn(1, 8, 8, 10).unwrap();
        assert_eq!(default_kernel_layer(&arch), Some(4));
        let scales = selection_for(&arch, EmbedMode::ScaleNorm, None).unwrap();
        assert_eq!(
            scales,
            vec![ParamKey::new(1, Role::Scale), ParamKey::new(5, Role::Scale)]
        );
        assert!(selection_for(&arch, EmbedMode::ScaleNorm, Some(&[0])).is_err());
    }

    #[test]
    fn bits_are_balanced() {
        let spec = KeygenSpec::new(16, EmbedMode::Kernel, RegLoss::Bce);
        let arch = Architecture::mlp(4, &[4, 4], 2).unwrap();
        let mut sum = 0i64;
        for seed in 0..1000 {
            let k = keygen(&arch, 3, &spec, seed).unwrap();
            sum += k.bits.signs().iter().map(|&b| b as i64).sum::<i64>();
        }
        let mean = sum as f64 / 16_000.0;
        assert!(mean.abs() <= 0.1, "bit mean {mean}");
    }
}
