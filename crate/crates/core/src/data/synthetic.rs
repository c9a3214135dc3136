//! Procedural stand-ins for small benchmark datasets.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{self, purpose};

/// Generator family. The class structure (centres, orientations) depends
/// only on the seed; `stream` selects an independent draw of samples so a
/// train and a test set share one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Synthetic {
    /// Isotropic Gaussian clusters around class centres drawn from
    /// `N(0, separation^2 I)`.
    Blobs { dim: usize, separation: f64, noise: f64 },
    /// 1x8x8 oriented gratings with random phase and additive pixel noise.
    Textures { contrast: f64, noise: f64 },
}

impl Synthetic {
    pub const DEFAULT_BLOBS: Synthetic = Synthetic::Blobs {
        dim: 20,
        separation: 1.5,
        noise: 1.0,
    };
    pub const DEFAULT_TEXTURES: Synthetic = Synthetic::Textures {
        contrast: 0.1,
        noise: 0.03,
    };

    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            Synthetic::Blobs { dim, .. } => vec![dim],
            Synthetic::Textures { .. } => vec![1, 8, 8],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Synthetic::Blobs { .. } => "blobs",
            Synthetic::Textures { .. } => "textures",
        }
    }

    /// Samples of every class in class-major order.
    pub fn generate(&self, classes: usize, per_class: usize, seed: u64, stream: u64) -> Result<Dataset> {
        if classes < 2 {
            return Err(Error::input(format!("need at least 2 classes, got {classes}")));
        }
        if per_class == 0 {
            return Err(Error::input("per_class must be positive"));
        }
        let mut sample_rng = rng::rng_for(seed, &[purpose::DATA, 1, stream]);
        let mut data = Vec::new();
        let mut labels = Vec::with_capacity(classes * per_class);
        match *self {
            Synthetic::Blobs { dim, separation, noise } => {
                if dim == 0 || !(separation > 0.0) || !(noise >= 0.0) {
                    return Err(Error::input("blobs need dim > 0, separation > 0, noise >= 0"));
                }
                let mut centre_rng = rng::rng_for(seed, &[purpose::DATA, 0]);
                let centres: Vec<Vec<f64>> = (0..classes)
                    .map(|_| {
                        (0..dim)
                            .map(|_| separation * centre_rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect();
                for (c, centre) in centres.iter().enumerate() {
                    for _ in 0..per_class {
                        data.extend(
                            centre
                                .iter()
                                .map(|m| m + noise * sample_rng.sample::<f64, _>(StandardNormal)),
                        );
                        labels.push(c);
                    }
                }
            }
            Synthetic::Textures { contrast, noise } => {
                if !(contrast > 0.0) || !(noise >= 0.0) {
                    return Err(Error::input("textures need contrast > 0, noise >= 0"));
                }
                for c in 0..classes {
                    let angle = PI * c as f64 / classes as f64;
                    let freq = if c % 2 == 0 { 1.0 } else { 2.0 };
                    let (ca, sa) = (angle.cos(), angle.sin());
                    for _ in 0..per_class {
                        let phase = sample_rng.random_range(0.0..2.0 * PI);
                        for y in 0..8 {
                            for x in 0..8 {
                                let u = (x as f64 * ca + y as f64 * sa) / 8.0;
                                let v = contrast * (2.0 * PI * freq * u + phase).sin();
                                let n: f64 = StandardNormal.sample(&mut sample_rng);
                                data.push(v + noise * n);
                            }
                        }
                        labels.push(c);
                    }
                }
            }
        }
        let mut shape = vec![labels.len()];
        shape.extend(self.sample_shape());
        Dataset::new(Tensor::new(shape, data)?, labels, classes)
    }
}

/// Training draw (stream 0) of the given generator.
pub fn make_synthetic(kind: Synthetic, classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    kind.generate(classes, per_class, seed, 0)
}
