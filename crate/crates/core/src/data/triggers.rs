//! Trigger sets: secret inputs paired with a designated label.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Mode, Network, Tensor};
use crate::rng::{self, purpose};

/// Slack on the post-hoc perturbation bound check.
const BOUND_SLACK: f64 = 1e-12;
const NOISE_SCALE: f64 = 1.0;
const STAMP_SCALE: f64 = 2.0;
const STAMP_FRACTION: f64 = 0.25;
const PATCH_SCALE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    /// Base samples with a fixed stamp.
    Pattern,
    /// Targeted L2 projected gradient descent around source samples.
    Pgd { eps: f64, lr: f64, iters: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSet {
    samples: Tensor,
    targets: Vec<usize>,
    provenance: Provenance,
    /// Unperturbed starting points, kept for PGD sets so the bound can be
    /// re-checked.
    sources: Option<Tensor>,
}

impl TriggerSet {
    pub fn new(
        samples: Tensor,
        targets: Vec<usize>,
        classes: usize,
        provenance: Provenance,
        sources: Option<Tensor>,
    ) -> Result<Self> {
        if targets.is_empty() || samples.shape().len() < 2 || samples.rows() != targets.len() {
            return Err(Error::input(format!(
                "trigger set needs J >= 1 samples matching {} targets, got shape {:?}",
                targets.len(),
                samples.shape()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::input(format!("trigger target {bad} outside {classes} classes")));
        }
        if !samples.is_finite() {
            return Err(Error::input("trigger samples must be finite"));
        }
        let set = Self {
            samples,
            targets,
            provenance,
            sources,
        };
        if let Provenance::Pgd { eps, .. } = provenance {
            let src = set
                .sources
                .as_ref()
                .ok_or_else(|| Error::input("PGD trigger set without source samples"))?;
            if src.shape() != set.samples.shape() {
                return Err(Error::input("PGD sources do not match trigger samples"));
            }
            let worst = set.max_perturbation().unwrap_or(0.0);
            if worst > eps + BOUND_SLACK {
                return Err(Error::input(format!(
                    "trigger perturbation {worst} exceeds declared bound {eps}"
                )));
            }
        }
        Ok(set)
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn sources(&self) -> Option<&Tensor> {
        self.sources.as_ref()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Largest per-sample L2 distance to its source, if sources are kept.
    pub fn max_perturbation(&self) -> Option<f64> {
        let src = self.sources.as_ref()?;
        Some(
            (0..self.len())
                .map(|i| l2_dist(self.samples.row(i), src.row(i)))
                .fold(0.0, f64::max),
        )
    }
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Target class of a client's trigger set: offset by client id so that
/// clients do not share a target while there are enough classes.
pub fn client_target(client_id: usize, classes: usize) -> usize {
    client_id % classes
}

/// Picks `count` rows, preferring rows not labelled `avoid`.
fn pick_sources(ds: &Dataset, count: usize, avoid: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] != avoid).collect();
    if pool.is_empty() {
        return Err(Error::input(format!("every sample already has label {avoid}")));
    }
    Ok(if count <= pool.len() {
        index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    })
}

fn input_scale(ds: &Dataset) -> f64 {
    let d = ds.inputs().data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt().max(1e-3)
}

/// `j` samples drawn from `ds` and pushed out of distribution, all
/// labelled `target`. Vector inputs get fresh Gaussian noise of one input
/// standard deviation, then a fixed quarter of their coordinates
/// overwritten with `+-2` standard deviations. Image inputs get a 3x3
/// checker patch of `+-3` standard deviations in one corner of every
/// channel.
pub fn forge_pattern_triggers(ds: &Dataset, j: usize, target: usize, seed: u64) -> Result<TriggerSet> {
    if j == 0 {
        return Err(Error::input("trigger count must be positive"));
    }
    if target >= ds.classes() {
        return Err(Error::input(format!(
            "target {target} outside {} classes",
            ds.classes()
        )));
    }
    let mut rng = rng::rng_for(seed, &[purpose::TRIGGERS]);
    let scale = input_scale(ds);
    let shape = ds.sample_shape().to_vec();
    let row_len: usize = shape.iter().product();
    let rows = pick_sources(ds, j, target, &mut rng)?;
    let mut samples = ds.inputs().select_rows(&rows);
    if shape.len() == 3 && shape[1] >= 3 && shape[2] >= 3 {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let oy = if rng.random_bool(0.5) { 0 } else { h - 3 };
        let ox = if rng.random_bool(0.5) { 0 } else { w - 3 };
        let amp = PATCH_SCALE * scale;
        let signs: Vec<f64> = (0..9).map(|_| if rng.random_bool(0.5) { amp } else { -amp }).collect();
        for row in samples.data_mut().chunks_mut(row_len) {
            for ch in 0..c {
                for (p, v) in signs.iter().enumerate() {
                    row[ch * h * w + (oy + p / 3) * w + ox + p % 3] = *v;
                }
            }
        }
    } else {
        let count = ((row_len as f64 * STAMP_FRACTION).round() as usize).clamp(1, row_len);
        let amp = STAMP_SCALE * scale;
        let stamp: Vec<(usize, f64)> = index::sample(&mut rng, row_len, count)
            .into_iter()
            .map(|i| (i, if rng.random_bool(0.5) { amp } else { -amp }))
            .collect();
        for row in samples.data_mut().chunks_mut(row_len) {
            for v in row.iter_mut() {
                *v += NOISE_SCALE * scale * rng.sample::<f64, _>(StandardNormal);
            }
            for &(i, v) in &stamp {
                row[i] = v;
            }
        }
    }
    TriggerSet::new(samples, vec![target; j], ds.classes(), Provenance::Pattern, None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdConfig {
    /// L2 radius of the perturbation ball.
    pub eps: f64,
    /// Length of each normalized gradient step.
    pub lr: f64,
    pub iters: usize,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            eps: 0.3,
            lr: 0.01,
            iters: 80,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub triggers: TriggerSet,
    /// Fraction of triggers the attacked model assigns to the target.
    pub success: f64,
    /// Same fraction on the unperturbed sources.
    pub baseline: f64,
    /// Set when success stays below one half.
    pub weak: bool,
}

/// Targeted L2 PGD against `vanilla` starting from `j` samples of `ds`
/// whose label differs from `target`. Every iterate is projected back onto
/// the eps-ball around its source.
pub fn forge_pgd_triggers(
    vanilla: &Network,
    ds: &Dataset,
    j: usize,
    target: usize,
    cfg: PgdConfig,
    seed: u64,
) -> Result<PgdOutcome> {
    if j == 0 {
        return Err(Error::input("trigger count must be positive"));
    }
    if target >= ds.classes() || target >= vanilla.arch().classes() {
        return Err(Error::input(format!("target {target} outside the class range")));
    }
    if !(cfg.eps >= 0.0) || !(cfg.lr >= 0.0) {
        return Err(Error::input("PGD needs eps >= 0 and lr >= 0"));
    }
    let mut rng = rng::rng_for(seed, &[purpose::TRIGGERS, 1]);
    let rows = pick_sources(ds, j, target, &mut rng)?;
    let sources = ds.inputs().select_rows(&rows);
    let row_len = sources.row_len();
    let labels = vec![target; j];
    let hit_rate = |x: &Tensor| -> Result<f64> {
        let pred = vanilla.classify(x)?;
        Ok(pred.iter().filter(|&&p| p == target).count() as f64 / j as f64)
    };
    let baseline = hit_rate(&sources)?;

    let mut net = vanilla.clone();
    let mut x = sources.clone();
    for _ in 0..cfg.iters {
        let logits = net.forward(&x, Mode::Eval)?;
        let (_, g) = cross_entropy(&logits, &labels)?;
        let (_, gx) = net.backward_with_input(&g)?;
        for r in 0..j {
            let span = r * row_len..(r + 1) * row_len;
            let grad = &gx.data()[span.clone()];
            let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            let src = &sources.data()[span.clone()];
            let row = &mut x.data_mut()[span];
            if norm > 0.0 {
                for (v, g) in row.iter_mut().zip(grad) {
                    *v -= cfg.lr * g / norm;
                }
            }
            let dist = l2_dist(row, src);
            if dist > cfg.eps {
                let shrink = cfg.eps / dist;
                for (v, s) in row.iter_mut().zip(src) {
                    *v = s + (*v - s) * shrink;
                }
            }
        }
    }
    let success = hit_rate(&x)?;
    let triggers = TriggerSet::new(
        x,
        labels,
        ds.classes(),
        Provenance::Pgd {
            eps: cfg.eps,
            lr: cfg.lr,
            iters: cfg.iters,
        },
        Some(sources),
    )?;
    Ok(PgdOutcome {
        triggers,
        success,
        baseline,
        weak: success < 0.5,
    })
}
