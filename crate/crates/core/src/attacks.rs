//! Removal attacks on a trained model: random weight pruning and
//! main-task fine-tuning, with verification before and after.

use std::io::Write;

use rand::seq::index;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Architecture, ModelParams, Network, Role, Sgd};
use crate::rng::{self, purpose};
use crate::train::train_epoch;
use crate::watermark::{verify_black, verify_white, EmbedMode, WatermarkKey, DEFAULT_EPS_Y};

/// Which weights random pruning may zero. Biases and running statistics
/// are never pruned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneTarget {
    /// Dense and convolution kernels only (multi-dimensional weights).
    #[default]
    Kernels,
    /// Kernels plus normalization scales.
    KernelsAndScales,
}

impl PruneTarget {
    fn covers(self, role: Role) -> bool {
        match self {
            PruneTarget::Kernels => role == Role::Kernel,
            PruneTarget::KernelsAndScales => matches!(role, Role::Kernel | Role::Scale),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PruneTarget::Kernels => "kernels",
            PruneTarget::KernelsAndScales => "kernels+scales",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "kernels" => Some(PruneTarget::Kernels),
            "kernels+scales" => Some(PruneTarget::KernelsAndScales),
            _ => None,
        }
    }
}

/// Sets exactly `round(rate * total)` uniformly chosen eligible entries to
/// zero.
pub fn prune(params: &ModelParams, rate: f64, target: PruneTarget, seed: u64) -> Result<ModelParams> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::input(format!("pruning rate must lie in [0, 1], got {rate}")));
    }
    let mut out = params.clone();
    let slots: Vec<(usize, usize)> = out
        .iter()
        .enumerate()
        .filter(|(_, (k, _))| target.covers(k.role))
        .flat_map(|(e, (_, t))| (0..t.len()).map(move |i| (e, i)))
        .collect();
    let count = (rate * slots.len() as f64).round() as usize;
    let mut rng = rng::rng_for(seed, &[purpose::PRUNE]);
    let mut chosen: Vec<(usize, usize)> = index::sample(&mut rng, slots.len(), count)
        .into_iter()
        .map(|i| slots[i])
        .collect();
    chosen.sort_unstable();
    let mut tensors: Vec<_> = out.iter_mut().map(|(_, t)| t).collect();
    for (e, i) in chosen {
        tensors[e].data_mut()[i] = 0.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneOptions {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Per-epoch learning-rate decay factor `1 - decay`.
    pub decay: f64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            batch: 16,
            decay: 0.01,
        }
    }
}

/// Cross-entropy-only SGD on `ds`; returns the parameters after every
/// epoch count in `checkpoints` (ascending, duplicates allowed).
pub fn finetune_checkpoints(
    arch: &Architecture,
    params: &ModelParams,
    ds: &Dataset,
    checkpoints: &[usize],
    opts: &FinetuneOptions,
    seed: u64,
) -> Result<Vec<ModelParams>> {
    if checkpoints.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::input("fine-tune checkpoints must be ascending"));
    }
    let mut net = Network::with_params(arch.clone(), params.clone())?;
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut done = 0;
    let mut lr = opts.lr;
    let mut opt = Sgd::new(opts.momentum);
    let seed = rng::derive_seed(seed, &[purpose::FINETUNE]);
    for &target in checkpoints {
        while done < target {
            train_epoch(&mut net, ds, &mut opt, lr, opts.batch, seed, done)?;
            lr *= 1.0 - opts.decay;
            done += 1;
        }
        out.push(net.params().clone());
    }
    Ok(out)
}

/// Fine-tunes for `epochs` epochs.
pub fn finetune(
    arch: &Architecture,
    params: &ModelParams,
    ds: &Dataset,
    epochs: usize,
    opts: &FinetuneOptions,
    seed: u64,
) -> Result<ModelParams> {
    Ok(finetune_checkpoints(arch, params, ds, &[epochs], opts, seed)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Attack {
    Prune { rate: f64 },
    Finetune { epochs: usize },
}

impl Attack {
    pub fn name(&self) -> &'static str {
        match self {
            Attack::Prune { .. } => "prune",
            Attack::Finetune { .. } => "finetune",
        }
    }

    pub fn param(&self) -> String {
        match self {
            Attack::Prune { rate } => rate.to_string(),
            Attack::Finetune { epochs } => epochs.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackGrid {
    pub prune_rates: Vec<f64>,
    pub finetune_epochs: Vec<usize>,
    pub prune_target: PruneTarget,
    pub finetune: FinetuneOptions,
    pub seed: u64,
}

impl Default for AttackGrid {
    /// Pruning rates 0.1 to 0.9 and fine-tune checkpoints every 10 epochs
    /// up to 50.
    fn default() -> Self {
        Self {
            prune_rates: (1..=9).map(|i| i as f64 / 10.0).collect(),
            finetune_epochs: vec![10, 20, 30, 40, 50],
            prune_target: PruneTarget::default(),
            finetune: FinetuneOptions::default(),
            seed: 0,
        }
    }
}

impl AttackGrid {
    pub fn empty() -> Self {
        Self {
            prune_rates: Vec::new(),
            finetune_epochs: Vec::new(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.prune_rates.len() + self.finetune_epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Verification of one model state against every key.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub accuracy: f64,
    /// Per-client white-box rate with the embedding mode.
    pub eta: Vec<(usize, EmbedMode, f64)>,
    /// Per-client trigger error.
    pub trigger_error: Vec<(usize, f64)>,
}

impl Snapshot {
    pub fn take(net: &Network, keys: &[WatermarkKey], test: &Dataset) -> Result<Self> {
        let mut eta = Vec::new();
        let mut trigger_error = Vec::new();
        for k in keys {
            if let Some(f) = &k.feature {
                eta.push((k.client_id, f.mode, verify_white(net.params(), f, 0)?.eta));
            }
            if let Some(t) = &k.triggers {
                trigger_error.push((
                    k.client_id,
                    verify_black(net, t, DEFAULT_EPS_Y)?.trigger_error.unwrap_or(0.0),
                ));
            }
        }
        Ok(Self {
            accuracy: net.accuracy(test.inputs(), test.labels())?,
            eta,
            trigger_error,
        })
    }

    /// Mean white-box rate over clients embedding in `mode`.
    pub fn mean_eta(&self, mode: EmbedMode) -> Option<f64> {
        mean(self.eta.iter().filter(|(_, m, _)| *m == mode).map(|(_, _, e)| *e))
    }

    pub fn mean_trigger_error(&self) -> Option<f64> {
        mean(self.trigger_error.iter().map(|(_, e)| *e))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub attack: Attack,
    pub before: Snapshot,
    pub after: Snapshot,
}

/// Applies every grid point to the trained model and verifies with the
/// original keys. Reports are ordered pruning rates first, then fine-tune
/// checkpoints, each in grid order.
pub fn run_attack_suite(
    arch: &Architecture,
    params: &ModelParams,
    keys: &[WatermarkKey],
    train: &Dataset,
    test: &Dataset,
    grid: &AttackGrid,
) -> Result<Vec<AttackReport>> {
    if grid.is_empty() {
        return Ok(Vec::new());
    }
    let before = Snapshot::take(&Network::with_params(arch.clone(), params.clone())?, keys, test)?;
    let snapshot = |p: ModelParams| Snapshot::take(&Network::with_params(arch.clone(), p)?, keys, test);
    let mut reports: Vec<AttackReport> = grid
        .prune_rates
        .par_iter()
        .enumerate()
        .map(|(i, &rate)| {
            let seed = rng::derive_seed(grid.seed, &[purpose::PRUNE, i as u64]);
            Ok(AttackReport {
                attack: Attack::Prune { rate },
                before: before.clone(),
                after: snapshot(prune(params, rate, grid.prune_target, seed)?)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut epochs = grid.finetune_epochs.clone();
    epochs.sort_unstable();
    let tuned = finetune_checkpoints(arch, params, train, &epochs, &grid.finetune, grid.seed)?;
    for &e in &grid.finetune_epochs {
        let i = epochs.iter().position(|&x| x == e).expect("sorted copy");
        reports.push(AttackReport {
            attack: Attack::Finetune { epochs: e },
            before: before.clone(),
            after: snapshot(tuned[i].clone())?,
        });
    }
    Ok(reports)
}

pub const ATTACK_CSV_HEADER: &str = "attack,param,acc_before,acc_after,eta_gamma,eta_kernel,trigger_err";

/// Post-attack means per report; empty cells where no client applies.
pub fn write_attack_csv(reports: &[AttackReport], out: &mut impl Write) -> Result<()> {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(out, "{ATTACK_CSV_HEADER}")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.attack.name(),
            r.attack.param(),
            r.before.accuracy,
            r.after.accuracy,
            cell(r.after.mean_eta(EmbedMode::ScaleNorm)),
            cell(r.after.mean_eta(EmbedMode::Kernel)),
            cell(r.after.mean_trigger_error()),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamKey, Tensor};
    use proptest::prelude::*;

    fn sample_params() -> ModelParams {
        let mut p = ModelParams::new();
        p.insert(ParamKey::new(0, Role::Kernel), Tensor::filled(&[4, 5], 1.0));
        p.insert(ParamKey::new(0, Role::Bias), Tensor::filled(&[4], 1.0));
        p.insert(ParamKey::new(1, Role::Scale), Tensor::filled(&[4], 1.0));
        p.insert(ParamKey::new(1, Role::Bias), Tensor::filled(&[4], 1.0));
        p.insert(ParamKey::new(2, Role::Kernel), Tensor::filled(&[3, 4], 1.0));
        p
    }

    fn zeros_by_role(p: &ModelParams) -> Vec<(Role, usize)> {
        p.iter()
            .map(|(k, t)| (k.role, t.data().iter().filter(|v| **v == 0.0).count()))
            .collect()
    }

    #[test]
    fn edge_rates() {
        let p = sample_params();
        assert_eq!(prune(&p, 0.0, PruneTarget::Kernels, 1).unwrap(), p);
        let all = prune(&p, 1.0, PruneTarget::KernelsAndScales, 1).unwrap();
        for (k, t) in all.iter() {
            let zero = t.data().iter().all(|v| *v == 0.0);
            assert_eq!(zero, k.role != Role::Bias, "{k}");
        }
        assert!(prune(&p, 1.5, PruneTarget::Kernels, 1).is_err());
    }

    #[test]
    fn exact_count_and_scope() {
        let p = sample_params();
        let out = prune(&p, 0.5, PruneTarget::Kernels, 3).unwrap();
        let zeros: usize = zeros_by_role(&out).iter().map(|(_, z)| z).sum();
        assert_eq!(zeros, 16);
        for (role, z) in zeros_by_role(&out) {
            if role != Role::Kernel {
                assert_eq!(z, 0);
            }
        }
        assert_eq!(out, prune(&p, 0.5, PruneTarget::Kernels, 3).unwrap());
    }

    proptest! {
        #[test]
        fn composition_prunes_at_least_the_larger_rate(p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0, seed in any::<u64>()) {
            let p = sample_params();
            let once = prune(&prune(&p, p1, PruneTarget::KernelsAndScales, seed).unwrap(), p2, PruneTarget::KernelsAndScales, seed ^ 1).unwrap();
            let zeros: usize = zeros_by_role(&once).iter().filter(|(r, _)| *r != Role::Bias).map(|(_, z)| z).sum();
            let eligible = 36.0;
            prop_assert!(zeros as f64 >= (p1.max(p2) * eligible).round());
        }
    }

    #[test]
    fn empty_grid_gives_no_reports() {
        let arch = Architecture::mlp(3, &[4], 2).unwrap();
        let net = Network::new(arch.clone(), 0);
        let ds = Dataset::new(Tensor::zeros(&[2, 3]), vec![0, 1], 2).unwrap();
        let r = run_attack_suite(&arch, net.params(), &[], &ds, &ds, &AttackGrid::empty()).unwrap();
        assert!(r.is_empty());
    }
}
