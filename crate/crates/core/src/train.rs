//! Plain supervised training loops shared by vanilla models, fine-tuning
//! and baselines.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Mode, Network, Sgd};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate is multiplied by `1 - decay` after every epoch.
    pub decay: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 16,
            lr: 0.01,
            momentum: 0.9,
            decay: 0.01,
        }
    }
}

/// Minibatch momentum SGD on cross-entropy over the whole dataset. Returns
/// the mean training loss of every epoch.
pub fn train_supervised(net: &mut Network, ds: &Dataset, opts: &TrainOptions, seed: u64) -> Result<Vec<f64>> {
    if opts.batch == 0 || !(opts.lr >= 0.0) || !(opts.momentum >= 0.0) || !(0.0..1.0).contains(&opts.decay) {
        return Err(Error::input(
            "training needs batch > 0, lr, momentum >= 0 and decay in [0, 1)",
        ));
    }
    let mut opt = Sgd::new(opts.momentum);
    let mut lr = opts.lr;
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        history.push(train_epoch(net, ds, &mut opt, lr, opts.batch, seed, epoch)?);
        lr *= 1.0 - opts.decay;
    }
    Ok(history)
}

/// One shuffled pass over `ds` with the given optimizer state. The shuffle
/// depends on `(seed, epoch)` only. Returns the mean batch loss.
pub fn train_epoch(
    net: &mut Network,
    ds: &Dataset,
    opt: &mut Sgd,
    lr: f64,
    batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    if batch == 0 || ds.is_empty() {
        return Err(Error::input("training needs batch > 0 and a non-empty dataset"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::rng_for(seed, &[purpose::SHUFFLE, epoch as u64]));
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(batch) {
        let x = ds.inputs().select_rows(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| ds.labels()[i]).collect();
        let logits = net.forward(&x, Mode::Train)?;
        let (loss, g) = cross_entropy(&logits, &y)?;
        let grads = net.backward(&g)?;
        opt.step(net.params_mut(), &grads, lr)?;
        total += loss;
        steps += 1;
    }
    Ok(total / steps as f64)
}
