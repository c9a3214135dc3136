//! Client-side local training with signature embedding.

use rand::seq::SliceRandom;

use super::FedConfig;
use crate::data::{Dataset, Shard};
use crate::error::{Error, Result};
use crate::nn::{weighted_cross_entropy, Architecture, Mode, ModelParams, Network, Sgd, Tensor};
use crate::rng::{self, purpose};
use crate::watermark::{accumulate_regularizer, WatermarkKey};

/// One client's private state. The momentum buffer persists across the
/// rounds the client participates in.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: Shard,
    pub key: Option<WatermarkKey>,
    /// Weight of the trigger-set loss; 0 disables trigger embedding.
    pub alpha: f64,
    /// Weight of the feature regularizer; 0 disables feature embedding.
    pub beta: f64,
    /// Weight of the main-task loss (1 in normal training).
    pub main_weight: f64,
    pub optimizer: Sgd,
}

impl ClientState {
    pub fn new(client_id: usize, shard: Shard, key: Option<WatermarkKey>, alpha: f64, beta: f64) -> Self {
        Self {
            client_id,
            shard,
            key,
            alpha,
            beta,
            main_weight: 1.0,
            optimizer: Sgd::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.main_weight >= 0.0) {
            return Err(Error::config(format!(
                "client {}: loss weights must be >= 0",
                self.client_id
            )));
        }
        let key = self.key.as_ref();
        if self.beta > 0.0 && key.and_then(|k| k.feature.as_ref()).is_none() {
            return Err(Error::config(format!(
                "client {}: missing watermark spec for feature weight {}",
                self.client_id, self.beta
            )));
        }
        if self.alpha > 0.0 && key.and_then(|k| k.triggers.as_ref()).is_none() {
            return Err(Error::config(format!(
                "client {}: missing watermark spec for trigger weight {}",
                self.client_id, self.alpha
            )));
        }
        if self.shard.is_empty() {
            return Err(Error::config(format!("client {} has an empty shard", self.client_id)));
        }
        Ok(())
    }
}

/// Mean per-step loss terms over a local update (unweighted by alpha/beta).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub main: f64,
    pub trigger: f64,
    pub feature: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub params: ModelParams,
    pub losses: LossParts,
}

/// Runs `local_epochs` of minibatch SGD from `global` on
/// `main_weight * L_main + alpha * L_trigger + beta * R_feature`. Each clean
/// batch is extended with `backdoor_batch` trigger samples when alpha > 0.
pub fn client_update(
    state: &mut ClientState,
    arch: &Architecture,
    global: &ModelParams,
    train: &Dataset,
    cfg: &FedConfig,
    round: usize,
) -> Result<ClientUpdate> {
    state.validate()?;
    let mut net = Network::with_params(arch.clone(), global.clone())?;
    let mut losses = LossParts::default();
    if cfg.local_epochs == 0 {
        return Ok(ClientUpdate {
            params: net.into_params(),
            losses,
        });
    }
    state.optimizer.momentum = cfg.momentum;
    let lr = cfg.lr_at(round);
    let triggers = state
        .key
        .as_ref()
        .and_then(|k| k.triggers.as_ref())
        .filter(|_| state.alpha > 0.0 && cfg.backdoor_batch > 0);
    let feature = state
        .key
        .as_ref()
        .and_then(|k| k.feature.as_ref())
        .filter(|_| state.beta > 0.0);

    let mut order = state.shard.indices.clone();
    let mut trig_order: Vec<usize> = triggers.map(|t| (0..t.len()).collect()).unwrap_or_default();
    let mut trig_pos = 0;
    for epoch in 0..cfg.local_epochs {
        let mut rng = rng::rng_for(
            cfg.seed,
            &[purpose::SHUFFLE, round as u64, state.client_id as u64, epoch as u64],
        );
        order.shuffle(&mut rng);
        trig_order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let clean = train.inputs().select_rows(chunk);
            let mut labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let n_clean = chunk.len();
            let (inputs, n_trig) = match triggers {
                Some(t) => {
                    let picks: Vec<usize> = (0..cfg.backdoor_batch)
                        .map(|i| trig_order[(trig_pos + i) % trig_order.len()])
                        .collect();
                    trig_pos = (trig_pos + cfg.backdoor_batch) % trig_order.len();
                    labels.extend(picks.iter().map(|&i| t.targets()[i]));
                    let tx = t.samples().select_rows(&picks);
                    (Tensor::concat_rows(&[&clean, &tx])?, picks.len())
                }
                None => (clean, 0),
            };
            let main_w: Vec<f64> = (0..n_clean + n_trig)
                .map(|i| if i < n_clean { 1.0 / n_clean as f64 } else { 0.0 })
                .collect();
            let trig_w: Vec<f64> = (0..n_clean + n_trig)
                .map(|i| if i < n_clean { 0.0 } else { 1.0 / n_trig as f64 })
                .collect();

            let logits = net.forward(&inputs, Mode::Train)?;
            let (main_loss, main_grad) = weighted_cross_entropy(&logits, &labels, &main_w)?;
            let mut grad = main_grad;
            grad.data_mut().iter_mut().for_each(|g| *g *= state.main_weight);
            if n_trig > 0 {
                let (trig_loss, trig_grad) = weighted_cross_entropy(&logits, &labels, &trig_w)?;
                for (g, t) in grad.data_mut().iter_mut().zip(trig_grad.data()) {
                    *g += state.alpha * t;
                }
                losses.trigger += trig_loss;
            }
            let mut grads = net.backward(&grad)?;
            if let Some(f) = feature {
                losses.feature += accumulate_regularizer(net.params(), f, state.beta, &mut grads)?;
            }
            losses.main += main_loss;
            losses.steps += 1;
            state.optimizer.step(net.params_mut(), &grads, lr)?;
        }
    }
    let steps = losses.steps.max(1) as f64;
    losses.main /= steps;
    losses.trigger /= steps;
    losses.feature /= steps;
    Ok(ClientUpdate {
        params: net.into_params(),
        losses,
    })
}
