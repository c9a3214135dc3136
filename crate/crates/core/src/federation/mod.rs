//! Federated averaging with per-client signature embedding.
//!
//! The server side ([`aggregate`], [`sample_clients`]) only ever sees
//! [`Upload`] values: client ids, parameters and sample counts. Keys and
//! trigger sets stay inside [`ClientState`].

mod client;
mod round;

pub use client::{client_update, ClientState, ClientUpdate, LossParts};
pub use round::{run_federation, write_rounds_csv, ClientLog, FedOutcome, RoundLog, ROUNDS_CSV_HEADER};

use rand::seq::index;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::rng::{self, purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub clients: usize,
    /// Fraction of clients sampled each round.
    pub fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch: usize,
    /// Trigger samples appended to every clean batch of an embedding client.
    pub backdoor_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Per-round multiplicative learning-rate decay.
    pub lr_decay: f64,
    /// Std of Gaussian noise added to uploads; 0 disables it.
    pub dp_sigma: f64,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 8,
            fraction: 1.0,
            rounds: 60,
            local_epochs: 2,
            batch: 16,
            backdoor_batch: 2,
            lr: 0.01,
            momentum: 0.9,
            lr_decay: 0.99,
            dp_sigma: 0.0,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.fraction, self.lr, self.momentum, self.lr_decay, self.dp_sigma]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("federation rates must be finite"));
        }
        if self.clients == 0 {
            return Err(Error::config("clients must be at least 1"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config(format!(
                "fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if self.lr < 0.0 || self.momentum < 0.0 || self.lr_decay <= 0.0 || self.dp_sigma < 0.0 {
            return Err(Error::config("lr, momentum and dp_sigma must be >= 0, lr_decay > 0"));
        }
        Ok(())
    }

    /// Learning rate used in `round`.
    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr * self.lr_decay.powi(round as i32)
    }

    pub fn sampled_per_round(&self) -> usize {
        sample_size(self.clients, self.fraction)
    }
}

/// What a client sends to the server.
#[derive(Debug, Clone)]
pub struct Upload {
    pub client_id: usize,
    pub params: ModelParams,
    /// Local sample count used as the aggregation weight.
    pub n_k: usize,
}

/// Sample-count weighted average, summed in ascending client id order.
pub fn aggregate(uploads: &[Upload]) -> Result<ModelParams> {
    let mut order: Vec<&Upload> = uploads.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let first = order
        .first()
        .ok_or_else(|| Error::input("aggregate needs at least one upload"))?;
    let total: usize = order.iter().map(|u| u.n_k).sum();
    if total == 0 {
        return Err(Error::input("aggregate needs a positive total sample count"));
    }
    let weight = |u: &Upload| u.n_k as f64 / total as f64;
    let mut acc = first.params.scale(weight(first));
    for u in &order[1..] {
        acc.axpy(weight(u), &u.params)?;
    }
    Ok(acc)
}

fn sample_size(clients: usize, fraction: f64) -> usize {
    // The slack keeps products like 0.05 * 20 from rounding up to 2.
    ((fraction * clients as f64 - 1e-9).ceil() as usize).clamp(1, clients)
}

/// `ceil(C K)` distinct client ids, uniform without replacement, sorted.
pub fn sample_clients(clients: usize, fraction: f64, round: usize, seed: u64) -> Result<Vec<usize>> {
    if clients == 0 || !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "cannot sample fraction {fraction} of {clients} clients"
        )));
    }
    let m = sample_size(clients, fraction);
    let mut rng = rng::rng_for(seed, &[purpose::SAMPLE, round as u64]);
    let mut ids = index::sample(&mut rng, clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Adds i.i.d. `N(0, sigma^2)` to every trainable entry. Running
/// normalization statistics are left alone.
pub fn add_dp_noise(update: &ModelParams, sigma: f64, seed: u64) -> Result<ModelParams> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::input(format!("noise std must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(update.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let mut rng = rng::rng_for(seed, &[purpose::DP_NOISE]);
    let mut out = update.clone();
    for (key, t) in out.iter_mut() {
        if key.role.is_trainable() {
            for v in t.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}
