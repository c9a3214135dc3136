//! Round orchestration and telemetry.

use std::io::Write;

use rayon::prelude::*;

use super::{add_dp_noise, aggregate, client_update, sample_clients, ClientState, FedConfig, LossParts, Upload};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Architecture, ModelParams, Network};
use crate::rng::{self, purpose};
use crate::watermark::{default_eps_h, verify_black, verify_white, DEFAULT_EPS_Y};

/// Per-client row of a round log. Losses are absent for clients not
/// selected in that round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientLog {
    pub client: usize,
    pub selected: bool,
    pub losses: Option<LossParts>,
    /// White-box detection rate of the client's signature on the new
    /// global model.
    pub eta: Option<f64>,
    pub trigger_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    /// 1-based index of the completed round.
    pub round: usize,
    pub selected: Vec<usize>,
    pub global_accuracy: f64,
    pub clients: Vec<ClientLog>,
}

#[derive(Debug, Clone)]
pub struct FedOutcome {
    pub params: ModelParams,
    pub logs: Vec<RoundLog>,
}

/// Runs `cfg.rounds` rounds of: sample clients, local updates (in
/// parallel), optional upload noise, weighted averaging. Client ids must be
/// exactly `0..cfg.clients`.
pub fn run_federation(
    cfg: &FedConfig,
    clients: &mut [ClientState],
    arch: &Architecture,
    init: ModelParams,
    train: &Dataset,
    test: &Dataset,
) -> Result<FedOutcome> {
    cfg.validate()?;
    if clients.len() != cfg.clients || clients.iter().enumerate().any(|(i, c)| c.client_id != i) {
        return Err(Error::config(format!(
            "expected clients with ids 0..{}, got {} states",
            cfg.clients,
            clients.len()
        )));
    }
    for c in clients.iter() {
        c.validate()?;
    }
    let mut global = Network::with_params(arch.clone(), init)?;
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let selected = sample_clients(cfg.clients, cfg.fraction, round, cfg.seed)?;
        let current = global.params().clone();
        let updates: Vec<(usize, LossParts, Upload)> = clients
            .par_iter_mut()
            .filter(|c| selected.binary_search(&c.client_id).is_ok())
            .map(|c| {
                let update = client_update(c, arch, &current, train, cfg, round)?;
                let seed = rng::derive_seed(cfg.seed, &[purpose::DP_NOISE, round as u64, c.client_id as u64]);
                let params = add_dp_noise(&update.params, cfg.dp_sigma, seed)?;
                Ok((
                    c.client_id,
                    update.losses,
                    Upload {
                        client_id: c.client_id,
                        params,
                        n_k: c.shard.len(),
                    },
                ))
            })
            .collect::<Result<_>>()?;
        let uploads: Vec<Upload> = updates.iter().map(|(_, _, u)| u.clone()).collect();
        global.set_params(aggregate(&uploads)?)?;

        let global_accuracy = global.accuracy(test.inputs(), test.labels())?;
        let client_logs = clients
            .iter()
            .map(|c| {
                let losses = updates.iter().find(|(id, _, _)| *id == c.client_id).map(|(_, l, _)| *l);
                let (mut eta, mut trigger_error) = (None, None);
                if let Some(key) = &c.key {
                    if let Some(f) = &key.feature {
                        eta = Some(verify_white(global.params(), f, default_eps_h(f.n_bits()))?.eta);
                    }
                    if let Some(t) = &key.triggers {
                        trigger_error = verify_black(&global, t, DEFAULT_EPS_Y)?.trigger_error;
                    }
                }
                Ok(ClientLog {
                    client: c.client_id,
                    selected: losses.is_some(),
                    losses,
                    eta,
                    trigger_error,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        logs.push(RoundLog {
            round: round + 1,
            selected,
            global_accuracy,
            clients: client_logs,
        });
    }
    Ok(FedOutcome {
        params: global.into_params(),
        logs,
    })
}

pub const ROUNDS_CSV_HEADER: &str =
    "round,client,selected,main_loss,trigger_loss,feature_loss,global_accuracy,eta,trigger_error";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per (round, client); empty cells for values that do not apply.
pub fn write_rounds_csv(logs: &[RoundLog], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{ROUNDS_CSV_HEADER}")?;
    for log in logs {
        for c in &log.clients {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                log.round,
                c.client,
                u8::from(c.selected),
                opt(c.losses.map(|l| l.main)),
                opt(c.losses.map(|l| l.trigger)),
                opt(c.losses.map(|l| l.feature)),
                log.global_accuracy,
                opt(c.eta),
                opt(c.trigger_error),
            )?;
        }
    }
    Ok(())
}
