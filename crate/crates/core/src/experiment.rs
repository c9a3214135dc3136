//! Scenario assembly: data, shards, keys and clients for one federated run.

use crate::data::{
    client_target, forge_pattern_triggers, forge_pgd_triggers, split, Dataset, PgdConfig, SplitMode, Synthetic,
    TriggerSet,
};
use crate::error::{Error, Result};
use crate::federation::{run_federation, ClientState, FedConfig, RoundLog};
use crate::nn::{Architecture, ModelParams, Network};
use crate::rng::{self, purpose};
use crate::train::{train_supervised, TrainOptions};
use crate::watermark::{keygen, EmbedMode, FeatureKey, KeygenSpec, Placement, RegLoss, WatermarkKey, DEFAULT_MARGIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchChoice {
    /// Two hidden blocks of width 16.
    Mlp,
    MiniCnn,
}

impl ArchChoice {
    pub fn name(self) -> &'static str {
        match self {
            ArchChoice::Mlp => "mlp",
            ArchChoice::MiniCnn => "cnn",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "mlp" => Some(ArchChoice::Mlp),
            "cnn" | "mini-cnn" => Some(ArchChoice::MiniCnn),
            _ => None,
        }
    }

    pub fn build(self, sample_shape: &[usize], classes: usize) -> Result<Architecture> {
        match (self, sample_shape) {
            (ArchChoice::Mlp, _) => Architecture::mlp(sample_shape.iter().product(), &[16, 16], classes),
            (ArchChoice::MiniCnn, &[c, h, w]) => Architecture::mini_cnn(c, h, w, classes),
            (ArchChoice::MiniCnn, s) => Err(Error::config(format!("cnn needs image inputs, data has shape {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePlan {
    pub bits: usize,
    pub mode: EmbedMode,
    pub loss: RegLoss,
    pub beta: f64,
    pub margin: f64,
    pub layers: Option<Vec<usize>>,
}

impl FeaturePlan {
    /// Defaults: weight 20 for hinge, 5 for BCE.
    pub fn new(bits: usize, mode: EmbedMode, loss: RegLoss) -> Self {
        let beta = match loss {
            RegLoss::Hinge => 20.0,
            RegLoss::Bce => 5.0,
        };
        Self {
            bits,
            mode,
            loss,
            beta,
            margin: DEFAULT_MARGIN,
            layers: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerKind {
    Pattern,
    Pgd,
}

impl TriggerKind {
    pub fn name(self) -> &'static str {
        match self {
            TriggerKind::Pattern => "pattern",
            TriggerKind::Pgd => "pgd",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "pattern" => Some(TriggerKind::Pattern),
            "pgd" => Some(TriggerKind::Pgd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerPlan {
    pub kind: TriggerKind,
    pub count: usize,
    pub alpha: f64,
}

impl TriggerPlan {
    pub fn new(kind: TriggerKind, count: usize) -> Self {
        Self {
            kind,
            count,
            alpha: 1.0,
        }
    }
}

/// What one client embeds; both parts optional.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientPlan {
    pub feature: Option<FeaturePlan>,
    pub trigger: Option<TriggerPlan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub arch: ArchChoice,
    pub data: Synthetic,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub split: SplitMode,
    pub fed: FedConfig,
    /// Indexed by client id; missing entries embed nothing.
    pub plans: Vec<ClientPlan>,
    pub pgd: PgdConfig,
    /// Local epochs used to train the vanilla model PGD triggers attack.
    pub vanilla_epochs: usize,
}

impl Default for Scenario {
    /// Blobs, MLP, 8 IID clients, nobody embedding.
    fn default() -> Self {
        Self {
            arch: ArchChoice::Mlp,
            data: Synthetic::DEFAULT_BLOBS,
            classes: 10,
            train_per_class: 100,
            test_per_class: 50,
            split: SplitMode::Iid,
            fed: FedConfig::default(),
            plans: Vec::new(),
            pgd: PgdConfig::default(),
            vanilla_epochs: 30,
        }
    }
}

impl Scenario {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.fed.seed = seed;
        self
    }

    pub fn plan(&self, client: usize) -> ClientPlan {
        self.plans.get(client).cloned().unwrap_or_default()
    }

    /// Sets the plan of every client in `clients`.
    pub fn assign(&mut self, clients: impl IntoIterator<Item = usize>, f: impl Fn(&mut ClientPlan)) {
        for c in clients {
            if self.plans.len() <= c {
                self.plans.resize(c + 1, ClientPlan::default());
            }
            f(&mut self.plans[c]);
        }
    }

    /// Copy with every signature and trigger plan removed.
    pub fn without_watermarks(&self) -> Self {
        Self {
            plans: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fed.validate()?;
        if self.plans.len() > self.fed.clients {
            return Err(Error::config(format!(
                "plans name {} clients but only {} exist",
                self.plans.len(),
                self.fed.clients
            )));
        }
        for (c, p) in self.plans.iter().enumerate() {
            if let Some(f) = &p.feature {
                if f.bits == 0 || !(f.beta >= 0.0) {
                    return Err(Error::config(format!(
                        "client {c}: feature needs bits > 0 and beta >= 0"
                    )));
                }
            }
            if let Some(t) = &p.trigger {
                if t.count == 0 || !(t.alpha >= 0.0) {
                    return Err(Error::config(format!(
                        "client {c}: trigger needs count > 0 and alpha >= 0"
                    )));
                }
            }
        }
        Ok(())
    }

    fn seed(&self, tags: &[u64]) -> u64 {
        rng::derive_seed(self.fed.seed, tags)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.arch.build(&self.data.sample_shape(), self.classes)
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let seed = self.seed(&[purpose::DATA]);
        Ok((
            self.data.generate(self.classes, self.train_per_class, seed, 0)?,
            self.data.generate(self.classes, self.test_per_class, seed, 1)?,
        ))
    }

    /// Held-out draw a client forges PGD triggers from.
    fn client_holdout(&self, client: usize) -> Result<Dataset> {
        let seed = self.seed(&[purpose::DATA]);
        self.data
            .generate(self.classes, self.test_per_class, seed, 2 + client as u64)
    }
}

/// Everything needed to start federated training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub arch: Architecture,
    pub train: Dataset,
    pub test: Dataset,
    pub clients: Vec<ClientState>,
    pub init: ModelParams,
    /// PGD success rate per client that forged PGD triggers.
    pub pgd_success: Vec<(usize, f64)>,
}

impl Prepared {
    pub fn keys(&self) -> Vec<WatermarkKey> {
        self.clients.iter().filter_map(|c| c.key.clone()).collect()
    }
}

/// Generates data, shards, keys and trigger sets. Scale-norm signatures
/// are laid out in consecutive windows of one shared permutation, in client
/// id order, so they are disjoint while their total fits the scale pool.
pub fn prepare(s: &Scenario) -> Result<Prepared> {
    s.validate()?;
    let (train, test) = s.datasets()?;
    let arch = s.arch.build(train.sample_shape(), s.classes)?;
    let shards = split(&train, s.fed.clients, s.split, s.seed(&[purpose::SPLIT]))?;
    let layout_seed = s.seed(&[purpose::LAYOUT]);
    let mut scale_offset = 0;
    let mut clients = Vec::with_capacity(s.fed.clients);
    let mut pgd_success = Vec::new();
    for shard in shards {
        let id = shard.client_id;
        let plan = s.plan(id);
        let key_seed = s.seed(&[purpose::KEYGEN, id as u64]);
        let feature = plan
            .feature
            .as_ref()
            .map(|f| -> Result<FeatureKey> {
                let mut spec = KeygenSpec::new(f.bits, f.mode, f.loss);
                spec.margin = f.margin;
                spec.layers = f.layers.clone();
                if f.mode == EmbedMode::ScaleNorm {
                    spec.placement = Placement::Window {
                        layout_seed,
                        offset: scale_offset,
                    };
                    scale_offset += f.bits;
                }
                keygen(&arch, id, &spec, key_seed)
            })
            .transpose()?;
        let triggers = match plan.trigger {
            None => None,
            Some(t) => Some(forge_for_client(
                s,
                &arch,
                &train,
                &shard.indices,
                id,
                t,
                key_seed,
                &mut pgd_success,
            )?),
        };
        let key = (feature.is_some() || triggers.is_some()).then_some(WatermarkKey {
            client_id: id,
            seed: key_seed,
            feature,
            triggers,
        });
        let alpha = plan.trigger.map(|t| t.alpha).unwrap_or(0.0);
        let beta = plan.feature.as_ref().map(|f| f.beta).unwrap_or(0.0);
        clients.push(ClientState::new(id, shard, key, alpha, beta));
    }
    let init = Network::new(arch.clone(), s.seed(&[purpose::INIT])).into_params();
    Ok(Prepared {
        arch,
        train,
        test,
        clients,
        init,
        pgd_success,
    })
}

#[allow(clippy::too_many_arguments)]
fn forge_for_client(
    s: &Scenario,
    arch: &Architecture,
    train: &Dataset,
    shard: &[usize],
    id: usize,
    plan: TriggerPlan,
    key_seed: u64,
    pgd_success: &mut Vec<(usize, f64)>,
) -> Result<TriggerSet> {
    let target = client_target(id, s.classes);
    let own = train.subset(shard)?;
    match plan.kind {
        TriggerKind::Pattern => forge_pattern_triggers(&own, plan.count, target, key_seed),
        TriggerKind::Pgd => {
            let mut vanilla = Network::new(arch.clone(), s.seed(&[purpose::VANILLA, id as u64]));
            let opts = TrainOptions {
                epochs: s.vanilla_epochs,
                batch: s.fed.batch,
                lr: s.fed.lr,
                momentum: s.fed.momentum,
                decay: 0.0,
            };
            train_supervised(&mut vanilla, &own, &opts, s.seed(&[purpose::VANILLA, id as u64, 1]))?;
            let out = forge_pgd_triggers(&vanilla, &s.client_holdout(id)?, plan.count, target, s.pgd, key_seed)?;
            pgd_success.push((id, out.success));
            Ok(out.triggers)
        }
    }
}

/// Result of one full federated run.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub arch: Architecture,
    pub train: Dataset,
    pub test: Dataset,
    /// Parameters before the first round.
    pub init: ModelParams,
    pub params: ModelParams,
    pub logs: Vec<RoundLog>,
    /// Keys of every embedding client, in client id order.
    pub keys: Vec<WatermarkKey>,
    pub pgd_success: Vec<(usize, f64)>,
}

impl ScenarioOutcome {
    pub fn network(&self) -> Network {
        Network::with_params(self.arch.clone(), self.params.clone()).expect("trained params fit arch")
    }

    pub fn test_accuracy(&self) -> f64 {
        self.network()
            .accuracy(self.test.inputs(), self.test.labels())
            .expect("test set fits arch")
    }
}

pub fn run_scenario(s: &Scenario) -> Result<ScenarioOutcome> {
    let Prepared {
        arch,
        train,
        test,
        mut clients,
        init,
        pgd_success,
    } = prepare(s)?;
    let out = run_federation(&s.fed, &mut clients, &arch, init.clone(), &train, &test)?;
    Ok(ScenarioOutcome {
        arch,
        train,
        test,
        init,
        params: out.params,
        logs: out.logs,
        keys: clients.into_iter().filter_map(|c| c.key).collect(),
        pgd_success,
    })
}
