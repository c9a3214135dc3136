//! Run manifests: a flat `key = value` text format describing one
//! federated run, its attack schedule and an optional sweep.
//!
//! Blank lines and text after `#` are ignored. Keys may appear once.
//! Unknown keys are rejected. Global keys and their defaults:
//!
//! ```text
//! seed = 0                 arch = mlp            # mlp | mini-cnn
//! data = blobs             # blobs | textures
//! classes = 10             train_per_class = 100   test_per_class = 50
//! split = iid              # iid | non-iid
//! concentration = 0.5      # Dirichlet concentration for non-iid
//! clients = 8              fraction = 1.0          rounds = 60
//! local_epochs = 2         batch = 16              backdoor_batch = 2
//! lr = 0.01                momentum = 0.9          lr_decay = 0.99
//! dp_sigma = 0             vanilla_epochs = 30
//! pgd_eps = 0.3            pgd_lr = 0.01           pgd_iters = 80
//! output = out             # relative to the manifest's directory
//! ```
//!
//! Per-client keys take a client id or an inclusive range,
//! `client.<id>.<field>` or `client.<a>-<b>.<field>`:
//!
//! ```text
//! client.0-3.bits = 8          # feature signature length
//! client.0-3.mode = scale-norm # scale-norm | kernel
//! client.0-3.loss = hinge      # hinge | bce
//! client.0-3.beta = 20         # default 20 (hinge) or 5 (bce)
//! client.0-3.margin = 0.1
//! client.0-3.layers = 1,5      # layer indices to embed into
//! client.4-7.triggers = 10     # trigger set size
//! client.4-7.trigger_kind = pattern   # pattern | pgd
//! client.4-7.alpha = 1
//! ```
//!
//! Attack and sweep keys:
//!
//! ```text
//! attack.prune = 0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9
//! attack.prune_target = kernels       # kernels | kernels+scales
//! attack.finetune = 10,20,30,40,50   # an empty list disables
//! attack.finetune_lr = 0.0001         attack.finetune_decay = 0.01
//! sweep.axis = bits        # bits | triggers | sigma | fraction | prune
//! sweep.values = 4,8,16
//! sweep.seeds = 5          sweep.embedders = 4
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attacks::{AttackGrid, PruneTarget};
use crate::data::{SplitMode, Synthetic};
use crate::error::{Error, Result};
use crate::experiment::{ArchChoice, ClientPlan, FeaturePlan, Scenario, TriggerKind, TriggerPlan};
use crate::metrics::{sweep_seeds, Axis, SweepSpec, DEFAULT_SEEDS};
use crate::watermark::{EmbedMode, RegLoss};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub seeds: usize,
    pub embedders: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub scenario: Scenario,
    pub attack: AttackGrid,
    pub sweep: Option<SweepSettings>,
    pub output: PathBuf,
}

impl RunManifest {
    /// Sweep specification; the feature and trigger templates come from the
    /// first client plan that has them.
    pub fn sweep_spec(&self) -> Result<(SweepSpec, SweepSettings)> {
        let settings = self
            .sweep
            .clone()
            .ok_or_else(|| Error::config("manifest has no sweep.axis"))?;
        let feature = self
            .scenario
            .plans
            .iter()
            .find_map(|p| p.feature.clone())
            .unwrap_or_else(|| FeaturePlan::new(8, EmbedMode::ScaleNorm, RegLoss::Hinge));
        let trigger = self
            .scenario
            .plans
            .iter()
            .find_map(|p| p.trigger)
            .unwrap_or_else(|| TriggerPlan::new(TriggerKind::Pattern, 10));
        let mut spec = SweepSpec::new(
            self.scenario.clone(),
            settings.embedders,
            feature,
            trigger,
            self.scenario.fed.seed,
        );
        spec.seeds = sweep_seeds(self.scenario.fed.seed, settings.seeds);
        spec.prune_target = self.attack.prune_target;
        Ok((spec, settings))
    }
}

struct Entry {
    line: usize,
    value: String,
    used: bool,
}

struct Entries(BTreeMap<String, Entry>);

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some(e) = self.0.get_mut(key) else { return Ok(None) };
        e.used = true;
        e.value
            .parse()
            .map(Some)
            .map_err(|_| Error::config(format!("line {}: {key}: cannot parse {:?}", e.line, e.value)))
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn name<T>(&mut self, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        let Some(raw) = self.take::<String>(key)? else {
            return Ok(None);
        };
        parse(&raw)
            .map(Some)
            .ok_or_else(|| Error::config(format!("{key}: unknown value {raw:?}")))
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(raw) = self.take::<String>(key)? else {
            return Ok(None);
        };
        if raw.is_empty() {
            return Ok(Some(Vec::new()));
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("{key}: cannot parse {s:?}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }
}

fn parse_entries(text: &str) -> Result<Entries> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        let entry = Entry {
            line: i + 1,
            value: v.trim().to_string(),
            used: false,
        };
        if let Some(prev) = map.insert(key.clone(), entry) {
            return Err(Error::config(format!(
                "line {}: {key} already set on line {}",
                i + 1,
                prev.line
            )));
        }
    }
    Ok(Entries(map))
}

/// `client.<id>` or `client.<a>-<b>` prefix of a per-client key.
fn client_range(key: &str) -> Option<(usize, usize, &str)> {
    let rest = key.strip_prefix("client.")?;
    let (ids, field) = rest.split_once('.')?;
    let (a, b) = match ids.split_once('-') {
        Some((a, b)) => (a.parse().ok()?, b.parse().ok()?),
        None => {
            let a = ids.parse().ok()?;
            (a, a)
        }
    };
    (a <= b).then_some((a, b, field))
}

const CLIENT_FIELDS: [&str; 9] = [
    "bits",
    "mode",
    "loss",
    "beta",
    "margin",
    "layers",
    "triggers",
    "trigger_kind",
    "alpha",
];

#[derive(Default)]
struct ClientFields {
    bits: Option<usize>,
    mode: Option<EmbedMode>,
    loss: Option<RegLoss>,
    beta: Option<f64>,
    margin: Option<f64>,
    layers: Option<Vec<usize>>,
    triggers: Option<usize>,
    kind: Option<TriggerKind>,
    alpha: Option<f64>,
}

fn client_plans(entries: &mut Entries, clients: usize) -> Result<Vec<ClientPlan>> {
    let keys: Vec<String> = entries.0.keys().filter(|k| k.starts_with("client.")).cloned().collect();
    let mut fields: Vec<ClientFields> = (0..clients).map(|_| ClientFields::default()).collect();
    let mut owner: BTreeMap<(usize, String), String> = BTreeMap::new();
    for key in keys {
        let Some((a, b, field)) = client_range(&key) else {
            return Err(Error::config(format!("unknown key {key}")));
        };
        if !CLIENT_FIELDS.contains(&field) {
            return Err(Error::config(format!("unknown key {key}")));
        }
        if b >= clients {
            return Err(Error::config(format!(
                "{key}: client {b} does not exist ({clients} clients)"
            )));
        }
        for c in a..=b {
            if let Some(prev) = owner.insert((c, field.to_string()), key.clone()) {
                return Err(Error::config(format!(
                    "{key}: client {c} {field} already set by {prev}"
                )));
            }
        }
        let f = field.to_string();
        let apply = |c: &mut ClientFields, e: &mut Entries| -> Result<()> {
            match f.as_str() {
                "bits" => c.bits = e.take(&key)?,
                "mode" => c.mode = e.name(&key, EmbedMode::from_name)?,
                "loss" => c.loss = e.name(&key, RegLoss::from_name)?,
                "beta" => c.beta = e.take(&key)?,
                "margin" => c.margin = e.take(&key)?,
                "layers" => c.layers = e.list(&key)?,
                "triggers" => c.triggers = e.take(&key)?,
                "trigger_kind" => c.kind = e.name(&key, TriggerKind::from_name)?,
                _ => c.alpha = e.take(&key)?,
            }
            Ok(())
        };
        for c in &mut fields[a..=b] {
            apply(c, entries)?;
        }
    }
    fields
        .into_iter()
        .enumerate()
        .map(|(id, f)| {
            let feature_detail = f.mode.is_some() || f.loss.is_some() || f.margin.is_some() || f.layers.is_some();
            let feature = match f.bits {
                Some(bits) => {
                    let loss = f.loss.unwrap_or(RegLoss::Hinge);
                    let mut p = FeaturePlan::new(bits, f.mode.unwrap_or(EmbedMode::ScaleNorm), loss);
                    if let Some(b) = f.beta {
                        p.beta = b;
                    }
                    if let Some(m) = f.margin {
                        p.margin = m;
                    }
                    p.layers = f.layers;
                    Some(p)
                }
                None if f.beta.is_some_and(|b| b > 0.0) => {
                    return Err(Error::config(format!(
                        "client {id}: missing watermark spec: beta > 0 but client.{id}.bits is not set"
                    )))
                }
                None if feature_detail => {
                    return Err(Error::config(format!(
                        "client {id}: missing watermark spec: feature options given but client.{id}.bits is not set"
                    )))
                }
                None => None,
            };
            let trigger = match f.triggers {
                Some(count) => {
                    let mut t = TriggerPlan::new(f.kind.unwrap_or(TriggerKind::Pattern), count);
                    if let Some(a) = f.alpha {
                        t.alpha = a;
                    }
                    Some(t)
                }
                None if f.alpha.is_some_and(|a| a > 0.0) || f.kind.is_some() => {
                    return Err(Error::config(format!(
                        "client {id}: missing watermark spec: trigger options given but client.{id}.triggers is not set"
                    )))
                }
                None => None,
            };
            Ok(ClientPlan { feature, trigger })
        })
        .collect()
}

/// Parses and validates a manifest; `base` resolves a relative output path.
pub fn parse_manifest(text: &str, base: &Path) -> Result<RunManifest> {
    let mut e = parse_entries(text)?;
    let mut s = Scenario::default();
    e.set("seed", &mut s.fed.seed)?;
    if let Some(a) = e.name("arch", ArchChoice::from_name)? {
        s.arch = a;
    }
    if let Some(d) = e.name("data", |n| match n {
        "blobs" => Some(Synthetic::DEFAULT_BLOBS),
        "textures" => Some(Synthetic::DEFAULT_TEXTURES),
        _ => None,
    })? {
        s.data = d;
    }
    e.set("classes", &mut s.classes)?;
    e.set("train_per_class", &mut s.train_per_class)?;
    e.set("test_per_class", &mut s.test_per_class)?;
    let non_iid = e.name("split", |n| match n {
        "iid" => Some(false),
        "non-iid" => Some(true),
        _ => None,
    })?;
    let concentration: Option<f64> = e.take("concentration")?;
    s.split = match (non_iid, concentration) {
        (Some(true), c) => SplitMode::NonIid {
            concentration: c.unwrap_or(0.5),
        },
        (_, Some(_)) => return Err(Error::config("concentration: only valid with split = non-iid")),
        _ => SplitMode::Iid,
    };
    e.set("clients", &mut s.fed.clients)?;
    e.set("fraction", &mut s.fed.fraction)?;
    e.set("rounds", &mut s.fed.rounds)?;
    e.set("local_epochs", &mut s.fed.local_epochs)?;
    e.set("batch", &mut s.fed.batch)?;
    e.set("backdoor_batch", &mut s.fed.backdoor_batch)?;
    e.set("lr", &mut s.fed.lr)?;
    e.set("momentum", &mut s.fed.momentum)?;
    e.set("lr_decay", &mut s.fed.lr_decay)?;
    e.set("dp_sigma", &mut s.fed.dp_sigma)?;
    e.set("vanilla_epochs", &mut s.vanilla_epochs)?;
    e.set("pgd_eps", &mut s.pgd.eps)?;
    e.set("pgd_lr", &mut s.pgd.lr)?;
    e.set("pgd_iters", &mut s.pgd.iters)?;
    let output = e.take::<String>("output")?.unwrap_or_else(|| "out".into());

    let mut attack = AttackGrid {
        seed: s.fed.seed,
        ..AttackGrid::default()
    };
    if let Some(v) = e.list("attack.prune")? {
        attack.prune_rates = v;
    }
    if let Some(v) = e.list("attack.finetune")? {
        attack.finetune_epochs = v;
    }
    if let Some(t) = e.name("attack.prune_target", PruneTarget::from_name)? {
        attack.prune_target = t;
    }
    e.set("attack.finetune_lr", &mut attack.finetune.lr)?;
    e.set("attack.finetune_decay", &mut attack.finetune.decay)?;
    if attack.prune_rates.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::config("attack.prune: rates must lie in [0, 1]"));
    }

    let axis = e.name("sweep.axis", Axis::from_name)?;
    let values: Option<Vec<f64>> = e.list("sweep.values")?;
    let seeds: Option<usize> = e.take("sweep.seeds")?;
    let embedders: Option<usize> = e.take("sweep.embedders")?;
    let sweep = match axis {
        Some(axis) => Some(SweepSettings {
            axis,
            values: values.ok_or_else(|| Error::config("sweep.values: required with sweep.axis"))?,
            seeds: seeds.unwrap_or(DEFAULT_SEEDS),
            embedders: embedders.unwrap_or(s.fed.clients / 2),
        }),
        None if values.is_some() || seeds.is_some() || embedders.is_some() => {
            return Err(Error::config("sweep.axis: required when other sweep keys are set"))
        }
        None => None,
    };
    if let Some(sw) = &sweep {
        if sw.seeds == 0 || sw.embedders > s.fed.clients {
            return Err(Error::config(
                "sweep.seeds must be positive and sweep.embedders at most clients",
            ));
        }
    }

    s.plans = client_plans(&mut e, s.fed.clients)?;
    while s.plans.last().is_some_and(|p| *p == ClientPlan::default()) {
        s.plans.pop();
    }
    if let Some((key, entry)) = e.0.iter().filter(|(_, v)| !v.used).min_by_key(|(_, v)| v.line) {
        return Err(Error::config(format!("line {}: unknown key {key}", entry.line)));
    }
    s.validate()?;
    Ok(RunManifest {
        scenario: s,
        attack,
        sweep,
        output: base.join(output),
    })
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}
