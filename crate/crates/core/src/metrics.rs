//! Multi-seed sweeps over one experiment axis, their raw and summary CSVs,
//! and the chance-pass probability of white-box verification.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::attacks::{prune, PruneTarget, Snapshot};
use crate::error::{Error, Result};
use crate::experiment::{run_scenario, FeaturePlan, Scenario, ScenarioOutcome, TriggerPlan};
use crate::feasibility::capacity_bound;
use crate::nn::Network;
use crate::rng::{self, purpose};
use crate::watermark::{EmbedMode, WatermarkKey};

pub const DEFAULT_SEEDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Axis {
    BitLength,
    TriggerCount,
    Sigma,
    Fraction,
    PruneRate,
}

impl Axis {
    pub const ALL: [Axis; 5] = [
        Axis::BitLength,
        Axis::TriggerCount,
        Axis::Sigma,
        Axis::Fraction,
        Axis::PruneRate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::BitLength => "bits",
            Axis::TriggerCount => "triggers",
            Axis::Sigma => "sigma",
            Axis::Fraction => "fraction",
            Axis::PruneRate => "prune",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Accuracy,
    /// Mean white-box detection rate over feature-embedding clients.
    Eta,
    /// Mean `1 - trigger_error` over trigger-embedding clients.
    TriggerDetection,
    /// `Eta` of the keys against the untrained initial model.
    ControlEta,
    /// `TriggerDetection` against the untrained initial model.
    ControlDetection,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Accuracy,
        Metric::Eta,
        Metric::TriggerDetection,
        Metric::ControlEta,
        Metric::ControlDetection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Eta => "eta",
            Metric::TriggerDetection => "detection",
            Metric::ControlEta => "control_eta",
            Metric::ControlDetection => "control_detection",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

/// Every metric of one seed at one axis value; absent metrics have no
/// embedding client to measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: f64,
    pub seed: u64,
    pub scores: [Option<f64>; 5],
}

impl SweepRow {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.scores[metric as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryPoint {
    pub value: f64,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub axis: Axis,
    pub metric: Metric,
    /// Sorted by axis value.
    pub points: Vec<SummaryPoint>,
}

impl ExperimentSummary {
    pub fn from_rows(axis: Axis, metric: Metric, rows: &[SweepRow]) -> Self {
        let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.axis == axis) {
            if let Some(score) = r.get(metric) {
                groups
                    .entry(order_key(r.value))
                    .or_insert((r.value, Vec::new()))
                    .1
                    .push(score);
            }
        }
        let points = groups
            .into_values()
            .map(|(value, scores)| {
                let (mean, std) = mean_std(&scores);
                SummaryPoint {
                    value,
                    mean,
                    std,
                    n: scores.len(),
                }
            })
            .collect();
        Self { axis, metric, points }
    }

    pub fn point(&self, value: f64) -> Option<&SummaryPoint> {
        self.points.iter().find(|p| p.value == value)
    }
}

/// Monotone map of non-negative finite floats to integers for ordering.
fn order_key(v: f64) -> u64 {
    let bits = v.to_bits();
    if v.is_sign_negative() {
        !bits
    } else {
        bits | (1 << 63)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Base scenario plus the plans the bit and trigger axes install.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: Scenario,
    /// Clients `0..embedders` receive the feature or trigger template on
    /// the bit-length and trigger-count axes.
    pub embedders: usize,
    pub feature: FeaturePlan,
    pub trigger: TriggerPlan,
    pub seeds: Vec<u64>,
    pub prune_target: PruneTarget,
}

impl SweepSpec {
    pub fn new(base: Scenario, embedders: usize, feature: FeaturePlan, trigger: TriggerPlan, master_seed: u64) -> Self {
        Self {
            base,
            embedders,
            feature,
            trigger,
            seeds: sweep_seeds(master_seed, DEFAULT_SEEDS),
            prune_target: PruneTarget::default(),
        }
    }

    /// The scenario of one seed at one axis value. Value 0 on the bit and
    /// trigger axes is the unwatermarked baseline.
    pub fn scenario(&self, axis: Axis, value: f64, seed: u64) -> Result<Scenario> {
        let mut s = self.base.clone().with_seed(seed);
        match axis {
            Axis::BitLength | Axis::TriggerCount => {
                let n = count_value(axis, value)?;
                if n == 0 {
                    return Ok(s.without_watermarks());
                }
                let feature = FeaturePlan {
                    bits: n,
                    ..self.feature.clone()
                };
                let trigger = TriggerPlan {
                    count: n,
                    ..self.trigger
                };
                s.assign(0..self.embedders, |p| {
                    if axis == Axis::BitLength {
                        p.feature = Some(feature.clone());
                    } else {
                        p.trigger = Some(trigger);
                    }
                });
            }
            Axis::Sigma => s.fed.dp_sigma = value,
            Axis::Fraction => s.fed.fraction = value,
            Axis::PruneRate => {}
        }
        Ok(s)
    }
}

fn count_value(axis: Axis, value: f64) -> Result<usize> {
    if value < 0.0 || value.fract() != 0.0 {
        return Err(Error::input(format!(
            "{} axis needs whole numbers, got {value}",
            axis.name()
        )));
    }
    Ok(value as usize)
}

/// `n` seeds derived from the master seed.
pub fn sweep_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64)
        .map(|i| rng::derive_seed(master, &[purpose::SWEEP, i]))
        .collect()
}

/// Raw rows of a sweep plus the scale-norm capacity of its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
    pub capacity: Option<usize>,
}

impl SweepResult {
    pub fn summary(&self, metric: Metric) -> ExperimentSummary {
        ExperimentSummary::from_rows(self.axis, metric, &self.rows)
    }
}

fn measure(
    axis: Axis,
    value: f64,
    seed: u64,
    net: &Network,
    init: &Network,
    keys: &[WatermarkKey],
    test: &crate::data::Dataset,
) -> Result<SweepRow> {
    let trained = Snapshot::take(net, keys, test)?;
    let control = Snapshot::take(init, keys, test)?;
    let eta = |s: &Snapshot| crate_mean(s.eta.iter().map(|(_, _, e)| *e));
    let det = |s: &Snapshot| s.mean_trigger_error().map(|e| 1.0 - e);
    Ok(SweepRow {
        axis,
        value,
        seed,
        scores: [
            Some(trained.accuracy),
            eta(&trained),
            det(&trained),
            eta(&control),
            det(&control),
        ],
    })
}

fn crate_mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every (value, seed) pair of the sorted, deduplicated grid and
/// measures every applicable metric.
/// The pruning axis trains once per seed and prunes the result at each
/// rate. Rows are ordered by value, then seed.
pub fn run_sweep(spec: &SweepSpec, axis: Axis, values: &[f64]) -> Result<SweepResult> {
    if spec.seeds.is_empty() {
        return Err(Error::input("sweep needs at least one seed"));
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();

    let rows: Vec<Vec<SweepRow>> = if axis == Axis::PruneRate {
        let per_seed: Vec<Vec<(usize, SweepRow)>> = spec
            .seeds
            .par_iter()
            .map(|&seed| {
                let o = run_scenario(&spec.scenario(axis, 0.0, seed)?)?;
                let init = Network::with_params(o.arch.clone(), o.init.clone())?;
                values
                    .iter()
                    .enumerate()
                    .map(|(i, &rate)| {
                        let p = prune(
                            &o.params,
                            rate,
                            spec.prune_target,
                            rng::derive_seed(seed, &[purpose::PRUNE, i as u64]),
                        )?;
                        let net = Network::with_params(o.arch.clone(), p)?;
                        Ok((i, measure(axis, rate, seed, &net, &init, &o.keys, &o.test)?))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let mut by_value: Vec<Vec<SweepRow>> = vec![Vec::new(); values.len()];
        for seed_rows in per_seed {
            for (i, r) in seed_rows {
                by_value[i].push(r);
            }
        }
        by_value
    } else {
        let jobs: Vec<(f64, u64)> = values
            .iter()
            .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
            .collect();
        let rows: Vec<SweepRow> = jobs
            .par_iter()
            .map(|&(value, seed)| {
                let o = run_scenario(&spec.scenario(axis, value, seed)?)?;
                measure_outcome(axis, value, seed, &o)
            })
            .collect::<Result<_>>()?;
        vec![rows]
    };
    let capacity = capacity_bound(
        &spec.base.architecture()?,
        EmbedMode::ScaleNorm,
        spec.feature.layers.as_deref(),
    )
    .ok();
    Ok(SweepResult {
        axis,
        rows: rows.into_iter().flatten().collect(),
        capacity,
    })
}

fn measure_outcome(axis: Axis, value: f64, seed: u64, o: &ScenarioOutcome) -> Result<SweepRow> {
    let init = Network::with_params(o.arch.clone(), o.init.clone())?;
    measure(axis, value, seed, &o.network(), &init, &o.keys, &o.test)
}

/// Test accuracy against bit length (or trigger count), always including
/// the unwatermarked baseline at 0.
pub fn fidelity_sweep(spec: &SweepSpec, axis: Axis, values: &[f64]) -> Result<ExperimentSummary> {
    if !matches!(axis, Axis::BitLength | Axis::TriggerCount) {
        return Err(Error::input("fidelity sweeps run over bit length or trigger count"));
    }
    let mut grid = values.to_vec();
    grid.push(0.0);
    Ok(run_sweep(spec, axis, &grid)?.summary(Metric::Accuracy))
}

/// White-box detection rate against bit length per client.
pub fn reliability_sweep(spec: &SweepSpec, bit_lengths: &[f64]) -> Result<ExperimentSummary> {
    Ok(run_sweep(spec, Axis::BitLength, bit_lengths)?.summary(Metric::Eta))
}

/// Trigger detection rate against trigger count per client.
pub fn trigger_reliability_sweep(spec: &SweepSpec, counts: &[f64]) -> Result<ExperimentSummary> {
    Ok(run_sweep(spec, Axis::TriggerCount, counts)?.summary(Metric::TriggerDetection))
}

pub const RAW_CSV_HEADER: [&str; 8] = [
    "axis",
    "value",
    "seed",
    "accuracy",
    "eta",
    "detection",
    "control_eta",
    "control_detection",
];
pub const SUMMARY_CSV_HEADER: [&str; 6] = ["axis", "value", "metric", "mean", "std", "n"];

/// One row per (value, seed); empty cells for absent metrics.
pub fn write_raw_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RAW_CSV_HEADER)?;
    for r in rows {
        let mut rec = vec![r.axis.name().to_string(), r.value.to_string(), r.seed.to_string()];
        rec.extend(r.scores.iter().map(|s| s.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(summaries: &[ExperimentSummary], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_CSV_HEADER)?;
    for s in summaries {
        for p in &s.points {
            w.write_record([
                s.axis.name().to_string(),
                p.value.to_string(),
                s.metric.name().to_string(),
                p.mean.to_string(),
                p.std.to_string(),
                p.n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses a raw sweep CSV.
pub fn read_raw_csv(input: impl Read) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(RAW_CSV_HEADER) {
        return Err(Error::format("raw sweep CSV has an unexpected header"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != RAW_CSV_HEADER.len() {
            return Err(Error::format("sweep CSV record has the wrong field count"));
        }
        let bad = |what: &str| Error::format(format!("bad {what} in sweep CSV: {rec:?}"));
        let mut scores = [None; 5];
        for (i, cell) in rec.iter().skip(3).enumerate() {
            if !cell.is_empty() {
                scores[i] = Some(cell.parse().map_err(|_| bad("score"))?);
            }
        }
        rows.push(SweepRow {
            axis: Axis::from_name(&rec[0]).ok_or_else(|| bad("axis"))?,
            value: rec[1].parse().map_err(|_| bad("value"))?,
            seed: rec[2].parse().map_err(|_| bad("seed"))?,
            scores,
        });
    }
    Ok(rows)
}

/// Every (axis, metric) summary present in a raw sweep CSV.
pub fn summarize_csv(input: impl Read) -> Result<Vec<ExperimentSummary>> {
    let rows = read_raw_csv(input)?;
    let mut pairs: Vec<(Axis, Metric)> = rows
        .iter()
        .flat_map(|r| {
            Metric::ALL
                .into_iter()
                .filter(|m| r.get(*m).is_some())
                .map(|m| (r.axis, m))
        })
        .collect();
    pairs.sort();
    pairs.dedup();
    Ok(pairs
        .into_iter()
        .map(|(a, m)| ExperimentSummary::from_rows(a, m, &rows))
        .collect())
}

/// Largest length for which the exact tail sum fits a `u128`.
const EXACT_MAX_BITS: usize = 126;

/// Probability that `n` uniformly random bits lie within Hamming distance
/// `eps_h` of a fixed signature: `2^-n * sum_{i <= eps_h} C(n, i)`.
pub fn false_positive_analysis(n: usize, eps_h: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::input("signature length must be at least 1"));
    }
    if eps_h >= n {
        return Ok(1.0);
    }
    if n <= EXACT_MAX_BITS {
        let mut c: u128 = 1;
        let mut total: u128 = 1;
        for i in 1..=eps_h as u128 {
            c = c * (n as u128 + 1 - i) / i;
            total += c;
        }
        return Ok(total as f64 / 2f64.powi(n as i32));
    }
    let dist = Binomial::new(0.5, n as u64).map_err(|e| Error::input(e.to_string()))?;
    Ok(dist.cdf(eps_h as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(false_positive_analysis(8, 0).unwrap(), 1.0 / 256.0);
        assert_eq!(false_positive_analysis(32, 1).unwrap(), 33.0 / 2f64.powi(32));
        assert_eq!(false_positive_analysis(5, 5).unwrap(), 1.0);
        assert!(false_positive_analysis(0, 0).is_err());
    }

    #[test]
    fn large_n_uses_the_distribution() {
        let exact = false_positive_analysis(126, 40).unwrap();
        let dist = Binomial::new(0.5, 126).unwrap().cdf(40);
        assert!((exact - dist).abs() < 1e-10 * exact);
        let p = false_positive_analysis(500, 200).unwrap();
        assert!(p > 0.0 && p < 1e-4);
    }

    #[test]
    fn summary_sorts_and_uses_sample_std() {
        let row = |value, seed, score| SweepRow {
            axis: Axis::Sigma,
            value,
            seed,
            scores: [Some(score), None, None, None, None],
        };
        let rows = [row(0.3, 0, 1.0), row(0.1, 0, 2.0), row(0.1, 1, 4.0), row(0.3, 1, 1.0)];
        let s = ExperimentSummary::from_rows(Axis::Sigma, Metric::Accuracy, &rows);
        assert_eq!(s.points.len(), 2);
        assert_eq!(s.points[0].value, 0.1);
        assert_eq!(s.points[0].mean, 3.0);
        assert!((s.points[0].std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.points[1].std, 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![SweepRow {
            axis: Axis::BitLength,
            value: 8.0,
            seed: u64::MAX,
            scores: [Some(0.1 + 0.2), None, Some(1.0), None, Some(1e-300)],
        }];
        let mut buf = Vec::new();
        write_raw_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_raw_csv(buf.as_slice()).unwrap(), rows);
        assert!(read_raw_csv("a,b\n1,2\n".as_bytes()).is_err());
        let s = summarize_csv(buf.as_slice()).unwrap();
        let metrics: Vec<Metric> = s.iter().map(|x| x.metric).collect();
        assert_eq!(
            metrics,
            [Metric::Accuracy, Metric::TriggerDetection, Metric::ControlDetection]
        );
    }
}
