//! Partitioning a dataset across federated clients.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMode {
    Iid,
    /// Per-class client proportions drawn from a symmetric Dirichlet with
    /// this concentration; small values concentrate labels.
    NonIid {
        concentration: f64,
    },
}

/// Rows of the training set owned by one client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Splits `ds` into `clients` shards. IID shards are a random equal
/// partition (sizes differ by at most one). Non-IID shards are never empty:
/// an empty client receives one sample from the largest shard.
pub fn split(ds: &Dataset, clients: usize, mode: SplitMode, seed: u64) -> Result<Vec<Shard>> {
    if clients == 0 || clients > ds.len() {
        return Err(Error::input(format!(
            "cannot split {} samples across {clients} clients",
            ds.len()
        )));
    }
    let mut rng = rng::rng_for(seed, &[purpose::SPLIT]);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); clients];
    match mode {
        SplitMode::Iid => {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut rng);
            let base = ds.len() / clients;
            let extra = ds.len() % clients;
            let mut start = 0;
            for (k, part) in parts.iter_mut().enumerate() {
                let size = base + usize::from(k < extra);
                part.extend_from_slice(&order[start..start + size]);
                start += size;
            }
        }
        SplitMode::NonIid { concentration } => {
            let gamma = Gamma::new(concentration, 1.0)
                .map_err(|_| Error::input(format!("invalid concentration {concentration}")))?;
            for class in 0..ds.classes() {
                let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == class).collect();
                if members.is_empty() {
                    continue;
                }
                members.shuffle(&mut rng);
                let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                let props: Vec<f64> = if total > 0.0 {
                    draws.iter().map(|d| d / total).collect()
                } else {
                    // Every gamma draw underflowed; give the class to one client.
                    let winner = rng.random_range(0..clients);
                    (0..clients).map(|k| if k == winner { 1.0 } else { 0.0 }).collect()
                };
                let n = members.len();
                let mut cum = 0.0;
                let mut start = 0;
                for (k, p) in props.iter().enumerate() {
                    cum += p;
                    let end = if k + 1 == clients {
                        n
                    } else {
                        ((cum * n as f64).round() as usize).min(n)
                    };
                    let end = end.max(start);
                    parts[k].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
            while let Some(empty) = parts.iter().position(|p| p.is_empty()) {
                let donor = (0..clients)
                    .max_by_key(|&k| (parts[k].len(), std::cmp::Reverse(k)))
                    .unwrap();
                let moved = parts[donor].pop().expect("donor holds at least two samples");
                parts[empty].push(moved);
            }
            for p in &mut parts {
                p.sort_unstable();
            }
        }
    }
    Ok(parts
        .into_iter()
        .enumerate()
        .map(|(client_id, indices)| Shard { client_id, indices })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, Synthetic};
    use proptest::prelude::*;

    fn blobs(classes: usize, per_class: usize) -> Dataset {
        make_synthetic(Synthetic::DEFAULT_BLOBS, classes, per_class, 3).unwrap()
    }

    #[test]
    fn single_client_gets_everything() {
        let ds = blobs(2, 10);
        let shards = split(&ds, 1, SplitMode::Iid, 0).unwrap();
        let mut idx = shards[0].indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn equal_iid_sizes() {
        let ds = blobs(4, 25);
        let sizes: Vec<usize> = split(&ds, 4, SplitMode::Iid, 1)
            .unwrap()
            .iter()
            .map(Shard::len)
            .collect();
        assert_eq!(sizes, vec![25; 4]);
    }

    #[test]
    fn too_many_clients() {
        assert!(matches!(
            split(&blobs(2, 2), 5, SplitMode::Iid, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn noniid_concentrates_labels() {
        // Two classes, concentration 0.1: the dominant label of a shard
        // should typically hold far more than half of it.
        let ds = blobs(2, 50);
        let mut fractions = Vec::new();
        for seed in 0..100 {
            let shards = split(&ds, 4, SplitMode::NonIid { concentration: 0.1 }, seed).unwrap();
            for s in &shards {
                assert!(!s.is_empty());
                let ones = s.indices.iter().filter(|&&i| ds.labels()[i] == 1).count();
                let frac = ones.max(s.len() - ones) as f64 / s.len() as f64;
                assert!(frac >= 0.5);
                fractions.push(frac);
            }
        }
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        assert!(mean > 0.85, "mean dominant-label fraction {mean}");
        // The IID split stays close to balanced.
        let iid = split(&ds, 4, SplitMode::Iid, 0).unwrap();
        for s in &iid {
            let ones = s.indices.iter().filter(|&&i| ds.labels()[i] == 1).count();
            assert!(ones.max(s.len() - ones) as f64 / (s.len() as f64) < 0.85);
        }
    }

    proptest! {
        #[test]
        fn shards_partition_the_dataset(
            per_class in 1usize..30,
            clients in 1usize..12,
            seed in any::<u64>(),
            noniid in any::<bool>(),
        ) {
            let ds = blobs(3, per_class);
            prop_assume!(clients <= ds.len());
            let mode = if noniid { SplitMode::NonIid { concentration: 0.3 } } else { SplitMode::Iid };
            let shards = split(&ds, clients, mode, seed).unwrap();
            prop_assert_eq!(shards.len(), clients);
            let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
            prop_assert!(shards.iter().all(|s| !s.is_empty()));
            if !noniid {
                let min = shards.iter().map(Shard::len).min().unwrap();
                let max = shards.iter().map(Shard::len).max().unwrap();
                prop_assert!(max - min <= 1);
            }
        }
    }
}
