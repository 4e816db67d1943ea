use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Partition, Result};

/// A raw client shard before the local train/test split. `indices` refer to
/// rows of the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub shard_id: String,
    pub indices: Vec<usize>,
    pub data: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    SortedLabelShards,
    PerUser,
    IidUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub strategy: PartitionStrategy,
    pub shard_count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Explicit per-user sizes; sampled log-normally when absent.
    #[serde(default)]
    pub user_sizes: Option<Vec<usize>>,
}

pub fn shard_id(k: usize) -> String {
    format!("shard-{k:04}")
}

fn build_shards(ds: &Dataset, groups: Vec<Vec<usize>>) -> Result<Vec<Shard>> {
    groups
        .into_iter()
        .enumerate()
        .map(|(k, indices)| {
            Ok(Shard {
                shard_id: shard_id(k),
                data: ds.subset(&indices)?,
                indices,
            })
        })
        .collect()
}

/// Splits `order` into `shards` contiguous runs; the first `len % shards`
/// runs get one extra element.
fn contiguous(order: &[usize], shards: usize) -> Vec<Vec<usize>> {
    let base = order.len() / shards;
    let extra = order.len() % shards;
    let mut out = Vec::with_capacity(shards);
    let mut start = 0;
    for k in 0..shards {
        let len = base + usize::from(k < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    out
}

fn check_count(n: usize, shards: usize) -> Result<()> {
    if shards == 0 || shards > n {
        return Err(DataError::TooManyShards { n, shards });
    }
    Ok(())
}

/// Stable sort by label, then contiguous equal-size shards. Produces the
/// pathological non-IID split where most shards hold one or two labels.
pub fn partition_sorted_label(ds: &Dataset, shard_count: usize) -> Result<Vec<Shard>> {
    check_count(ds.len(), shard_count)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| ds.labels()[i]);
    build_shards(ds, contiguous(&order, shard_count))
}

pub fn partition_iid(ds: &Dataset, shard_count: usize, seed: u64) -> Result<Vec<Shard>> {
    check_count(ds.len(), shard_count)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    build_shards(ds, contiguous(&order, shard_count))
}

/// Seeded shuffle, then consecutive runs of exactly `user_sizes[k]` rows.
pub fn partition_per_user(ds: &Dataset, user_sizes: &[usize], seed: u64) -> Result<Vec<Shard>> {
    let requested: usize = user_sizes.iter().sum();
    if requested > ds.len() {
        return Err(DataError::Oversubscribed {
            requested,
            available: ds.len(),
        });
    }
    if user_sizes.contains(&0) {
        return Err(DataError::Empty);
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut start = 0;
    let groups = user_sizes
        .iter()
        .map(|&len| {
            let g = order[start..start + len].to_vec();
            start += len;
            g
        })
        .collect();
    build_shards(ds, groups)
}

/// Log-normal user sizes with the given arithmetic mean; each at least 1.
pub fn sample_user_sizes(users: usize, mean: f64, sigma: f64, seed: u64) -> Vec<usize> {
    // E[X] = exp(mu + sigma^2 / 2)
    let mu = mean.ln() - sigma * sigma / 2.0;
    let dist = LogNormal::new(mu, sigma).expect("valid log-normal parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..users)
        .map(|_| (dist.sample(&mut rng).round() as usize).max(1))
        .collect()
}

pub fn partition(ds: &Dataset, plan: &PartitionPlan) -> Result<Vec<Shard>> {
    match plan.strategy {
        PartitionStrategy::SortedLabelShards => partition_sorted_label(ds, plan.shard_count),
        PartitionStrategy::IidUniform => partition_iid(ds, plan.shard_count, plan.seed),
        PartitionStrategy::PerUser => {
            let sizes = match &plan.user_sizes {
                Some(s) => s.clone(),
                None => {
                    let mean = ds.len() as f64 / plan.shard_count as f64;
                    let mut sizes = sample_user_sizes(plan.shard_count, mean * 0.8, 0.5, plan.seed);
                    // Scale down if the draw oversubscribes the dataset.
                    let total: usize = sizes.iter().sum();
                    if total > ds.len() {
                        let f = ds.len() as f64 / total as f64;
                        sizes.iter_mut().for_each(|s| *s = ((*s as f64 * f) as usize).max(1));
                    }
                    sizes
                }
            };
            partition_per_user(ds, &sizes, plan.seed)
        }
    }
}

/// Seeded split into a training set and a local test set with
/// `round(test_fraction * N)` rows (at least one, leaving at least one for
/// training).
pub fn split_train_test(shard: &Shard, test_fraction: f64, seed: u64) -> Result<Partition> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::BadFraction(test_fraction));
    }
    let n = shard.data.len();
    if n < 2 {
        return Err(DataError::ShardTooSmall(shard.shard_id.clone()));
    }
    let test_n = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test_idx, train_idx) = order.split_at(test_n);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(Partition {
        shard_id: shard.shard_id.clone(),
        train: shard.data.subset(&train_idx)?,
        test: Some(shard.data.subset(&test_idx)?),
    })
}
