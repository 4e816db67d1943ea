//! Datasets, client partitioning strategies and the shard registry that
//! client functions download their local data from.

mod partition;
mod registry;
mod synthetic;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use partition::{
    partition, partition_iid, partition_per_user, partition_sorted_label, sample_user_sizes,
    split_train_test, PartitionPlan, PartitionStrategy, Shard,
};
pub use registry::{load_idx, read_shard_file, write_shard_file, ShardManifest, ShardStore};
pub use synthetic::SyntheticSpec;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("label {label} at row {row} is not below class count {classes}")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("{features} feature rows but {labels} labels")]
    RowMismatch { features: usize, labels: usize },
    #[error("cannot split {n} examples into {shards} shards")]
    TooManyShards { n: usize, shards: usize },
    #[error("user sizes sum to {requested} but only {available} examples exist")]
    Oversubscribed { requested: usize, available: usize },
    #[error("invalid test fraction {0}; must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("shard `{0}` too small to split into train and test")]
    ShardTooSmall(String),
    #[error("shard `{0}` not found")]
    NotFound(String),
    #[error("shard `{0}` already registered")]
    Duplicate(String),
    #[error("checksum mismatch for shard `{0}`")]
    Checksum(String),
    #[error("malformed data file: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Feature matrix `(N, d)` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(DataError::RowMismatch {
                features: features.rows(),
                labels: labels.len(),
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::LabelOutOfRange {
                row,
                label,
                classes,
            });
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.row_len()
    }

    /// Rows at `indices`, in that order. Panics on out-of-range indices.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
        )
    }

    /// Approximate in-memory size, used for memory accounting.
    pub fn byte_size(&self) -> usize {
        self.features.len() * 8 + self.labels.len() * 8
    }
}

/// A client's local data: a training set and an optional local test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub shard_id: String,
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl Partition {
    pub fn train_only(shard: Shard) -> Self {
        Self {
            shard_id: shard.shard_id,
            train: shard.data,
            test: None,
        }
    }

    pub fn cardinality(&self) -> usize {
        self.train.len()
    }

    pub fn test_cardinality(&self) -> usize {
        self.test.as_ref().map_or(0, Dataset::len)
    }

    pub fn byte_size(&self) -> usize {
        self.train.byte_size() + self.test.as_ref().map_or(0, Dataset::byte_size)
    }
}
