use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, Dataset, Partition, Result};
use crate::tensor::{decode_parameter_set, encode_parameter_set, ParameterSet, Tensor};

/// Sidecar written next to every shard file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardManifest {
    pub shard_id: String,
    pub cardinality: usize,
    pub test_cardinality: usize,
    /// Hex SHA-256 of the shard file.
    pub checksum: String,
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn labels_tensor(ds: &Dataset) -> Tensor {
    Tensor::new(
        vec![ds.len()],
        ds.labels().iter().map(|&l| l as f64).collect(),
    )
    .expect("label vector")
}

fn encode_partition(p: &Partition) -> Vec<u8> {
    let mut entries = vec![
        (
            "classes".to_string(),
            Tensor::new(vec![1], vec![p.train.classes() as f64]).expect("scalar"),
        ),
        ("train_x".to_string(), p.train.features().clone()),
        ("train_y".to_string(), labels_tensor(&p.train)),
    ];
    if let Some(test) = &p.test {
        entries.push(("test_x".to_string(), test.features().clone()));
        entries.push(("test_y".to_string(), labels_tensor(test)));
    }
    encode_parameter_set(&ParameterSet::new(entries).expect("unique names"))
}

fn dataset_from(ps: &ParameterSet, x: &str, y: &str, classes: usize) -> Result<Dataset> {
    let labels = ps
        .tensor(y)?
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(DataError::Format(format!("non-integer label {v}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(ps.tensor(x)?.clone(), labels, classes)
}

fn decode_partition(shard_id: &str, bytes: &[u8]) -> Result<Partition> {
    let ps = decode_parameter_set(bytes)?;
    let classes = ps.tensor("classes")?.data()[0] as usize;
    let train = dataset_from(&ps, "train_x", "train_y", classes)?;
    let test = match ps.get("test_x") {
        Some(_) => Some(dataset_from(&ps, "test_x", "test_y", classes)?),
        None => None,
    };
    Ok(Partition {
        shard_id: shard_id.to_string(),
        train,
        test,
    })
}

/// Writes `<dir>/<shard_id>.bin` and `<dir>/<shard_id>.json`.
pub fn write_shard_file(dir: &Path, partition: &Partition) -> Result<ShardManifest> {
    fs::create_dir_all(dir)?;
    let bytes = encode_partition(partition);
    let manifest = ShardManifest {
        shard_id: partition.shard_id.clone(),
        cardinality: partition.cardinality(),
        test_cardinality: partition.test_cardinality(),
        checksum: hex_digest(&bytes),
    };
    fs::write(dir.join(format!("{}.bin", partition.shard_id)), &bytes)?;
    fs::write(
        dir.join(format!("{}.json", partition.shard_id)),
        serde_json::to_vec_pretty(&manifest).map_err(|e| DataError::Format(e.to_string()))?,
    )?;
    Ok(manifest)
}

pub fn read_shard_file(dir: &Path, shard_id: &str) -> Result<Partition> {
    let manifest: ShardManifest =
        serde_json::from_slice(&fs::read(dir.join(format!("{shard_id}.json")))?)
            .map_err(|e| DataError::Format(e.to_string()))?;
    let bytes = fs::read(dir.join(format!("{shard_id}.bin")))?;
    if hex_digest(&bytes) != manifest.checksum {
        return Err(DataError::Checksum(shard_id.to_string()));
    }
    let p = decode_partition(shard_id, &bytes)?;
    if p.cardinality() != manifest.cardinality || p.test_cardinality() != manifest.test_cardinality {
        return Err(DataError::Format(format!(
            "cardinality of `{shard_id}` disagrees with its manifest"
        )));
    }
    Ok(p)
}

/// Read-mostly registry of immutable client shards, keyed by id.
///
/// Fetching a shard reports a configurable latency that the fabric charges
/// to the calling invocation, standing in for a remote download.
#[derive(Debug, Default)]
pub struct ShardStore {
    shards: RwLock<BTreeMap<String, Arc<Partition>>>,
    default_latency_s: f64,
    latency_overrides: RwLock<HashMap<String, f64>>,
}

impl ShardStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_latency(latency_s: f64) -> Self {
        Self {
            default_latency_s: latency_s,
            ..Self::default()
        }
    }

    pub fn register(&self, partition: Partition) -> Result<()> {
        let mut shards = self.shards.write().expect("shard registry poisoned");
        if shards.contains_key(&partition.shard_id) {
            return Err(DataError::Duplicate(partition.shard_id));
        }
        shards.insert(partition.shard_id.clone(), Arc::new(partition));
        Ok(())
    }

    pub fn serve_shard(&self, shard_id: &str) -> Result<Arc<Partition>> {
        self.shards
            .read()
            .expect("shard registry poisoned")
            .get(shard_id)
            .cloned()
            .ok_or_else(|| DataError::NotFound(shard_id.to_string()))
    }

    /// Unregisters a shard. Instances that already cached it keep their copy.
    pub fn remove(&self, shard_id: &str) -> Option<Arc<Partition>> {
        self.shards.write().expect("shard registry poisoned").remove(shard_id)
    }

    pub fn list_shards(&self) -> Vec<String> {
        self.shards
            .read()
            .expect("shard registry poisoned")
            .keys()
            .cloned()
            .collect()
    }

    pub fn set_latency(&self, shard_id: &str, latency_s: f64) {
        self.latency_overrides
            .write()
            .expect("latency table poisoned")
            .insert(shard_id.to_string(), latency_s);
    }

    /// Simulated download time for one fetch of `shard_id`.
    pub fn latency_s(&self, shard_id: &str) -> f64 {
        self.latency_overrides
            .read()
            .expect("latency table poisoned")
            .get(shard_id)
            .copied()
            .unwrap_or(self.default_latency_s)
    }

    /// Registers every `*.json` manifest found in `dir`.
    pub fn load_dir(&self, dir: &Path) -> Result<usize> {
        let mut ids: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".json").map(str::to_string)
            })
            .collect();
        ids.sort();
        for id in &ids {
            self.register(read_shard_file(dir, id)?)?;
        }
        Ok(ids.len())
    }
}

/// Reads an IDX image file (magic 0x803) and label file (magic 0x801),
/// scaling pixels to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    fn be_u32(b: &[u8], at: usize) -> Result<usize> {
        b.get(at..at + 4)
            .map(|s| u32::from_be_bytes(s.try_into().expect("4 bytes")) as usize)
            .ok_or_else(|| DataError::Format("truncated IDX header".into()))
    }
    let img = fs::read(images)?;
    let lab = fs::read(labels)?;
    if be_u32(&img, 0)? != 0x803 || be_u32(&lab, 0)? != 0x801 {
        return Err(DataError::Format("bad IDX magic".into()));
    }
    let n = be_u32(&img, 4)?;
    let pixels = be_u32(&img, 8)? * be_u32(&img, 12)?;
    if be_u32(&lab, 4)? != n || img.len() != 16 + n * pixels || lab.len() != 8 + n {
        return Err(DataError::Format("IDX sizes disagree".into()));
    }
    let x = img[16..].iter().map(|&p| p as f64 / 255.0).collect();
    let y = lab[8..].iter().map(|&l| l as usize).collect();
    Dataset::new(Tensor::new(vec![n, pixels], x)?, y, classes)
}
