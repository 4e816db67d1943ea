use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use faasfl_core::data::{load_idx, read_shard_file, Dataset, SyntheticSpec};
use serde::Deserialize;

use crate::commands::CliError;

/// Shard id the central test set is written under.
pub const CENTRAL_TEST_ID: &str = "central-test";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticFile {
    features: usize,
    classes: usize,
    train: usize,
    #[serde(default)]
    test: usize,
    separation: Option<f64>,
    noise: Option<f64>,
}

fn synthetic(cfg: SyntheticFile, seed: u64) -> Result<(Dataset, Option<Dataset>), CliError> {
    let mut spec = SyntheticSpec::new(cfg.features, cfg.classes, seed);
    if let Some(s) = cfg.separation {
        spec.separation = s;
    }
    if let Some(n) = cfg.noise {
        spec.noise = n;
    }
    if !(spec.separation.is_finite() && spec.separation >= 0.0 && spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(CliError::new("dataset", "separation and noise must be finite and >= 0"));
    }
    let train = spec.generate(cfg.train, 0).map_err(CliError::data)?;
    let test = match cfg.test {
        0 => None,
        n => Some(spec.generate(n, 1).map_err(CliError::data)?),
    };
    Ok((train, test))
}

fn parse_kv(body: &str) -> Result<SyntheticFile, CliError> {
    let mut map = BTreeMap::new();
    for pair in body.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::new("dataset", format!("expected key=value, got `{pair}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    // reuse the TOML schema so both forms accept the same keys
    let text: String = map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    toml::from_str(&text).map_err(|e| CliError::new("dataset", e.to_string()))
}

/// Training set plus an optional central test set.
pub fn load(spec: &str, classes: usize, seed: u64) -> Result<(Dataset, Option<Dataset>), CliError> {
    if let Some(body) = spec.strip_prefix("synthetic:") {
        return synthetic(parse_kv(body)?, seed);
    }
    if let Some(body) = spec.strip_prefix("idx:") {
        let files: Vec<&str> = body.split(',').collect();
        return match files.as_slice() {
            [x, y] => Ok((load_idx(Path::new(x), Path::new(y), classes).map_err(CliError::data)?, None)),
            [x, y, tx, ty] => Ok((
                load_idx(Path::new(x), Path::new(y), classes).map_err(CliError::data)?,
                Some(load_idx(Path::new(tx), Path::new(ty), classes).map_err(CliError::data)?),
            )),
            _ => Err(CliError::new("dataset", "idx: expects 2 or 4 comma separated files")),
        };
    }
    let text = fs::read_to_string(spec).map_err(|e| CliError::new("io", format!("{spec}: {e}")))?;
    let cfg: SyntheticFile = toml::from_str(&text).map_err(|e| CliError::new("dataset", e.to_string()))?;
    synthetic(cfg, seed)
}

/// Shard ids in `dir`, sorted, as named by their JSON manifests.
pub fn shard_ids(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))? {
        let path = entry.map_err(|e| CliError::new("io", e.to_string()))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_shard(dir: &Path, id: &str) -> Result<faasfl_core::data::Partition, CliError> {
    read_shard_file(dir, id).map_err(|e| CliError::new("data", format!("shard `{id}`: {e}")))
}
