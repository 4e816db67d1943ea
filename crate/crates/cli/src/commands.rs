use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use faasfl_core::clock::SimClock;
use faasfl_core::controller::{
    federated_eval_aggregate, read_metrics_csv, select_clients, ControllerError, EvaluationMode, FederationBuilder,
    SessionConfig,
};
use faasfl_core::cost::{client_records, compare, cost_curve, write_cost_csv, CostModel};
use faasfl_core::data::{
    self as data, sample_user_sizes, split_train_test, write_shard_file, DataError, Partition, PartitionPlan,
    PartitionStrategy, Shard,
};
use faasfl_core::fabric::{read_records_csv, write_records_csv, FabricConfig};
use faasfl_core::seed::derive_seed;
use faasfl_core::store::{EvalMetrics, ParamStore, StoreConfig};
use faasfl_core::tensor::evaluate as evaluate_model;
use serde_json::{json, Value};

use crate::dataset::{self, CENTRAL_TEST_ID};
use crate::{CostArgs, EvalMode, EvaluateArgs, PartitionArgs, RunArgs, Strategy};

/// Error reported as `{"error": kind, "message": message}`.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn data(e: DataError) -> Self {
        Self::new("data", e.to_string())
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }
}

impl From<ControllerError> for CliError {
    fn from(e: ControllerError) -> Self {
        let kind = match &e {
            ControllerError::Config(_) => "config",
            ControllerError::Io(_) => "io",
            ControllerError::Store(_) => "store",
            ControllerError::Fabric(_) => "fabric",
            _ => "controller",
        };
        Self::new(kind, e.to_string())
    }
}

fn make_shards(a: &PartitionArgs, train: &faasfl_core::data::Dataset) -> Result<Vec<Shard>, CliError> {
    let strategy = match a.strategy {
        Strategy::Sorted => PartitionStrategy::SortedLabelShards,
        Strategy::User => PartitionStrategy::PerUser,
        Strategy::Iid => PartitionStrategy::IidUniform,
    };
    let user_sizes = if a.strategy == Strategy::User {
        if !(a.user_mean.is_finite() && a.user_mean >= 1.0 && a.user_sigma.is_finite() && a.user_sigma >= 0.0) {
            return Err(CliError::new("usage", "user-mean must be >= 1 and user-sigma >= 0"));
        }
        Some(sample_user_sizes(a.shards, a.user_mean, a.user_sigma, a.seed))
    } else {
        None
    };
    let plan = PartitionPlan {
        strategy,
        shard_count: a.shards,
        seed: a.seed,
        user_sizes,
    };
    data::partition(train, &plan).map_err(CliError::data)
}

pub fn partition(a: &PartitionArgs) -> Result<Value, CliError> {
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(CliError::new("usage", "test-fraction must lie in [0, 1)"));
    }
    let (train, test) = dataset::load(&a.dataset, a.classes, a.seed)?;
    let shards = make_shards(a, &train)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let mut cardinalities = Vec::with_capacity(shards.len());
    for shard in &shards {
        let p = if a.test_fraction > 0.0 {
            let seed = derive_seed(&[b"split", shard.shard_id.as_bytes(), &a.seed.to_le_bytes()]);
            split_train_test(shard, a.test_fraction, seed).map_err(CliError::data)?
        } else {
            Partition::train_only(shard.clone())
        };
        cardinalities.push(p.cardinality());
        write_shard_file(&a.out, &p).map_err(CliError::data)?;
    }
    let central = match test {
        Some(ds) => {
            let p = Partition {
                shard_id: CENTRAL_TEST_ID.to_string(),
                train: ds.clone(),
                test: Some(ds),
            };
            write_shard_file(&a.out, &p).map_err(CliError::data)?;
            Some(CENTRAL_TEST_ID)
        }
        None => None,
    };
    Ok(json!({
        "shards": shards.len(),
        "examples": cardinalities.iter().sum::<usize>(),
        "min_cardinality": cardinalities.iter().min(),
        "max_cardinality": cardinalities.iter().max(),
        "central_test": central,
        "out": a.out.display().to_string(),
    }))
}

pub fn run(a: &RunArgs) -> Result<Value, CliError> {
    let text = fs::read_to_string(&a.config).map_err(|e| CliError::io(&a.config, e))?;
    let mut config = SessionConfig::from_toml(&text)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let fabric = match &a.fabric {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            FabricConfig::from_toml(&text).map_err(|e| CliError::new("config", e.to_string()))?
        }
        None => FabricConfig::default(),
    };
    let central_id = match &config.evaluation {
        EvaluationMode::Central { shard_id } => Some(shard_id.clone()),
        EvaluationMode::Federated { .. } => None,
    };
    let ids: Vec<String> = dataset::shard_ids(&a.shards)?
        .into_iter()
        .filter(|id| Some(id) != central_id.as_ref() && id != CENTRAL_TEST_ID)
        .collect();
    if ids.len() < config.total_clients {
        return Err(CliError::new(
            "config",
            format!("{} client shards in {} for {} clients", ids.len(), a.shards.display(), config.total_clients),
        ));
    }
    let partitions = ids[..config.total_clients]
        .iter()
        .map(|id| dataset::read_shard(&a.shards, id))
        .collect::<Result<Vec<_>, _>>()?;

    let session = config.session_id.clone();
    let mut builder = FederationBuilder::new(config, partitions)
        .fabric_config(fabric)
        .shard_latency(a.shard_latency)
        .metrics_log(&a.metrics);
    if let Some(id) = &central_id {
        builder = builder.central_test(dataset::read_shard(&a.shards, id)?);
    }
    if let Some(dir) = &a.store {
        builder = builder.store_dir(dir);
    }
    let mut fed = builder.build()?;
    let reports = fed.run()?;
    if let Some(path) = &a.trace {
        let f = File::create(path).map_err(|e| CliError::io(path, e))?;
        write_records_csv(BufWriter::new(f), &fed.fabric.records()).map_err(|e| CliError::io(path, e))?;
    }
    let last = reports.last();
    Ok(json!({
        "session": session,
        "rounds": reports.len(),
        "version": reports.iter().rev().find_map(|r| r.version),
        "accuracy": last.and_then(|r| r.global_metrics).map(|m| m.accuracy),
        "loss": last.and_then(|r| r.global_metrics).map(|m| m.loss),
        "wall_time_s": last.map_or(0.0, |r| r.end_s()),
        "invocations": fed.fabric.records().len(),
    }))
}

pub fn evaluate(a: &EvaluateArgs) -> Result<Value, CliError> {
    let clock = Arc::new(SimClock::new(0.0));
    let (store, admin) = ParamStore::open_dir(StoreConfig::default(), &a.store, clock)
        .map_err(|e| CliError::new("store", e.to_string()))?;
    let store_err = |e: faasfl_core::store::StoreError| CliError::new("store", e.to_string());
    let model = store.model_spec(&admin, &a.session).map_err(store_err)?;
    let version = store
        .global_version(&a.session)
        .map_err(store_err)?
        .ok_or_else(|| CliError::new("store", format!("session `{}` has no global model", a.session)))?;
    let params = store.get_global_model(&admin, &a.session).map_err(store_err)?;
    let eval = |ds: &faasfl_core::data::Dataset| {
        evaluate_model(&model, &params, ds.features(), ds.labels()).map_err(|e| CliError::new("model", e.to_string()))
    };

    let (metrics, clients) = match a.mode {
        EvalMode::Central => {
            let p = dataset::read_shard(&a.shards, &a.central_shard)?;
            let ds = p.test.as_ref().unwrap_or(&p.train);
            let m = eval(ds)?;
            (json!({ "loss": m.loss, "accuracy": m.accuracy, "examples": ds.len() }), None)
        }
        EvalMode::Federated => {
            let ids: Vec<String> = dataset::shard_ids(&a.shards)?
                .into_iter()
                .filter(|id| id != &a.central_shard)
                .collect();
            let chosen = match a.clients {
                Some(k) => select_clients(&ids, k, a.seed)?,
                None => ids,
            };
            let mut per_client = Vec::with_capacity(chosen.len());
            for id in &chosen {
                let p = dataset::read_shard(&a.shards, id)?;
                let ds = p
                    .test
                    .as_ref()
                    .ok_or_else(|| CliError::new("data", format!("shard `{id}` has no test split")))?;
                let m = eval(ds)?;
                per_client.push(EvalMetrics {
                    loss: m.loss,
                    accuracy: m.accuracy,
                    test_cardinality: ds.len(),
                });
            }
            let g = federated_eval_aggregate(&per_client)?;
            let examples: usize = per_client.iter().map(|m| m.test_cardinality).sum();
            (json!({ "loss": g.loss, "accuracy": g.accuracy, "examples": examples }), Some(chosen.len()))
        }
    };
    let mut out = json!({
        "session": a.session,
        "version": version,
        "mode": match a.mode { EvalMode::Central => "central", EvalMode::Federated => "federated" },
        "clients": clients,
    });
    if let (Value::Object(o), Value::Object(m)) = (&mut out, metrics) {
        o.extend(m);
    }
    Ok(out)
}

pub fn estimate_cost(a: &CostArgs) -> Result<Value, CliError> {
    let text = fs::read_to_string(&a.prices).map_err(|e| CliError::io(&a.prices, e))?;
    let model = CostModel::from_toml(&text).map_err(|e| CliError::new("prices", e.to_string()))?;
    if a.multipliers.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(CliError::new("usage", "multipliers must be finite and >= 0"));
    }
    let trace = File::open(&a.trace).map_err(|e| CliError::io(&a.trace, e))?;
    let mut records = read_records_csv(trace).map_err(|e| CliError::new("trace", e.to_string()))?;
    if !a.all_functions {
        records = client_records(&records);
    }
    let metrics_file = File::open(&a.wall_time_from).map_err(|e| CliError::io(&a.wall_time_from, e))?;
    let metrics = read_metrics_csv(metrics_file).map_err(|e| CliError::new("metrics", e.to_string()))?;
    let wall = metrics.iter().map(|m| m.timestamp).fold(0.0, f64::max);
    let estimate = compare(&records, wall, &model, &a.multipliers);
    let rows = cost_curve(&records, &metrics, &model, &a.targets, &a.multipliers);
    let out = File::create(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    write_cost_csv(BufWriter::new(out), &rows).map_err(|e| CliError::new("io", e.to_string()))?;
    let mut summary = serde_json::to_value(&estimate).map_err(|e| CliError::new("io", e.to_string()))?;
    if let Value::Object(o) = &mut summary {
        o.insert("wall_time_s".into(), json!(wall));
        o.insert("invocations".into(), json!(records.len()));
        o.insert("rows".into(), json!(rows.len()));
    }
    Ok(summary)
}
