//! The orchestration loop: client registry, random selection, concurrent
//! client invocation with a per-client deadline, aggregation, evaluation and
//! the metrics log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io;
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{AggregateRequest, AggregateResponse, AggregationMode, DEFAULT_AGGREGATION_BATCH};
use crate::auth::{AuthError, AuthServer, ServerCredentials};
use crate::client::{ClientHyperparameters, ClientRequest, ClientResponse, EvaluateRequest, TrainRequest};
use crate::clock::{Clock, SimClock};
use crate::fabric::{Fabric, FabricError, Invocation, Outcome};
use crate::seed::derive_seed;
use crate::store::{EvalMetrics, Grant, ParamStore, StoreCredential, StoreError};
use crate::tensor::{glorot_init, ModelSpec, TensorError};

mod builder;

pub use builder::{client_id, Federation, FederationBuilder, HandlerWrapper};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid session config: {0}")]
    Config(String),
    #[error("cannot select {k} of {available} clients")]
    Selection { k: usize, available: usize },
    #[error("no metrics to aggregate")]
    EmptyMetrics,
    #[error("client `{0}` is already registered")]
    DuplicateClient(String),
    #[error("client `{client_id}` names undeployed function `{function_id}`")]
    UndeployedFunction { client_id: String, function_id: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("metrics log: {0}")]
    Metrics(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = ControllerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluationMode {
    /// The aggregator evaluates the new model on a held-out shard.
    Central { shard_id: String },
    /// A separately sampled set of clients evaluates on local test splits.
    Federated { eval_clients_per_round: usize },
}

fn default_batch() -> usize {
    DEFAULT_AGGREGATION_BATCH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub session_id: String,
    pub model: ModelSpec,
    pub clients_per_round: usize,
    pub total_clients: usize,
    pub max_rounds: u64,
    pub target_accuracy: f64,
    pub client_timeout_s: f64,
    #[serde(default = "default_batch")]
    pub aggregation_batch_size: usize,
    pub evaluation: EvaluationMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hyperparams: ClientHyperparameters,
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ControllerError::Config(m.into()));
        if self.session_id.is_empty() {
            return bad("session_id is empty");
        }
        self.model.validate()?;
        if self.clients_per_round == 0 || self.clients_per_round > self.total_clients {
            return bad("need 0 < clients_per_round <= total_clients");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be positive");
        }
        if !(self.target_accuracy >= 0.0 && self.target_accuracy <= 1.0) {
            return bad("target_accuracy must lie in [0, 1]");
        }
        if !(self.client_timeout_s.is_finite() && self.client_timeout_s > 0.0) {
            return bad("client_timeout_s must be positive");
        }
        if self.aggregation_batch_size == 0 {
            return bad("aggregation_batch_size must be positive");
        }
        if let EvaluationMode::Federated { eval_clients_per_round } = self.evaluation {
            if eval_clients_per_round == 0 || eval_clients_per_round > self.total_clients {
                return bad("need 0 < eval_clients_per_round <= total_clients");
            }
        }
        self.hyperparams
            .validate()
            .map_err(|e| ControllerError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ControllerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub function_id: String,
    pub shard_id: String,
    pub hyperparams: ClientHyperparameters,
    pub platform_label: String,
    pub registered_at: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ClientRegistry {
    clients: BTreeMap<String, ClientRecord>,
}

impl ClientRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a client whose function must already be deployed on `fabric`.
    pub fn register(&mut self, fabric: &Fabric, client_id: &str, record: ClientRecord) -> Result<()> {
        if fabric.deployment(&record.function_id).is_none() {
            return Err(ControllerError::UndeployedFunction {
                client_id: client_id.into(),
                function_id: record.function_id,
            });
        }
        if self.clients.contains_key(client_id) {
            return Err(ControllerError::DuplicateClient(client_id.into()));
        }
        self.clients.insert(client_id.into(), record);
        Ok(())
    }

    pub fn get(&self, client_id: &str) -> Option<&ClientRecord> {
        self.clients.get(client_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.clients.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }
}

/// Uniform sample of `k` ids without replacement.
pub fn select_clients(ids: &[String], k: usize, seed: u64) -> Result<Vec<String>> {
    if k > ids.len() {
        return Err(ControllerError::Selection { k, available: ids.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, ids.len(), k)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect())
}

pub fn train_selection_seed(session: &str, round: u64, seed: u64) -> u64 {
    derive_seed(&[b"select-train", session.as_bytes(), &round.to_le_bytes(), &seed.to_le_bytes()])
}

pub fn eval_selection_seed(session: &str, round: u64, seed: u64) -> u64 {
    derive_seed(&[b"select-eval", session.as_bytes(), &round.to_le_bytes(), &seed.to_le_bytes()])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Test-set-cardinality weighted mean of client metrics.
pub fn federated_eval_aggregate(metrics: &[EvalMetrics]) -> Result<GlobalMetrics> {
    let total: usize = metrics.iter().map(|m| m.test_cardinality).sum();
    if metrics.is_empty() || total == 0 {
        return Err(ControllerError::EmptyMetrics);
    }
    let (mut loss, mut acc) = (0.0, 0.0);
    for m in metrics {
        let w = m.test_cardinality as f64 / total as f64;
        loss += w * m.loss;
        acc += w * m.accuracy;
    }
    Ok(GlobalMetrics { loss, accuracy: acc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub start_s: f64,
    pub selected: Vec<String>,
    pub finished: Vec<String>,
    pub timed_out: Vec<String>,
    pub failed: Vec<String>,
    /// Slowest finished client.
    pub straggler_s: f64,
    pub aggregate_s: f64,
    pub eval_s: f64,
    pub total_s: f64,
    pub global_metrics: Option<GlobalMetrics>,
    /// Global version committed by this round.
    pub version: Option<u64>,
    pub failure: Option<String>,
}

impl RoundReport {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn end_s(&self) -> f64 {
        self.start_s + self.total_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u64,
    pub timestamp: f64,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub straggler_s: f64,
    pub agg_s: f64,
    pub eval_s: f64,
    pub total_s: f64,
    pub finished: usize,
    pub timed_out: usize,
    pub failed: usize,
}

impl From<&RoundReport> for MetricsRow {
    fn from(r: &RoundReport) -> Self {
        Self {
            round: r.round,
            timestamp: r.end_s(),
            accuracy: r.global_metrics.map(|m| m.accuracy),
            loss: r.global_metrics.map(|m| m.loss),
            straggler_s: r.straggler_s,
            agg_s: r.aggregate_s,
            eval_s: r.eval_s,
            total_s: r.total_s,
            finished: r.finished.len(),
            timed_out: r.timed_out.len(),
            failed: r.failed.len(),
        }
    }
}

/// Append-only CSV, flushed after every row.
#[derive(Debug)]
pub struct MetricsLog {
    writer: csv::Writer<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            writer: csv::Writer::from_writer(File::create(path)?),
        })
    }

    pub fn append(&mut self, report: &RoundReport) -> Result<()> {
        self.writer.serialize(MetricsRow::from(report))?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_metrics_csv<R: io::Read>(input: R) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(ControllerError::from))
        .collect()
}

enum Verdict {
    Finished,
    TimedOut,
    Failed(String),
}

/// Drives one session against a fabric, a parameter store and an auth
/// server that share `clock`.
#[derive(Debug)]
pub struct Controller {
    config: SessionConfig,
    fabric: Arc<Fabric>,
    store: Arc<ParamStore>,
    admin: StoreCredential,
    auth: Arc<AuthServer>,
    server: ServerCredentials,
    clock: SimClock,
    registry: ClientRegistry,
    aggregator_id: String,
    api_token: Option<String>,
    metrics: Option<MetricsLog>,
    reports: Vec<RoundReport>,
}

impl Controller {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: SessionConfig,
        fabric: Arc<Fabric>,
        store: Arc<ParamStore>,
        admin: StoreCredential,
        auth: Arc<AuthServer>,
        clock: SimClock,
        registry: ClientRegistry,
        aggregator_id: &str,
    ) -> Result<Self> {
        config.validate()?;
        if registry.len() < config.total_clients {
            return Err(ControllerError::Config(format!(
                "{} clients registered, config expects {}",
                registry.len(),
                config.total_clients
            )));
        }
        if fabric.deployment(aggregator_id).is_none() {
            return Err(ControllerError::Config(format!("aggregator `{aggregator_id}` is not deployed")));
        }
        let server = auth.register_server(&format!("controller/{}", config.session_id));
        Ok(Self {
            config,
            fabric,
            store,
            admin,
            auth,
            server,
            clock,
            registry,
            aggregator_id: aggregator_id.into(),
            api_token: None,
            metrics: None,
            reports: Vec::new(),
        })
    }

    pub fn with_api_token(mut self, token: impl Into<String>) -> Self {
        self.api_token = Some(token.into());
        self
    }

    pub fn with_metrics_log(mut self, log: MetricsLog) -> Self {
        self.metrics = Some(log);
        self
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn registry(&self) -> &ClientRegistry {
        &self.registry
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    /// Creates the session and commits a seeded initial model as version 0
    /// unless a global model already exists.
    pub fn init_session(&self) -> Result<()> {
        let id = &self.config.session_id;
        if self.store.model_spec(&self.admin, id).is_err() {
            self.store.create_session(&self.admin, id, self.config.model.clone())?;
        }
        if self.store.global_version(id)?.is_none() {
            let init = glorot_init(&self.config.model, derive_seed(&[b"init", id.as_bytes(), &self.config.seed.to_le_bytes()]))?;
            self.store.put_global_model(&self.admin, id, &init)?;
        }
        Ok(())
    }

    fn issue(&self, grant: Grant, issued: &mut Vec<String>) -> Result<StoreCredential> {
        let ttl = 2.0 * self.config.client_timeout_s + 3600.0;
        let cred = self
            .store
            .issue_store_credential(&self.admin, &self.config.session_id, grant, ttl)?;
        issued.push(cred.principal.clone());
        Ok(cred)
    }

    /// Invokes `requests` concurrently at virtual time `at`, one worker per
    /// request.
    fn invoke_all(&self, requests: Vec<(String, String, String)>, at: f64, round: u64) -> Vec<(String, Result<Invocation>)> {
        std::thread::scope(|s| {
            let handles: Vec<_> = requests
                .into_iter()
                .map(|(client, function, body)| {
                    let fabric = &self.fabric;
                    s.spawn(move || {
                        let inv = fabric
                            .invoke_tagged(&function, &body, at, Some(round), Some(&client))
                            .map_err(ControllerError::from);
                        (client, inv)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("invocation worker panicked"))
                .collect()
        })
    }

    fn verdict(&self, inv: &Result<Invocation>) -> (Verdict, f64) {
        let timeout = self.config.client_timeout_s;
        let inv = match inv {
            Ok(inv) => inv,
            Err(e) => return (Verdict::Failed(e.to_string()), 0.0),
        };
        let d = inv.record.duration_s;
        if inv.record.outcome == Outcome::Timeout || d > timeout {
            return (Verdict::TimedOut, d.min(timeout));
        }
        let verdict = match (&inv.record.outcome, inv.ok().map(serde_json::from_str::<ClientResponse>)) {
            (Outcome::Ok, Some(Ok(ClientResponse::Trained(_) | ClientResponse::Evaluated(_)))) => Verdict::Finished,
            (Outcome::Ok, Some(Ok(ClientResponse::Rejected { reason }))) => Verdict::Failed(reason),
            (Outcome::Ok, _) => Verdict::Failed("unparseable response".into()),
            (o, _) => Verdict::Failed(format!(
                "{o:?}: {}",
                inv.error.as_ref().map(|e| e.to_string()).unwrap_or_default()
            )),
        };
        (verdict, d)
    }

    /// One training round: select, invoke, wait, aggregate, evaluate.
    pub fn run_round(&mut self, round: u64) -> Result<RoundReport> {
        let cfg = self.config.clone();
        let session = cfg.session_id.as_str();
        let t0 = self.clock.now();
        self.fabric.reclaim_idle(t0);
        self.store.begin_round(&self.admin, session, round)?;
        let ids = self.registry.ids();
        let selected = select_clients(&ids, cfg.clients_per_round, train_selection_seed(session, round, cfg.seed))?;

        let mut issued = Vec::new();
        let token = self.auth.fetch_token(&self.server)?.to_string();
        let mut requests = Vec::with_capacity(selected.len());
        for c in &selected {
            let rec = self.registry.get(c).expect("selected from registry");
            let req = ClientRequest::Train(TrainRequest {
                token: token.clone(),
                api_token: self.api_token.clone(),
                store_credential: self.issue(Grant::Client(c.clone()), &mut issued)?,
                session: session.into(),
                round,
                client_id: c.clone(),
                shard_id: rec.shard_id.clone(),
                hyperparams: rec.hyperparams,
            });
            let body = serde_json::to_string(&req).expect("request serializes");
            requests.push((c.clone(), rec.function_id.clone(), body));
        }

        let mut report = RoundReport {
            round,
            start_s: t0,
            selected: selected.clone(),
            finished: Vec::new(),
            timed_out: Vec::new(),
            failed: Vec::new(),
            straggler_s: 0.0,
            aggregate_s: 0.0,
            eval_s: 0.0,
            total_s: 0.0,
            global_metrics: None,
            version: None,
            failure: None,
        };
        let mut wait_s: f64 = 0.0;
        for (client, inv) in self.invoke_all(requests, t0, round) {
            let (verdict, waited) = self.verdict(&inv);
            wait_s = wait_s.max(waited);
            match verdict {
                Verdict::Finished => {
                    report.straggler_s = report.straggler_s.max(waited);
                    report.finished.push(client);
                }
                Verdict::TimedOut => report.timed_out.push(client),
                Verdict::Failed(why) => {
                    warn!("round {round}: client {client} failed: {why}");
                    report.failed.push(client);
                }
            }
        }
        for list in [&mut report.finished, &mut report.timed_out, &mut report.failed] {
            list.sort();
        }

        let mut t = t0 + wait_s;
        if report.finished.is_empty() {
            report.failure = Some("no client finished".into());
        } else {
            self.clock.set(t);
            match self.aggregate(round, &report.finished, t, &mut issued) {
                Ok((resp, duration)) => {
                    report.version = Some(resp.version);
                    report.aggregate_s = duration - resp.eval_s;
                    report.eval_s = resp.eval_s;
                    report.global_metrics = resp.metrics.map(|m| GlobalMetrics {
                        loss: m.loss,
                        accuracy: m.accuracy,
                    });
                    t += duration;
                }
                Err((why, duration)) => {
                    report.aggregate_s = duration;
                    report.failure = Some(why);
                    t += duration;
                }
            }
        }
        if report.succeeded() {
            if let EvaluationMode::Federated { eval_clients_per_round } = cfg.evaluation {
                self.clock.set(t);
                let (metrics, eval_s) = self.federated_eval(round, eval_clients_per_round, t, &mut issued)?;
                report.global_metrics = metrics;
                report.eval_s = eval_s;
                t += eval_s;
            }
        }
        for principal in &issued {
            self.store.revoke_credential(&self.admin, principal)?;
        }
        report.total_s = t - t0;
        self.clock.set(t);
        info!(
            "round {round}: {} finished, {} timed out, {} failed, accuracy {:?}",
            report.finished.len(),
            report.timed_out.len(),
            report.failed.len(),
            report.global_metrics.map(|m| m.accuracy)
        );
        Ok(report)
    }

    fn aggregate(
        &self,
        round: u64,
        finished: &[String],
        at: f64,
        issued: &mut Vec<String>,
    ) -> Result<(AggregateResponse, f64), (String, f64)> {
        let fail = |e: ControllerError| (e.to_string(), 0.0);
        let central_test = match &self.config.evaluation {
            EvaluationMode::Central { shard_id } => Some(shard_id.clone()),
            EvaluationMode::Federated { .. } => None,
        };
        let req = AggregateRequest {
            token: self.auth.fetch_token(&self.server).map_err(|e| fail(e.into()))?.to_string(),
            api_token: self.api_token.clone(),
            store_credential: self.issue(Grant::Aggregator, issued).map_err(fail)?,
            session: self.config.session_id.clone(),
            round,
            batch_size: self.config.aggregation_batch_size,
            mode: AggregationMode::Running,
            clients: Some(finished.iter().cloned().collect::<BTreeSet<_>>()),
            central_test,
        };
        let body = serde_json::to_string(&req).expect("request serializes");
        let inv = self
            .fabric
            .invoke_tagged(&self.aggregator_id, &body, at, Some(round), None)
            .map_err(|e| fail(e.into()))?;
        let d = inv.record.duration_s;
        match inv.ok().map(serde_json::from_str::<AggregateResponse>) {
            Some(Ok(resp)) => Ok((resp, d)),
            Some(Err(e)) => Err((format!("bad aggregator response: {e}"), d)),
            None => Err((
                format!(
                    "aggregator {:?}: {}",
                    inv.record.outcome,
                    inv.error.map(|e| e.to_string()).unwrap_or_default()
                ),
                d,
            )),
        }
    }

    fn federated_eval(
        &self,
        round: u64,
        k: usize,
        at: f64,
        issued: &mut Vec<String>,
    ) -> Result<(Option<GlobalMetrics>, f64)> {
        let session = &self.config.session_id;
        let chosen = select_clients(&self.registry.ids(), k, eval_selection_seed(session, round, self.config.seed))?;
        let token = self.auth.fetch_token(&self.server)?.to_string();
        let mut requests = Vec::with_capacity(chosen.len());
        for c in &chosen {
            let rec = self.registry.get(c).expect("selected from registry");
            let req = ClientRequest::Evaluate(EvaluateRequest {
                token: token.clone(),
                api_token: self.api_token.clone(),
                store_credential: self.issue(Grant::Client(c.clone()), issued)?,
                session: session.clone(),
                client_id: c.clone(),
                shard_id: rec.shard_id.clone(),
            });
            requests.push((c.clone(), rec.function_id.clone(), serde_json::to_string(&req).expect("request serializes")));
        }
        let mut metrics = Vec::new();
        let mut eval_s: f64 = 0.0;
        for (client, inv) in self.invoke_all(requests, at, round) {
            let (verdict, waited) = self.verdict(&inv);
            eval_s = eval_s.max(waited);
            match (verdict, inv) {
                (Verdict::Finished, Ok(inv)) => {
                    if let Some(Ok(ClientResponse::Evaluated(m))) = inv.ok().map(serde_json::from_str) {
                        metrics.push(m);
                    }
                }
                _ => warn!("round {round}: evaluation on {client} did not finish"),
            }
        }
        let global = if metrics.is_empty() {
            None
        } else {
            Some(federated_eval_aggregate(&metrics)?)
        };
        Ok((global, eval_s))
    }

    /// Runs rounds until the target accuracy or `max_rounds` is reached.
    /// Each report is logged as soon as its round ends.
    pub fn run_session(&mut self) -> Result<Vec<RoundReport>> {
        self.init_session()?;
        let first = self.reports.last().map_or(1, |r| r.round + 1);
        for round in first..=self.config.max_rounds {
            let report = self.run_round(round)?;
            if let Some(log) = &mut self.metrics {
                log.append(&report)?;
            }
            let done = report
                .global_metrics
                .is_some_and(|m| m.accuracy >= self.config.target_accuracy);
            self.reports.push(report);
            if done {
                break;
            }
        }
        Ok(self.reports.clone())
    }
}
