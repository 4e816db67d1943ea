//! FedAvg aggregation. The running variant folds client results into a
//! weighted mean one batch at a time so only `batch_size` results (plus the
//! accumulator) are decoded at once.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::{ClientAuthPolicy, KeyRegistry};
use crate::client::{authenticate, eval_flops_per_example, store_error};
use crate::data::ShardStore;
use crate::fabric::{Handler, HandlerError, HandlerResult, InvocationContext};
use crate::store::{ClientResult, EvalMetrics, Gauge, ParamStore, ResultBatch, StoreCredential, StoreError};
use crate::tensor::{encoded_len, evaluate, parameter_count, ParameterSet, TensorError};

/// Default memory limit of the aggregator deployment.
pub const AGGREGATOR_MEMORY_MB: u32 = 4096;
pub const DEFAULT_AGGREGATION_BATCH: usize = 20;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("no client results to aggregate")]
    Empty,
    #[error("result from `{client_id}` has zero cardinality")]
    ZeroWeight { client_id: String },
    #[error("result from `{client_id}` does not match the model: {source}")]
    Shape { client_id: String, source: TensorError },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Weighted partial mean of the results seen so far.
#[derive(Debug, Clone, Default)]
pub struct RunningAverageState {
    accumulated: Option<ParameterSet>,
    total_weight: u64,
    results_seen: usize,
}

impl RunningAverageState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulated(&self) -> Option<&ParameterSet> {
        self.accumulated.as_ref()
    }

    pub fn total_weight(&self) -> u64 {
        self.total_weight
    }

    pub fn results_seen(&self) -> usize {
        self.results_seen
    }

    /// `acc <- acc * W/(W+n) + w * n/(W+n)`, `W <- W + n`.
    pub fn add(&mut self, result: &ClientResult) -> Result<(), AggregateError> {
        let n = result.cardinality;
        if n == 0 {
            return Err(AggregateError::ZeroWeight {
                client_id: result.client_id.clone(),
            });
        }
        match &mut self.accumulated {
            None => {
                let mut p = result.params.clone();
                p.version = 0;
                self.accumulated = Some(p);
            }
            Some(acc) => {
                acc.check_compatible(&result.params)
                    .map_err(|source| AggregateError::Shape {
                        client_id: result.client_id.clone(),
                        source,
                    })?;
                let total = (self.total_weight + n) as f64;
                let keep = self.total_weight as f64 / total;
                let take = n as f64 / total;
                for ((_, a), (_, w)) in acc.iter_mut().zip(result.params.iter()) {
                    for (x, y) in a.data_mut().iter_mut().zip(w.data()) {
                        *x = *x * keep + y * take;
                    }
                }
            }
        }
        self.total_weight += n;
        self.results_seen += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<ParameterSet, AggregateError> {
        self.accumulated.ok_or(AggregateError::Empty)
    }
}

/// `sum_k (n_k / N) w_k` over fully materialized results.
pub fn fedavg_naive(results: &[ClientResult]) -> Result<ParameterSet, AggregateError> {
    let first = results.first().ok_or(AggregateError::Empty)?;
    let mut total = 0u64;
    for r in results {
        if r.cardinality == 0 {
            return Err(AggregateError::ZeroWeight {
                client_id: r.client_id.clone(),
            });
        }
        first.params.check_compatible(&r.params).map_err(|source| AggregateError::Shape {
            client_id: r.client_id.clone(),
            source,
        })?;
        total += r.cardinality;
    }
    let mut out = first.params.zeros_like();
    out.version = 0;
    for r in results {
        let f = r.cardinality as f64 / total as f64;
        for ((_, a), (_, w)) in out.iter_mut().zip(r.params.iter()) {
            for (x, y) in a.data_mut().iter_mut().zip(w.data()) {
                *x += f * y;
            }
        }
    }
    Ok(out)
}

/// Folds a stream of result batches into the FedAvg mean. Each batch is
/// dropped before the next one is pulled.
pub fn fedavg_running<I, B>(batches: I) -> Result<ParameterSet, AggregateError>
where
    I: IntoIterator<Item = Result<B, StoreError>>,
    B: AsRef<[ClientResult]>,
{
    let mut state = RunningAverageState::new();
    for batch in batches {
        let batch = batch?;
        for r in batch.as_ref() {
            state.add(r)?;
        }
    }
    state.finish()
}

impl AsRef<[ClientResult]> for ResultBatch {
    fn as_ref(&self) -> &[ClientResult] {
        &self.results
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    Running,
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateRequest {
    pub token: String,
    #[serde(default)]
    pub api_token: Option<String>,
    pub store_credential: StoreCredential,
    pub session: String,
    pub round: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub mode: AggregationMode,
    /// Restricts aggregation to these clients, normally the ones that
    /// finished before the deadline.
    #[serde(default)]
    pub clients: Option<BTreeSet<String>>,
    #[serde(default)]
    pub central_test: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateResponse {
    pub version: u64,
    pub results: usize,
    pub total_weight: u64,
    pub peak_materialized: usize,
    #[serde(default)]
    pub metrics: Option<EvalMetrics>,
    /// Part of the invocation spent on central evaluation.
    #[serde(default)]
    pub eval_s: f64,
}

/// Aggregator handler, deployed on the fabric like the clients.
#[derive(Debug)]
pub struct AggregatorFunction {
    store: Arc<ParamStore>,
    shards: Arc<ShardStore>,
    keys: Arc<KeyRegistry>,
    policy: ClientAuthPolicy,
}

impl AggregatorFunction {
    pub fn new(store: Arc<ParamStore>, shards: Arc<ShardStore>, keys: Arc<KeyRegistry>, policy: ClientAuthPolicy) -> Self {
        Self {
            store,
            shards,
            keys,
            policy,
        }
    }

    pub fn handle_aggregate(&self, ctx: &mut InvocationContext, req: &AggregateRequest) -> HandlerResult<AggregateResponse> {
        authenticate(ctx, &self.policy, &self.keys, &req.token, req.api_token.as_deref())?;
        let cred = &req.store_credential;
        let model = self.store.model_spec(cred, &req.session).map_err(store_error)?;
        let flops_per_result = 3.0 * parameter_count(&model) as f64;
        let batch = match req.mode {
            AggregationMode::Running => req.batch_size.max(1),
            AggregationMode::Naive => usize::MAX,
        };
        let gauge = Gauge::default();
        let stream = self
            .store
            .stream_round_results(cred, &req.session, req.round, batch, req.clients.as_ref())
            .map_err(store_error)?
            .with_gauge(gauge.clone());

        let mut state = RunningAverageState::new();
        let mut acc_bytes = 0;
        let mut acc_guard = None;
        for b in stream {
            let b = b.map_err(store_error)?;
            let bytes: u64 = b.results.iter().map(|r| encoded_len(&r.params) as u64).sum();
            ctx.alloc(bytes)?;
            ctx.download(bytes)?;
            for r in &b.results {
                if acc_guard.is_none() {
                    acc_bytes = encoded_len(&r.params) as u64;
                    ctx.alloc(acc_bytes)?;
                    acc_guard = Some(gauge.acquire(1));
                }
                state.add(r).map_err(HandlerError::failed)?;
                ctx.compute(flops_per_result)?;
            }
            drop(b);
            ctx.free(bytes);
        }
        let peak = gauge.peak();
        let (total_weight, results) = (state.total_weight(), state.results_seen());
        let global = state.finish().map_err(HandlerError::failed)?;
        model.check_params(&global).map_err(HandlerError::failed)?;

        ctx.upload(acc_bytes)?;
        let version = self.store.put_global_model(cred, &req.session, &global).map_err(store_error)?;
        drop(acc_guard);

        let eval_start = ctx.elapsed_s();
        let metrics = match &req.central_test {
            None => None,
            Some(shard) => {
                let part = self.shards.serve_shard(shard).map_err(HandlerError::failed)?;
                ctx.sleep(self.shards.latency_s(shard))?;
                let test = part.test.as_ref().unwrap_or(&part.train);
                ctx.alloc(test.byte_size() as u64)?;
                let m = evaluate(&model, &global, test.features(), test.labels()).map_err(HandlerError::failed)?;
                ctx.compute(test.len() as f64 * eval_flops_per_example(&model))?;
                Some(EvalMetrics {
                    loss: m.loss,
                    accuracy: m.accuracy,
                    test_cardinality: test.len(),
                })
            }
        };
        ctx.free(acc_bytes);
        Ok(AggregateResponse {
            version,
            results,
            total_weight,
            peak_materialized: peak,
            metrics,
            eval_s: ctx.elapsed_s() - eval_start,
        })
    }
}

impl Handler for AggregatorFunction {
    fn handle(&self, ctx: &mut InvocationContext, request: &str) -> HandlerResult<String> {
        let req: AggregateRequest =
            serde_json::from_str(request).map_err(|e| HandlerError::Failed(format!("malformed request: {e}")))?;
        let resp = self.handle_aggregate(ctx, &req)?;
        Ok(serde_json::to_string(&resp).expect("response serializes"))
    }
}
