//! The client function: validates the invocation token, fetches the global
//! model with its temporary store credential, loads its shard (cached per
//! instance), trains locally, optionally with DP-SGD, and uploads the result.
//! The same deployment also serves evaluation requests.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::{ClientAuthPolicy, KeyRegistry, Verifier};
use crate::data::{Dataset, Partition, ShardStore};
use crate::fabric::{Handler, HandlerError, HandlerResult, InvocationContext};
use crate::seed::derive_seed;
use crate::store::{ClientResult, EvalMetrics, ParamStore, StoreCredential, StoreError};
use crate::tensor::{
    encoded_len, evaluate, loss_and_gradient, one_hot, parameter_count, ModelSpec, OptimizerConfig,
    OptimizerState, ParameterSet, Tensor, TensorError,
};

/// Virtual cost of one signature check.
pub const TOKEN_VALIDATION_S: f64 = 0.002;
/// Size of a published public key document.
const KEY_DOCUMENT_BYTES: u64 = 512;
/// Size of a small metadata round trip to the store.
const METADATA_BYTES: u64 = 256;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid hyperparameters: {0}")]
    Hyperparameters(String),
    #[error("{microbatches} microbatches do not divide batch size {batch_size}")]
    Microbatches { microbatches: usize, batch_size: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub noise_multiplier: f64,
    pub l2_clip_norm: f64,
    pub microbatches: usize,
    pub max_invocations: u64,
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.noise_multiplier.is_finite() && self.noise_multiplier >= 0.0) {
            return Err(ClientError::Hyperparameters("noise multiplier must be >= 0".into()));
        }
        if !(self.l2_clip_norm.is_finite() && self.l2_clip_norm > 0.0) {
            return Err(ClientError::Hyperparameters("clip norm must be > 0".into()));
        }
        if self.microbatches == 0 || self.max_invocations == 0 {
            return Err(ClientError::Hyperparameters(
                "microbatches and max_invocations must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientHyperparameters {
    pub local_epochs: u32,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub dp: Option<PrivacyConfig>,
}

impl Default for ClientHyperparameters {
    fn default() -> Self {
        Self {
            local_epochs: 5,
            batch_size: 10,
            optimizer: OptimizerConfig::default(),
            dp: None,
        }
    }
}

impl ClientHyperparameters {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.batch_size == 0 {
            return Err(ClientError::Hyperparameters("batch size must be positive".into()));
        }
        if !(self.optimizer.learning_rate.is_finite() && self.optimizer.learning_rate > 0.0) {
            return Err(ClientError::Hyperparameters("learning rate must be positive".into()));
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: u64,
    pub examples: u64,
    pub last_loss: f64,
}

/// Uniform random permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

fn batch_of(data: &Dataset, idx: &[usize]) -> (Tensor, Vec<usize>) {
    let x = data.features().select_rows(idx);
    let y = idx.iter().map(|&i| data.labels()[i]).collect();
    (x, y)
}

/// DP-SGD gradient: the batch is split into `microbatches` equal parts, each
/// part's mean gradient is clipped to L2 norm `l2_clip_norm`, the clipped
/// gradients are summed, Gaussian noise with standard deviation
/// `noise_multiplier * l2_clip_norm` is added per coordinate and the sum is
/// divided by the number of microbatches. Returns the unclipped mean loss
/// alongside.
pub fn dp_gradient(
    model: &ModelSpec,
    params: &ParameterSet,
    batch_x: &Tensor,
    labels: &[usize],
    cfg: &PrivacyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ParameterSet), ClientError> {
    cfg.validate()?;
    let b = labels.len();
    let m = cfg.microbatches;
    if b == 0 || !b.is_multiple_of(m) {
        return Err(ClientError::Microbatches {
            microbatches: m,
            batch_size: b,
        });
    }
    let size = b / m;
    let mut sum = vec![0.0; params.num_scalars()];
    let mut loss = 0.0;
    for k in 0..m {
        let idx: Vec<usize> = (k * size..(k + 1) * size).collect();
        let x = batch_x.select_rows(&idx);
        let y = one_hot(&labels[k * size..(k + 1) * size], model.classes());
        let (l, g) = loss_and_gradient(model, params, &x, &y)?;
        loss += l;
        let g = g.flatten();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > cfg.l2_clip_norm { cfg.l2_clip_norm / norm } else { 1.0 };
        for (s, v) in sum.iter_mut().zip(&g) {
            *s += v * scale;
        }
    }
    let std = cfg.noise_multiplier * cfg.l2_clip_norm;
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite positive std");
        for s in sum.iter_mut() {
            *s += normal.sample(rng);
        }
    }
    let inv_m = 1.0 / m as f64;
    sum.iter_mut().for_each(|s| *s *= inv_m);
    Ok((loss * inv_m, ParameterSet::from_flat(params, &sum)?))
}

/// `local_epochs` passes over `data` in minibatches, reshuffled every epoch
/// from `shuffle_seed`. Returns full updated weights.
///
/// A batch size above the dataset size is clamped. With DP enabled the
/// trailing partial batch of each epoch is skipped, since it cannot be split
/// into equal microbatches.
pub fn local_train(
    model: &ModelSpec,
    params: &ParameterSet,
    data: &Dataset,
    hp: &ClientHyperparameters,
    shuffle_seed: u64,
    noise_seed: u64,
) -> Result<(ParameterSet, TrainStats), ClientError> {
    hp.validate()?;
    model.check_params(params)?;
    let n = data.len();
    if n == 0 {
        return Err(ClientError::EmptyDataset);
    }
    let mut batch = hp.batch_size;
    if batch > n {
        warn!("batch size {batch} exceeds {n} local examples; clamping");
        batch = n;
    }
    if let Some(dp) = &hp.dp {
        if !batch.is_multiple_of(dp.microbatches) {
            return Err(ClientError::Microbatches {
                microbatches: dp.microbatches,
                batch_size: batch,
            });
        }
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut opt = OptimizerState::new(hp.optimizer, params)?;
    let mut p = params.clone();
    let mut stats = TrainStats::default();
    for _ in 0..hp.local_epochs {
        let order = shuffled_indices(n, &mut shuffle_rng);
        for chunk in order.chunks(batch) {
            if hp.dp.is_some() && chunk.len() < batch {
                continue;
            }
            let (x, labels) = batch_of(data, chunk);
            let (loss, grad) = match &hp.dp {
                Some(dp) => dp_gradient(model, &p, &x, &labels, dp, &mut noise_rng)?,
                None => loss_and_gradient(model, &p, &x, &one_hot(&labels, model.classes()))?,
            };
            if !loss.is_finite() {
                return Err(ClientError::NonFiniteLoss(stats.steps));
            }
            opt.step(&mut p, &grad)?;
            stats.steps += 1;
            stats.examples += chunk.len() as u64;
            stats.last_loss = loss;
        }
    }
    Ok((p, stats))
}

/// Approximate floating point work for one forward and backward pass.
pub fn train_flops_per_example(model: &ModelSpec) -> f64 {
    6.0 * parameter_count(model) as f64
}

pub fn eval_flops_per_example(model: &ModelSpec) -> f64 {
    2.0 * parameter_count(model) as f64
}

/// Per-round shuffle seed for a client.
pub fn shuffle_seed(session: &str, round: u64, client_id: &str) -> u64 {
    derive_seed(&[b"shuffle", session.as_bytes(), &round.to_le_bytes(), client_id.as_bytes()])
}

pub fn noise_seed(session: &str, round: u64, client_id: &str) -> u64 {
    derive_seed(&[b"dp-noise", session.as_bytes(), &round.to_le_bytes(), client_id.as_bytes()])
}

/// Atomically spends one unit of the client's invocation budget. Returns
/// false once `max_invocations` have been spent.
pub fn check_and_increment_budget(
    store: &ParamStore,
    cred: &StoreCredential,
    client_id: &str,
    cfg: &PrivacyConfig,
) -> Result<bool, StoreError> {
    store.check_and_increment_counter(cred, client_id, cfg.max_invocations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    pub token: String,
    #[serde(default)]
    pub api_token: Option<String>,
    pub store_credential: StoreCredential,
    pub session: String,
    pub round: u64,
    pub client_id: String,
    pub shard_id: String,
    pub hyperparams: ClientHyperparameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub token: String,
    #[serde(default)]
    pub api_token: Option<String>,
    pub store_credential: StoreCredential,
    pub session: String,
    pub client_id: String,
    pub shard_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientRequest {
    Train(TrainRequest),
    Evaluate(EvaluateRequest),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseTiming {
    pub auth_s: f64,
    pub download_s: f64,
    pub train_s: f64,
    pub upload_s: f64,
}

impl PhaseTiming {
    pub fn total(&self) -> f64 {
        self.auth_s + self.download_s + self.train_s + self.upload_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    pub client_id: String,
    pub cardinality: u64,
    pub steps: u64,
    pub timing: PhaseTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientResponse {
    Trained(TrainReport),
    Evaluated(EvalMetrics),
    Rejected { reason: String },
}

pub const BUDGET_EXHAUSTED: &str = "budget_exhausted";

/// Client handler. One value serves every instance of a deployment; all
/// per-instance state lives in the invocation context's namespace cache.
#[derive(Debug)]
pub struct ClientFunction {
    store: Arc<ParamStore>,
    shards: Arc<ShardStore>,
    keys: Arc<KeyRegistry>,
    policy: ClientAuthPolicy,
    dataset_loads: AtomicU64,
}

impl ClientFunction {
    pub fn new(
        store: Arc<ParamStore>,
        shards: Arc<ShardStore>,
        keys: Arc<KeyRegistry>,
        policy: ClientAuthPolicy,
    ) -> Self {
        Self {
            store,
            shards,
            keys,
            policy,
            dataset_loads: AtomicU64::new(0),
        }
    }

    /// Shard loads across all instances, i.e. cache misses.
    pub fn dataset_loads(&self) -> u64 {
        self.dataset_loads.load(Ordering::SeqCst)
    }

    fn load_partition(&self, ctx: &mut InvocationContext, shard_id: &str) -> HandlerResult<Arc<Partition>> {
        let part = ctx.cached(&format!("shard/{shard_id}"), |ctx| {
            let part = self.shards.serve_shard(shard_id).map_err(HandlerError::failed)?;
            self.dataset_loads.fetch_add(1, Ordering::SeqCst);
            ctx.sleep(self.shards.latency_s(shard_id))?;
            Ok(part)
        })?;
        // the cached shard stays resident for the whole invocation
        ctx.alloc(part.byte_size() as u64)?;
        Ok(Arc::clone(&*part))
    }

    fn model_spec(&self, ctx: &mut InvocationContext, cred: &StoreCredential, session: &str) -> HandlerResult<Arc<ModelSpec>> {
        let store = self.store.clone();
        ctx.cached(&format!("model/{session}"), |ctx| {
            ctx.download(METADATA_BYTES)?;
            store.model_spec(cred, session).map_err(store_error)
        })
    }

    fn fetch_global(&self, ctx: &mut InvocationContext, cred: &StoreCredential, session: &str) -> HandlerResult<ParameterSet> {
        let params = self.store.get_global_model(cred, session).map_err(store_error)?;
        let bytes = encoded_len(&params) as u64;
        ctx.alloc(bytes)?;
        ctx.download(bytes)?;
        Ok(params)
    }

    pub fn handle_train(&self, ctx: &mut InvocationContext, req: &TrainRequest) -> HandlerResult<ClientResponse> {
        let t0 = ctx.elapsed_s();
        authenticate(ctx, &self.policy, &self.keys, &req.token, req.api_token.as_deref())?;
        let cred = &req.store_credential;
        if let Some(dp) = &req.hyperparams.dp {
            dp.validate().map_err(HandlerError::failed)?;
            ctx.download(METADATA_BYTES)?;
            if !check_and_increment_budget(&self.store, cred, &req.client_id, dp).map_err(store_error)? {
                return Ok(ClientResponse::Rejected {
                    reason: BUDGET_EXHAUSTED.into(),
                });
            }
        }
        let t1 = ctx.elapsed_s();

        let model = self.model_spec(ctx, cred, &req.session)?;
        let params = self.fetch_global(ctx, cred, &req.session)?;
        let part = self.load_partition(ctx, &req.shard_id)?;
        let t2 = ctx.elapsed_s();

        // weights, gradient and two optimizer moments
        let model_bytes = encoded_len(&params) as u64;
        ctx.alloc(3 * model_bytes)?;
        let (trained, stats) = local_train(
            &model,
            &params,
            &part.train,
            &req.hyperparams,
            shuffle_seed(&req.session, req.round, &req.client_id),
            noise_seed(&req.session, req.round, &req.client_id),
        )
        .map_err(HandlerError::failed)?;
        ctx.compute(stats.examples as f64 * train_flops_per_example(&model))?;
        let t3 = ctx.elapsed_s();

        let result = ClientResult {
            session_id: req.session.clone(),
            round: req.round,
            client_id: req.client_id.clone(),
            params: trained,
            cardinality: part.cardinality() as u64,
            test_metrics: None,
        };
        ctx.upload(encoded_len(&result.params) as u64)?;
        self.store.put_client_result(cred, &result).map_err(store_error)?;
        let t4 = ctx.elapsed_s();

        Ok(ClientResponse::Trained(TrainReport {
            client_id: req.client_id.clone(),
            cardinality: result.cardinality,
            steps: stats.steps,
            timing: PhaseTiming {
                auth_s: t1 - t0,
                download_s: t2 - t1,
                train_s: t3 - t2,
                upload_s: t4 - t3,
            },
        }))
    }

    pub fn handle_evaluate(&self, ctx: &mut InvocationContext, req: &EvaluateRequest) -> HandlerResult<ClientResponse> {
        authenticate(ctx, &self.policy, &self.keys, &req.token, req.api_token.as_deref())?;
        let cred = &req.store_credential;
        let model = self.model_spec(ctx, cred, &req.session)?;
        let params = self.fetch_global(ctx, cred, &req.session)?;
        let part = self.load_partition(ctx, &req.shard_id)?;
        let test = part
            .test
            .as_ref()
            .ok_or_else(|| HandlerError::Failed(format!("shard `{}` has no test split", req.shard_id)))?;
        let m = evaluate(&model, &params, test.features(), test.labels()).map_err(HandlerError::failed)?;
        ctx.compute(test.len() as f64 * eval_flops_per_example(&model))?;
        ctx.upload(METADATA_BYTES)?;
        Ok(ClientResponse::Evaluated(EvalMetrics {
            loss: m.loss,
            accuracy: m.accuracy,
            test_cardinality: test.len(),
        }))
    }
}

/// Checks an invocation token with the instance-cached verifier, charging
/// a key download on a cache miss plus the signature check.
pub(crate) fn authenticate(
    ctx: &mut InvocationContext,
    policy: &ClientAuthPolicy,
    keys: &Arc<KeyRegistry>,
    token: &str,
    api_token: Option<&str>,
) -> HandlerResult<()> {
    let (policy, keys) = (policy.clone(), keys.clone());
    let verifier = ctx.cached("auth/verifier", move |_| Ok(Verifier::new(policy, keys)))?;
    let before = verifier.fetch_count();
    let verdict = verifier.validate(token, api_token, ctx.now());
    if verifier.fetch_count() > before {
        ctx.download(KEY_DOCUMENT_BYTES)?;
    }
    ctx.sleep(TOKEN_VALIDATION_S)?;
    verdict.map(|_| ()).map_err(|r| HandlerError::AuthReject(r.to_string()))
}

pub(crate) fn store_error(e: StoreError) -> HandlerError {
    if e.is_auth() {
        HandlerError::AuthReject(e.to_string())
    } else {
        HandlerError::failed(e)
    }
}

impl Handler for ClientFunction {
    fn handle(&self, ctx: &mut InvocationContext, request: &str) -> HandlerResult<String> {
        let req: ClientRequest =
            serde_json::from_str(request).map_err(|e| HandlerError::Failed(format!("malformed request: {e}")))?;
        let resp = match &req {
            ClientRequest::Train(r) => self.handle_train(ctx, r)?,
            ClientRequest::Evaluate(r) => self.handle_evaluate(ctx, r)?,
        };
        Ok(serde_json::to_string(&resp).expect("response serializes"))
    }
}
