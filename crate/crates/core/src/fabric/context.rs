use std::any::Any;
use std::sync::Arc;

use thiserror::Error;

use super::lru::LruCache;
use super::NetworkProfile;

/// Ways a handler can fail. The fabric maps each to an invocation outcome.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum HandlerError {
    #[error("rejected: {0}")]
    AuthReject(String),
    #[error("out of memory: {requested} bytes requested with {in_use} of {limit} in use")]
    OutOfMemory { requested: u64, in_use: u64, limit: u64 },
    #[error("deadline exceeded")]
    Timeout,
    #[error("{0}")]
    Failed(String),
}

impl HandlerError {
    pub fn failed(e: impl std::fmt::Display) -> Self {
        Self::Failed(e.to_string())
    }
}

pub type HandlerResult<T> = std::result::Result<T, HandlerError>;

/// A deployed function body.
pub trait Handler: Send + Sync {
    fn handle(&self, ctx: &mut InvocationContext, request: &str) -> HandlerResult<String>;
}

impl<F> Handler for F
where
    F: Fn(&mut InvocationContext, &str) -> HandlerResult<String> + Send + Sync,
{
    fn handle(&self, ctx: &mut InvocationContext, request: &str) -> HandlerResult<String> {
        self(ctx, request)
    }
}

pub type CacheValue = Arc<dyn Any + Send + Sync>;

/// Global-namespace state that outlives a single invocation on one instance.
pub type NamespaceCache = LruCache<String, CacheValue>;

/// Cooperative allocation accounting against the deployment memory limit.
#[derive(Debug, Clone)]
pub struct MemoryTracker {
    limit: u64,
    in_use: u64,
    peak: u64,
}

impl MemoryTracker {
    pub fn new(limit_bytes: u64) -> Self {
        Self {
            limit: limit_bytes,
            in_use: 0,
            peak: 0,
        }
    }

    pub fn alloc(&mut self, bytes: u64) -> HandlerResult<()> {
        let next = self.in_use.saturating_add(bytes);
        if next > self.limit {
            return Err(HandlerError::OutOfMemory {
                requested: bytes,
                in_use: self.in_use,
                limit: self.limit,
            });
        }
        self.in_use = next;
        self.peak = self.peak.max(next);
        Ok(())
    }

    pub fn free(&mut self, bytes: u64) {
        self.in_use = self.in_use.saturating_sub(bytes);
    }

    pub fn in_use(&self) -> u64 {
        self.in_use
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }
}

/// Everything a handler sees of its runtime. Time is virtual: the handler's
/// duration is whatever it charges through [`sleep`](Self::sleep),
/// [`compute`](Self::compute) and the transfer methods, on top of the
/// platform overhead and cold start charged before it runs.
pub struct InvocationContext {
    pub(super) function_id: String,
    pub(super) instance_id: String,
    pub(super) cold: bool,
    pub(super) start_s: f64,
    pub(super) elapsed_s: f64,
    pub(super) timeout_s: f64,
    pub(super) cpu_ghz: f64,
    pub(super) flops_per_cycle: f64,
    pub(super) network: NetworkProfile,
    pub(super) cache: NamespaceCache,
    pub(super) memory: MemoryTracker,
    pub(super) egress_bytes: u64,
    pub(super) ingress_bytes: u64,
}

impl std::fmt::Debug for InvocationContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InvocationContext")
            .field("function_id", &self.function_id)
            .field("instance_id", &self.instance_id)
            .field("cold", &self.cold)
            .field("start_s", &self.start_s)
            .field("elapsed_s", &self.elapsed_s)
            .finish_non_exhaustive()
    }
}

impl InvocationContext {
    pub fn function_id(&self) -> &str {
        &self.function_id
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn is_cold(&self) -> bool {
        self.cold
    }

    /// Virtual time the request arrived.
    pub fn start_s(&self) -> f64 {
        self.start_s
    }

    /// Virtual seconds charged so far, including overhead and cold start.
    pub fn elapsed_s(&self) -> f64 {
        self.elapsed_s
    }

    pub fn now(&self) -> f64 {
        self.start_s + self.elapsed_s
    }

    pub fn remaining_s(&self) -> f64 {
        self.timeout_s - self.elapsed_s
    }

    pub fn cpu_ghz(&self) -> f64 {
        self.cpu_ghz
    }

    /// Charges `seconds` of virtual time. Fails once the deadline passes.
    pub fn sleep(&mut self, seconds: f64) -> HandlerResult<()> {
        if seconds.is_finite() && seconds > 0.0 {
            self.elapsed_s += seconds;
        }
        if self.elapsed_s > self.timeout_s {
            return Err(HandlerError::Timeout);
        }
        Ok(())
    }

    /// Charges the time `flops` floating point operations take on this
    /// instance's CPU share.
    pub fn compute(&mut self, flops: f64) -> HandlerResult<()> {
        self.sleep(flops / (self.cpu_ghz * 1e9 * self.flops_per_cycle))
    }

    pub fn transfer_time(&self, bytes: u64) -> f64 {
        self.network.latency_s + bytes as f64 / self.network.bandwidth_bytes_per_s
    }

    /// Download of `bytes` (free of egress charges).
    pub fn download(&mut self, bytes: u64) -> HandlerResult<()> {
        self.ingress_bytes += bytes;
        self.sleep(self.transfer_time(bytes))
    }

    /// Upload of `bytes`, reported as egress for billing.
    pub fn upload(&mut self, bytes: u64) -> HandlerResult<()> {
        self.egress_bytes += bytes;
        self.sleep(self.transfer_time(bytes))
    }

    pub fn egress_bytes(&self) -> u64 {
        self.egress_bytes
    }

    pub fn memory(&mut self) -> &mut MemoryTracker {
        &mut self.memory
    }

    pub fn alloc(&mut self, bytes: u64) -> HandlerResult<()> {
        self.memory.alloc(bytes)
    }

    pub fn free(&mut self, bytes: u64) {
        self.memory.free(bytes)
    }

    pub fn cache(&mut self) -> &mut NamespaceCache {
        &mut self.cache
    }

    /// Returns the instance-cached value for `key`, running `compute` only
    /// on a miss. A value of the wrong type counts as a miss.
    pub fn cached<T, F>(&mut self, key: &str, compute: F) -> HandlerResult<Arc<T>>
    where
        T: Any + Send + Sync,
        F: FnOnce(&mut Self) -> HandlerResult<T>,
    {
        let key = key.to_string();
        if let Some(v) = self.cache.get(&key) {
            if let Ok(t) = v.clone().downcast::<T>() {
                return Ok(t);
            }
        }
        let value = Arc::new(compute(self)?);
        self.cache.put(key, value.clone());
        Ok(value)
    }
}
