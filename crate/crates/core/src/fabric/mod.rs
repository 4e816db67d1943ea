//! A simulated FaaS platform.
//!
//! Handlers are ordinary Rust code executed in-process. Each invocation runs
//! on a function instance; an instance is reused when it is idle at the
//! request's virtual arrival time and is created (a cold start) otherwise.
//! Idle instances disappear after `keep_warm_s` together with their
//! namespace cache.
//!
//! Durations are virtual and deterministic: invocation overhead, cold start
//! latency and whatever the handler charges through its context. Optionally
//! the measured wall-clock time of the handler, multiplied by
//! `compute_scale`, is added as well.

mod context;
mod lru;

use std::collections::BTreeMap;
use std::io;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use context::{
    CacheValue, Handler, HandlerError, HandlerResult, InvocationContext, MemoryTracker, NamespaceCache,
};
pub use lru::LruCache;

pub const DEFAULT_BILLING_GRANULARITY_S: f64 = 0.1;
pub const DEFAULT_KEEP_WARM_S: f64 = 300.0;
pub const DEFAULT_COLD_START_S: f64 = 2.0;
pub const DEFAULT_TIMEOUT_S: f64 = 540.0;
pub const DEFAULT_CACHE_CAPACITY: usize = 16;

#[derive(Debug, Error)]
pub enum FabricError {
    #[error("function `{0}` is not deployed")]
    NotDeployed(String),
    #[error("function `{0}` is already deployed")]
    AlreadyDeployed(String),
    #[error("invalid deployment `{function_id}`: {reason}")]
    InvalidDeployment { function_id: String, reason: String },
    #[error("fabric config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = FabricError> = std::result::Result<T, E>;

/// CPU share coupled to the memory tier, GHz.
pub fn default_cpu_ghz(memory_limit_mb: u32) -> f64 {
    match memory_limit_mb {
        0..=128 => 0.2,
        129..=256 => 0.4,
        257..=512 => 0.8,
        513..=1024 => 1.4,
        1025..=2048 => 2.4,
        _ => 4.8,
    }
}

/// `duration` rounded up to whole billing units.
pub fn billed_duration(duration_s: f64, granularity_s: f64) -> f64 {
    if duration_s <= 0.0 {
        return 0.0;
    }
    if granularity_s <= 0.0 {
        return duration_s;
    }
    // absorb representation error such as 0.3 / 0.1 = 2.9999999999999996
    let units = (duration_s / granularity_s - 1e-9).ceil().max(1.0);
    units * granularity_s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ColdStartProfile {
    Constant { seconds: f64 },
    Uniform { min_s: f64, max_s: f64 },
    LogNormal { median_s: f64, sigma: f64 },
}

impl Default for ColdStartProfile {
    fn default() -> Self {
        Self::Constant {
            seconds: DEFAULT_COLD_START_S,
        }
    }
}

impl ColdStartProfile {
    fn validate(&self) -> std::result::Result<(), String> {
        let ok = match *self {
            Self::Constant { seconds } => seconds.is_finite() && seconds >= 0.0,
            Self::Uniform { min_s, max_s } => min_s.is_finite() && max_s.is_finite() && 0.0 <= min_s && min_s <= max_s,
            Self::LogNormal { median_s, sigma } => median_s.is_finite() && median_s > 0.0 && sigma.is_finite() && sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("bad cold start profile {self:?}"))
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Self::Constant { seconds } => seconds,
            Self::Uniform { min_s, max_s } => min_s + (max_s - min_s) * rand::Rng::random::<f64>(rng),
            Self::LogNormal { median_s, sigma } => LogNormal::new(median_s.ln(), sigma)
                .expect("validated profile")
                .sample(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkProfile {
    pub latency_s: f64,
    pub bandwidth_bytes_per_s: f64,
}

impl Default for NetworkProfile {
    fn default() -> Self {
        Self {
            latency_s: 0.0,
            bandwidth_bytes_per_s: 125e6,
        }
    }
}

/// What a deployment is used for; the fabric itself does not care.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionRole {
    #[default]
    Client,
    Aggregator,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionDeployment {
    pub function_id: String,
    pub platform_label: String,
    pub role: FunctionRole,
    pub memory_limit_mb: u32,
    pub timeout_s: f64,
    pub cold_start: ColdStartProfile,
    pub keep_warm_s: f64,
    pub invoke_overhead_s: f64,
    pub network: NetworkProfile,
    pub cpu_ghz: f64,
    pub cache_capacity: usize,
}

impl FunctionDeployment {
    pub fn new(function_id: impl Into<String>, memory_limit_mb: u32) -> Self {
        Self {
            function_id: function_id.into(),
            platform_label: "local".into(),
            role: FunctionRole::Client,
            memory_limit_mb,
            timeout_s: DEFAULT_TIMEOUT_S,
            cold_start: ColdStartProfile::default(),
            keep_warm_s: DEFAULT_KEEP_WARM_S,
            invoke_overhead_s: 0.0,
            network: NetworkProfile::default(),
            cpu_ghz: default_cpu_ghz(memory_limit_mb),
            cache_capacity: DEFAULT_CACHE_CAPACITY,
        }
    }

    pub fn with_role(mut self, role: FunctionRole) -> Self {
        self.role = role;
        self
    }

    pub fn with_timeout(mut self, timeout_s: f64) -> Self {
        self.timeout_s = timeout_s;
        self
    }

    pub fn with_cold_start(mut self, profile: ColdStartProfile) -> Self {
        self.cold_start = profile;
        self
    }

    pub fn with_keep_warm(mut self, keep_warm_s: f64) -> Self {
        self.keep_warm_s = keep_warm_s;
        self
    }

    pub fn with_network(mut self, network: NetworkProfile) -> Self {
        self.network = network;
        self
    }

    pub fn with_overhead(mut self, seconds: f64) -> Self {
        self.invoke_overhead_s = seconds;
        self
    }

    pub fn with_cache_capacity(mut self, capacity: usize) -> Self {
        self.cache_capacity = capacity;
        self
    }

    pub fn with_platform(mut self, label: impl Into<String>) -> Self {
        self.platform_label = label.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(FabricError::InvalidDeployment {
                function_id: self.function_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.function_id.is_empty() {
            return bad("empty function id");
        }
        if self.memory_limit_mb == 0 {
            return bad("memory limit must be positive");
        }
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return bad("timeout must be positive");
        }
        if !(self.keep_warm_s >= 0.0) || !(self.invoke_overhead_s >= 0.0) {
            return bad("keep-warm and overhead must be non-negative");
        }
        if !(self.cpu_ghz.is_finite() && self.cpu_ghz > 0.0) {
            return bad("cpu_ghz must be positive");
        }
        if !(self.network.latency_s >= 0.0 && self.network.bandwidth_bytes_per_s > 0.0) {
            return bad("network latency must be non-negative and bandwidth positive");
        }
        if self.cache_capacity == 0 {
            return bad("cache capacity must be positive");
        }
        if let Err(reason) = self.cold_start.validate() {
            return bad(&reason);
        }
        Ok(())
    }

    pub fn memory_limit_bytes(&self) -> u64 {
        self.memory_limit_mb as u64 * 1024 * 1024
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Timeout,
    Oom,
    HandlerError,
    AuthReject,
}

impl Outcome {
    fn of(e: &HandlerError) -> Self {
        match e {
            HandlerError::AuthReject(_) => Self::AuthReject,
            HandlerError::OutOfMemory { .. } => Self::Oom,
            HandlerError::Timeout => Self::Timeout,
            HandlerError::Failed(_) => Self::HandlerError,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub function_id: String,
    pub platform_label: String,
    pub instance_id: String,
    pub cold: bool,
    pub start_s: f64,
    pub duration_s: f64,
    pub billed_s: f64,
    pub memory_limit_mb: u32,
    pub cpu_ghz: f64,
    pub peak_tracked_bytes: u64,
    pub egress_bytes: u64,
    pub outcome: Outcome,
    /// Filled in by the caller.
    pub round: Option<u64>,
    pub client_id: Option<String>,
}

impl InvocationRecord {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    pub fn gb_seconds(&self) -> f64 {
        self.memory_limit_mb as f64 / 1024.0 * self.billed_s
    }

    pub fn ghz_seconds(&self) -> f64 {
        self.cpu_ghz * self.billed_s
    }
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub response: Option<String>,
    pub error: Option<HandlerError>,
    pub record: InvocationRecord,
}

impl Invocation {
    pub fn ok(&self) -> Option<&str> {
        self.response.as_deref()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BillingSummary {
    pub invocations: u64,
    pub gb_seconds: f64,
    pub ghz_seconds: f64,
    pub egress_bytes: u64,
}

/// Billing units over `records`, re-deriving billed time at `granularity_s`.
pub fn billing_summary(records: &[InvocationRecord], granularity_s: f64) -> BillingSummary {
    let mut s = BillingSummary::default();
    for r in records {
        let billed = billed_duration(r.duration_s, granularity_s);
        s.invocations += 1;
        s.gb_seconds += r.memory_limit_mb as f64 / 1024.0 * billed;
        s.ghz_seconds += r.cpu_ghz * billed;
        s.egress_bytes += r.egress_bytes;
    }
    s
}

pub fn write_records_csv<W: io::Write>(out: W, records: &[InvocationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: io::Read>(input: R) -> Result<Vec<InvocationRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(FabricError::from))
        .collect()
}

/// Platform defaults that deployments inherit by label.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformProfile {
    pub cold_start: Option<ColdStartProfile>,
    pub network: Option<NetworkProfile>,
    pub invoke_overhead_s: Option<f64>,
    pub keep_warm_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentConfig {
    pub function_id: String,
    #[serde(default = "local_label")]
    pub platform_label: String,
    #[serde(default)]
    pub role: FunctionRole,
    pub memory_limit_mb: u32,
    #[serde(default)]
    pub timeout_s: Option<f64>,
    #[serde(default)]
    pub cold_start: Option<ColdStartProfile>,
    #[serde(default)]
    pub keep_warm_s: Option<f64>,
    #[serde(default)]
    pub invoke_overhead_s: Option<f64>,
    #[serde(default)]
    pub network: Option<NetworkProfile>,
    #[serde(default)]
    pub cpu_ghz: Option<f64>,
    #[serde(default)]
    pub cache_capacity: Option<usize>,
}

fn local_label() -> String {
    "local".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FabricConfig {
    pub billing_granularity_s: f64,
    pub seed: u64,
    /// Multiplier on measured handler wall time; 0 keeps runs deterministic.
    pub compute_scale: f64,
    pub flops_per_cycle: f64,
    pub platforms: BTreeMap<String, PlatformProfile>,
    pub deployments: Vec<DeploymentConfig>,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            billing_granularity_s: DEFAULT_BILLING_GRANULARITY_S,
            seed: 0,
            compute_scale: 0.0,
            flops_per_cycle: 1.0,
            platforms: BTreeMap::new(),
            deployments: Vec::new(),
        }
    }
}

impl FabricConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| FabricError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.billing_granularity_s >= 0.0) || !(self.compute_scale >= 0.0) || !(self.flops_per_cycle > 0.0) {
            return Err(FabricError::Config(
                "granularity and compute_scale must be non-negative, flops_per_cycle positive".into(),
            ));
        }
        for d in self.resolved_deployments()? {
            d.validate()?;
        }
        Ok(())
    }

    /// Deployments with platform defaults and memory-tier CPU filled in.
    pub fn resolved_deployments(&self) -> Result<Vec<FunctionDeployment>> {
        self.deployments
            .iter()
            .map(|c| {
                let platform = match self.platforms.get(&c.platform_label) {
                    Some(p) => p.clone(),
                    None if c.platform_label == "local" => PlatformProfile::default(),
                    None => {
                        return Err(FabricError::Config(format!(
                            "deployment `{}` names unknown platform `{}`",
                            c.function_id, c.platform_label
                        )))
                    }
                };
                let mut d = FunctionDeployment::new(c.function_id.clone(), c.memory_limit_mb)
                    .with_platform(c.platform_label.clone())
                    .with_role(c.role);
                if let Some(v) = c.cold_start.clone().or(platform.cold_start) {
                    d.cold_start = v;
                }
                if let Some(v) = c.network.or(platform.network) {
                    d.network = v;
                }
                if let Some(v) = c.invoke_overhead_s.or(platform.invoke_overhead_s) {
                    d.invoke_overhead_s = v;
                }
                if let Some(v) = c.keep_warm_s.or(platform.keep_warm_s) {
                    d.keep_warm_s = v;
                }
                if let Some(v) = c.timeout_s {
                    d.timeout_s = v;
                }
                if let Some(v) = c.cpu_ghz {
                    d.cpu_ghz = v;
                }
                if let Some(v) = c.cache_capacity {
                    d.cache_capacity = v;
                }
                Ok(d)
            })
            .collect()
    }
}

#[derive(Debug)]
struct Instance {
    id: String,
    seq: u64,
    busy: bool,
    busy_until: f64,
    busy_s: f64,
    cache: Option<NamespaceCache>,
}

impl Instance {
    fn idle_at(&self, now: f64) -> bool {
        !self.busy && self.busy_until <= now
    }
}

#[derive(Debug, Default)]
struct Pool {
    instances: Vec<Instance>,
    next_seq: u64,
    retired_busy_s: f64,
}

impl Pool {
    fn reclaim(&mut self, now: f64, keep_warm_s: f64) -> usize {
        let before = self.instances.len();
        let mut retired = 0.0;
        self.instances.retain(|i| {
            let expired = !i.busy && now - i.busy_until >= keep_warm_s;
            if expired {
                retired += i.busy_s;
            }
            !expired
        });
        self.retired_busy_s += retired;
        before - self.instances.len()
    }
}

struct Deployed {
    spec: FunctionDeployment,
    handler: Arc<dyn Handler>,
    pool: Mutex<Pool>,
}

/// The simulated platform. Safe to invoke from many threads at once.
pub struct Fabric {
    granularity_s: f64,
    seed: u64,
    compute_scale: f64,
    flops_per_cycle: f64,
    deployments: RwLock<BTreeMap<String, Arc<Deployed>>>,
    records: Mutex<Vec<InvocationRecord>>,
}

impl std::fmt::Debug for Fabric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fabric")
            .field("granularity_s", &self.granularity_s)
            .field("functions", &self.function_ids())
            .finish_non_exhaustive()
    }
}

impl Default for Fabric {
    fn default() -> Self {
        Self::new(&FabricConfig::default())
    }
}

impl Fabric {
    /// A fabric with the config's global settings. Deployments listed in the
    /// config still need handlers; see [`deploy`](Self::deploy).
    pub fn new(config: &FabricConfig) -> Self {
        Self {
            granularity_s: config.billing_granularity_s,
            seed: config.seed,
            compute_scale: config.compute_scale,
            flops_per_cycle: config.flops_per_cycle,
            deployments: RwLock::new(BTreeMap::new()),
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn billing_granularity_s(&self) -> f64 {
        self.granularity_s
    }

    pub fn deploy(&self, spec: FunctionDeployment, handler: Arc<dyn Handler>) -> Result<()> {
        spec.validate()?;
        let mut deployments = self.deployments.write().expect("deployments poisoned");
        if deployments.contains_key(&spec.function_id) {
            return Err(FabricError::AlreadyDeployed(spec.function_id));
        }
        deployments.insert(
            spec.function_id.clone(),
            Arc::new(Deployed {
                spec,
                handler,
                pool: Mutex::new(Pool::default()),
            }),
        );
        Ok(())
    }

    pub fn function_ids(&self) -> Vec<String> {
        self.deployments.read().expect("deployments poisoned").keys().cloned().collect()
    }

    pub fn deployment(&self, function_id: &str) -> Option<FunctionDeployment> {
        self.deployments
            .read()
            .expect("deployments poisoned")
            .get(function_id)
            .map(|d| d.spec.clone())
    }

    fn deployed(&self, function_id: &str) -> Result<Arc<Deployed>> {
        self.deployments
            .read()
            .expect("deployments poisoned")
            .get(function_id)
            .cloned()
            .ok_or_else(|| FabricError::NotDeployed(function_id.to_string()))
    }

    fn cold_start_latency(&self, spec: &FunctionDeployment, seq: u64) -> f64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(spec.function_id.as_bytes());
        h.update(seq.to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        spec.cold_start.sample(&mut ChaCha8Rng::from_seed(seed))
    }

    /// Runs `request` on `function_id` arriving at virtual time `at`.
    pub fn invoke(&self, function_id: &str, request: &str, at: f64) -> Result<Invocation> {
        self.invoke_tagged(function_id, request, at, None, None)
    }

    /// Like [`invoke`](Self::invoke), labelling the record with the round
    /// and client it served.
    pub fn invoke_tagged(
        &self,
        function_id: &str,
        request: &str,
        at: f64,
        round: Option<u64>,
        client_id: Option<&str>,
    ) -> Result<Invocation> {
        let dep = self.deployed(function_id)?;
        let spec = &dep.spec;

        let (instance_id, seq, cold, cache) = {
            let mut pool = dep.pool.lock().expect("pool poisoned");
            pool.reclaim(at, spec.keep_warm_s);
            // most recently released idle instance first
            let pick = pool
                .instances
                .iter()
                .enumerate()
                .filter(|(_, i)| i.idle_at(at))
                .max_by(|a, b| a.1.busy_until.total_cmp(&b.1.busy_until).then(b.1.seq.cmp(&a.1.seq)))
                .map(|(k, _)| k);
            match pick {
                Some(k) => {
                    let inst = &mut pool.instances[k];
                    inst.busy = true;
                    (inst.id.clone(), inst.seq, false, inst.cache.take().expect("idle instance owns its cache"))
                }
                None => {
                    let seq = pool.next_seq;
                    pool.next_seq += 1;
                    let id = format!("{function_id}/{seq}");
                    pool.instances.push(Instance {
                        id: id.clone(),
                        seq,
                        busy: true,
                        busy_until: at,
                        busy_s: 0.0,
                        cache: None,
                    });
                    (id, seq, true, NamespaceCache::new(spec.cache_capacity))
                }
            }
        };

        let startup = spec.invoke_overhead_s + if cold { self.cold_start_latency(spec, seq) } else { 0.0 };
        let mut ctx = InvocationContext {
            function_id: function_id.to_string(),
            instance_id: instance_id.clone(),
            cold,
            start_s: at,
            elapsed_s: startup,
            timeout_s: spec.timeout_s,
            cpu_ghz: spec.cpu_ghz,
            flops_per_cycle: self.flops_per_cycle,
            network: spec.network,
            cache,
            memory: MemoryTracker::new(spec.memory_limit_bytes()),
            egress_bytes: 0,
            ingress_bytes: 0,
        };

        let wall = Instant::now();
        let result = if ctx.elapsed_s > ctx.timeout_s {
            Err(HandlerError::Timeout)
        } else {
            catch_unwind(AssertUnwindSafe(|| dep.handler.handle(&mut ctx, request)))
                .unwrap_or_else(|p| Err(HandlerError::Failed(panic_message(p))))
        };
        if self.compute_scale > 0.0 {
            ctx.elapsed_s += wall.elapsed().as_secs_f64() * self.compute_scale;
        }
        let result = match result {
            Ok(_) if ctx.elapsed_s > ctx.timeout_s => Err(HandlerError::Timeout),
            r => r,
        };
        let outcome = result.as_ref().map_or_else(Outcome::of, |_| Outcome::Ok);
        let duration_s = if outcome == Outcome::Timeout {
            spec.timeout_s
        } else {
            ctx.elapsed_s
        };

        let record = InvocationRecord {
            function_id: function_id.to_string(),
            platform_label: spec.platform_label.clone(),
            instance_id: instance_id.clone(),
            cold,
            start_s: at,
            duration_s,
            billed_s: billed_duration(duration_s, self.granularity_s),
            memory_limit_mb: spec.memory_limit_mb,
            cpu_ghz: spec.cpu_ghz,
            peak_tracked_bytes: ctx.memory.peak(),
            egress_bytes: ctx.egress_bytes,
            outcome,
            round,
            client_id: client_id.map(str::to_string),
        };

        {
            let mut pool = dep.pool.lock().expect("pool poisoned");
            let inst = pool
                .instances
                .iter_mut()
                .find(|i| i.id == instance_id)
                .expect("busy instances are never reclaimed");
            inst.busy = false;
            inst.busy_until = at + duration_s;
            inst.busy_s += duration_s;
            inst.cache = Some(ctx.cache);
        }
        self.records.lock().expect("records poisoned").push(record.clone());

        let (response, error) = match result {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e)),
        };
        Ok(Invocation { response, error, record })
    }

    /// Destroys instances idle for at least their keep-warm period.
    pub fn reclaim_idle(&self, now: f64) -> usize {
        let deployments: Vec<_> = self.deployments.read().expect("deployments poisoned").values().cloned().collect();
        deployments
            .iter()
            .map(|d| d.pool.lock().expect("pool poisoned").reclaim(now, d.spec.keep_warm_s))
            .sum()
    }

    pub fn instance_count(&self, function_id: &str) -> usize {
        self.deployed(function_id)
            .map(|d| d.pool.lock().expect("pool poisoned").instances.len())
            .unwrap_or(0)
    }

    pub fn instance_ids(&self, function_id: &str) -> Vec<String> {
        self.deployed(function_id)
            .map(|d| d.pool.lock().expect("pool poisoned").instances.iter().map(|i| i.id.clone()).collect())
            .unwrap_or_default()
    }

    /// Total busy seconds across live and reclaimed instances.
    pub fn busy_time_ledger(&self) -> f64 {
        let deployments: Vec<_> = self.deployments.read().expect("deployments poisoned").values().cloned().collect();
        deployments
            .iter()
            .map(|d| {
                let pool = d.pool.lock().expect("pool poisoned");
                pool.retired_busy_s + pool.instances.iter().map(|i| i.busy_s).sum::<f64>()
            })
            .sum()
    }

    pub fn records(&self) -> Vec<InvocationRecord> {
        self.records.lock().expect("records poisoned").clone()
    }

    pub fn record_count(&self) -> usize {
        self.records.lock().expect("records poisoned").len()
    }

    pub fn billing_summary(&self) -> BillingSummary {
        billing_summary(&self.records(), self.granularity_s)
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("handler panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("handler panicked: {s}")
    } else {
        "handler panicked".into()
    }
}
