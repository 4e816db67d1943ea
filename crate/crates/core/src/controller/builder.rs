use std::path::PathBuf;
use std::sync::Arc;

use super::{ClientRecord, ClientRegistry, Controller, ControllerError, MetricsLog, Result, RoundReport, SessionConfig};
use crate::aggregator::{AggregatorFunction, AGGREGATOR_MEMORY_MB};
use crate::auth::{AuthServer, ClientAuthPolicy, KeyRegistry};
use crate::client::ClientFunction;
use crate::clock::SimClock;
use crate::data::{Partition, ShardStore};
use crate::fabric::{Fabric, FabricConfig, FunctionDeployment, FunctionRole, Handler};
use crate::store::{MemoryBackend, ParamStore, StoreConfig, StoreCredential};

const ISSUER: &str = "https://auth.faasfl.local";

/// Replaces a client's handler, given the stock one.
pub type HandlerWrapper = Arc<dyn Fn(Arc<dyn Handler>) -> Arc<dyn Handler> + Send + Sync>;

#[derive(Clone)]
struct Wrapped(usize, HandlerWrapper);

impl std::fmt::Debug for Wrapped {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Wrapped({})", self.0)
    }
}

/// Client ids are assigned to partitions in order.
pub fn client_id(k: usize) -> String {
    format!("client-{k:04}")
}

/// Assembles store, auth server, shard registry, fabric deployments and
/// controller for one session on a shared simulated clock.
#[derive(Debug, Clone)]
pub struct FederationBuilder {
    config: SessionConfig,
    fabric: FabricConfig,
    partitions: Vec<Partition>,
    central_test: Option<Partition>,
    client_template: FunctionDeployment,
    aggregator_template: FunctionDeployment,
    shard_latency_s: f64,
    store_config: StoreConfig,
    store_dir: Option<PathBuf>,
    auth_seed: u64,
    api_token: Option<String>,
    metrics_path: Option<PathBuf>,
    wrappers: Vec<Wrapped>,
}

impl FederationBuilder {
    pub fn new(config: SessionConfig, partitions: Vec<Partition>) -> Self {
        let auth_seed = config.seed;
        Self {
            config,
            fabric: FabricConfig::default(),
            partitions,
            central_test: None,
            client_template: FunctionDeployment::new("client", 2048).with_role(FunctionRole::Client),
            aggregator_template: FunctionDeployment::new("aggregator", AGGREGATOR_MEMORY_MB)
                .with_role(FunctionRole::Aggregator),
            shard_latency_s: 0.0,
            store_config: StoreConfig::default(),
            store_dir: None,
            auth_seed,
            api_token: None,
            metrics_path: None,
            wrappers: Vec::new(),
        }
    }

    /// Global fabric settings. Deployments listed here with role `client`
    /// are shared round-robin by the clients; otherwise every client gets
    /// its own deployment cloned from the client template.
    pub fn fabric_config(mut self, cfg: FabricConfig) -> Self {
        self.fabric = cfg;
        self
    }

    pub fn central_test(mut self, partition: Partition) -> Self {
        self.central_test = Some(partition);
        self
    }

    pub fn client_template(mut self, d: FunctionDeployment) -> Self {
        self.client_template = d;
        self
    }

    pub fn aggregator_template(mut self, d: FunctionDeployment) -> Self {
        self.aggregator_template = d;
        self
    }

    /// Extra virtual seconds every uncached shard load costs.
    pub fn shard_latency(mut self, seconds: f64) -> Self {
        self.shard_latency_s = seconds;
        self
    }

    pub fn store_config(mut self, cfg: StoreConfig) -> Self {
        self.store_config = cfg;
        self
    }

    /// Persists the parameter store under `dir` instead of in memory.
    pub fn store_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.store_dir = Some(dir.into());
        self
    }

    pub fn api_token(mut self, token: impl Into<String>) -> Self {
        self.api_token = Some(token.into());
        self
    }

    pub fn metrics_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.metrics_path = Some(path.into());
        self
    }

    /// Deploys client `k` on its own function whose handler is
    /// `wrap(stock client handler)`. Used to inject slow or faulty clients.
    pub fn wrap_client(
        mut self,
        k: usize,
        wrap: impl Fn(Arc<dyn Handler>) -> Arc<dyn Handler> + Send + Sync + 'static,
    ) -> Self {
        self.wrappers.push(Wrapped(k, Arc::new(wrap)));
        self
    }

    pub fn build(self) -> Result<Federation> {
        self.config.validate()?;
        if self.partitions.len() != self.config.total_clients {
            return Err(ControllerError::Config(format!(
                "{} partitions for {} clients",
                self.partitions.len(),
                self.config.total_clients
            )));
        }
        self.fabric.validate()?;
        let clock = SimClock::new(0.0);
        let (store, admin) = match &self.store_dir {
            Some(dir) => ParamStore::open_dir(self.store_config.clone(), dir, Arc::new(clock.clone()))?,
            None => ParamStore::with_backend(
                self.store_config.clone(),
                Arc::new(MemoryBackend::new()),
                Arc::new(clock.clone()),
            ),
        };
        let store = Arc::new(store);
        let keys = Arc::new(KeyRegistry::new());
        let auth = Arc::new(AuthServer::new(ISSUER, self.auth_seed, Arc::new(clock.clone()), keys.clone()));
        let mut policy = ClientAuthPolicy::new(ISSUER);
        if let Some(t) = &self.api_token {
            policy = policy.with_api_token(t.clone());
        }

        let shards = Arc::new(ShardStore::with_latency(self.shard_latency_s));
        for p in self.partitions.iter().chain(&self.central_test) {
            shards
                .register(p.clone())
                .map_err(|e| ControllerError::Config(e.to_string()))?;
        }

        let fabric = Arc::new(Fabric::new(&self.fabric));
        let client_fn = Arc::new(ClientFunction::new(store.clone(), shards.clone(), keys.clone(), policy.clone()));
        let agg_fn = Arc::new(AggregatorFunction::new(store.clone(), shards.clone(), keys, policy));

        let configured = self.fabric.resolved_deployments()?;
        let shared: Vec<_> = configured.iter().filter(|d| d.role == FunctionRole::Client).cloned().collect();
        let agg = configured
            .iter()
            .find(|d| d.role == FunctionRole::Aggregator)
            .cloned()
            .unwrap_or_else(|| self.aggregator_template.clone());
        for d in &shared {
            fabric.deploy(d.clone(), client_fn.clone())?;
        }
        let aggregator_id = agg.function_id.clone();
        fabric.deploy(agg, agg_fn)?;

        let mut registry = ClientRegistry::new();
        for (k, p) in self.partitions.iter().enumerate() {
            let wrapper = self.wrappers.iter().rev().find(|w| w.0 == k);
            let spec = if shared.is_empty() || wrapper.is_some() {
                let mut d = self.client_template.clone();
                d.function_id = client_id(k);
                let stock: Arc<dyn Handler> = client_fn.clone();
                let handler = match wrapper {
                    Some(w) => (w.1)(stock),
                    None => stock,
                };
                fabric.deploy(d.clone(), handler)?;
                d
            } else {
                shared[k % shared.len()].clone()
            };
            registry.register(
                &fabric,
                &client_id(k),
                ClientRecord {
                    function_id: spec.function_id,
                    shard_id: p.shard_id.clone(),
                    hyperparams: self.config.hyperparams,
                    platform_label: spec.platform_label,
                    registered_at: 0.0,
                },
            )?;
        }

        let mut controller = Controller::new(
            self.config,
            fabric.clone(),
            store.clone(),
            admin.clone(),
            auth.clone(),
            clock.clone(),
            registry,
            &aggregator_id,
        )?;
        if let Some(t) = self.api_token {
            controller = controller.with_api_token(t);
        }
        if let Some(path) = &self.metrics_path {
            controller = controller.with_metrics_log(MetricsLog::create(path)?);
        }
        Ok(Federation {
            controller,
            fabric,
            store,
            admin,
            shards,
            auth,
            client_fn,
            clock,
        })
    }
}

/// A fully wired simulated deployment.
#[derive(Debug)]
pub struct Federation {
    pub controller: Controller,
    pub fabric: Arc<Fabric>,
    pub store: Arc<ParamStore>,
    pub admin: StoreCredential,
    pub shards: Arc<ShardStore>,
    pub auth: Arc<AuthServer>,
    pub client_fn: Arc<ClientFunction>,
    pub clock: SimClock,
}

impl Federation {
    pub fn run(&mut self) -> Result<Vec<RoundReport>> {
        self.controller.run_session()
    }
}
