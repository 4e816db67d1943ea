//! The parameter server: versioned global models stored as chunked blobs,
//! per-round client results, and temporary per-principal credentials that
//! confine each client function to reading the global model and writing its
//! own result.
//!
//! Document layout (identical for the in-memory and directory backends):
//!
//! ```text
//! sessions/<id>/session.json
//! sessions/<id>/global/<version>/chunk_<k>.bin
//! sessions/<id>/global/<version>/manifest.json
//! sessions/<id>/results/<round>/<client_id>.bin        (chunk 0)
//! sessions/<id>/results/<round>/<client_id>.bin.<k>    (chunk k > 0)
//! counters/<client_id>.json
//! ```

mod backend;
mod gauge;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::{SharedClock, WallClock};
use crate::data::DataError;
use crate::tensor::{decode_parameter_set, encode_parameter_set, ModelSpec, ParameterSet, TensorError};

pub use backend::{DirBackend, DocumentBackend, MemoryBackend};
pub use gauge::{Gauge, GaugeGuard};

pub const DEFAULT_DOC_SIZE_LIMIT: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthFailure {
    UnknownPrincipal,
    BadSecret,
    Revoked,
    Expired,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("authentication failed: {0:?}")]
    Authentication(AuthFailure),
    #[error("principal `{principal}` may not {action}")]
    Authorization { principal: String, action: String },
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` already exists")]
    SessionExists(String),
    #[error("no global model committed for session `{0}`")]
    NoGlobalModel(String),
    #[error("result for round {got} is stale; current round is {current}")]
    StaleRound { got: u64, current: u64 },
    #[error("invalid client result: {0}")]
    InvalidResult(String),
    #[error("blob `{0}` failed checksum verification")]
    Corruption(String),
    #[error("document `{key}` is {size} bytes, limit is {limit}")]
    DocumentTooLarge { key: String, size: usize, limit: usize },
    #[error("store metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Backend(#[from] std::io::Error),
}

impl StoreError {
    pub fn is_auth(&self) -> bool {
        matches!(self, Self::Authentication(_) | Self::Authorization { .. })
    }
}

impl From<DataError> for StoreError {
    fn from(e: DataError) -> Self {
        Self::Metadata(e.to_string())
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scope {
    Admin,
    ReadGlobal { session: String },
    WriteGlobal { session: String },
    ReadResults { session: String },
    WriteResult { session: String, client_id: String },
    InvocationCounter { client_id: String },
}

/// Who a temporary credential is being issued for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Grant {
    Client(String),
    Aggregator,
}

/// Bearer credential handed to a function. The scope list is informational;
/// the store authorizes against its own record for `principal`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreCredential {
    pub principal: String,
    pub secret: String,
    pub scopes: BTreeSet<Scope>,
    pub expiry: f64,
}

#[derive(Debug, Clone)]
struct PrincipalRecord {
    secret: String,
    scopes: BTreeSet<Scope>,
    expiry: f64,
    revoked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub test_cardinality: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientResult {
    pub session_id: String,
    pub round: u64,
    pub client_id: String,
    pub params: ParameterSet,
    pub cardinality: u64,
    pub test_metrics: Option<EvalMetrics>,
}

/// Manifest of a blob split into documents no larger than the store's limit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkedBlob {
    pub blob_id: String,
    pub chunk_ids: Vec<String>,
    pub total_bytes: usize,
    /// Hex SHA-256 of the concatenated chunks.
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GlobalManifest {
    version: u64,
    blob: ChunkedBlob,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionDoc {
    model: ModelSpec,
    current_round: u64,
}

#[derive(Debug, Clone, Serialize)]
struct ResultMeta {
    blob: ChunkedBlob,
    cardinality: u64,
    test_metrics: Option<EvalMetrics>,
}

#[derive(Debug)]
struct SessionState {
    model: ModelSpec,
    current_round: u64,
    next_version: u64,
    head: Option<u64>,
    versions: BTreeMap<u64, ChunkedBlob>,
    results: BTreeMap<(u64, String), ResultMeta>,
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub doc_size_limit: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            doc_size_limit: DEFAULT_DOC_SIZE_LIMIT,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn random_secret() -> String {
    hex(&rand::rng().random::<[u8; 32]>())
}

#[derive(Debug)]
pub struct ParamStore {
    config: StoreConfig,
    backend: Arc<dyn DocumentBackend>,
    clock: SharedClock,
    principals: RwLock<HashMap<String, PrincipalRecord>>,
    principal_seq: Mutex<u64>,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionState>>>>,
    counters: Mutex<BTreeMap<String, u64>>,
}

impl ParamStore {
    /// In-memory store on the wall clock. Returns the store and its admin
    /// credential.
    pub fn in_memory(config: StoreConfig) -> (Self, StoreCredential) {
        Self::with_backend(config, Arc::new(MemoryBackend::new()), Arc::new(WallClock))
    }

    pub fn with_backend(
        config: StoreConfig,
        backend: Arc<dyn DocumentBackend>,
        clock: SharedClock,
    ) -> (Self, StoreCredential) {
        let store = Self {
            config,
            backend,
            clock,
            principals: RwLock::new(HashMap::new()),
            principal_seq: Mutex::new(0),
            sessions: RwLock::new(HashMap::new()),
            counters: Mutex::new(BTreeMap::new()),
        };
        let admin = StoreCredential {
            principal: "admin".into(),
            secret: random_secret(),
            scopes: BTreeSet::from([Scope::Admin]),
            expiry: f64::INFINITY,
        };
        store.principals.write().expect("principals poisoned").insert(
            admin.principal.clone(),
            PrincipalRecord {
                secret: admin.secret.clone(),
                scopes: admin.scopes.clone(),
                expiry: admin.expiry,
                revoked: false,
            },
        );
        (store, admin)
    }

    /// Reopens a directory-backed store, restoring sessions, committed global
    /// models and invocation counters. Client results and credentials are
    /// not restored.
    pub fn open_dir(
        config: StoreConfig,
        root: &Path,
        clock: SharedClock,
    ) -> Result<(Self, StoreCredential)> {
        let backend = Arc::new(DirBackend::new(root)?);
        let (store, admin) = Self::with_backend(config, backend.clone(), clock);
        let keys = backend.keys()?;
        for key in &keys {
            let parts: Vec<&str> = key.split('/').collect();
            match parts.as_slice() {
                ["sessions", id, "session.json"] => {
                    let doc: SessionDoc = store.read_json(key)?;
                    store.sessions.write().expect("sessions poisoned").insert(
                        id.to_string(),
                        Arc::new(Mutex::new(SessionState {
                            model: doc.model,
                            current_round: doc.current_round,
                            next_version: 0,
                            head: None,
                            versions: BTreeMap::new(),
                            results: BTreeMap::new(),
                        })),
                    );
                }
                ["counters", file] => {
                    if let Some(client) = file.strip_suffix(".json") {
                        let count: u64 = store.read_json(key)?;
                        store
                            .counters
                            .lock()
                            .expect("counters poisoned")
                            .insert(client.to_string(), count);
                    }
                }
                _ => {}
            }
        }
        for key in &keys {
            let parts: Vec<&str> = key.split('/').collect();
            if let ["sessions", id, "global", _, "manifest.json"] = parts.as_slice() {
                let m: GlobalManifest = store.read_json(key)?;
                let session = store.session(id)?;
                let mut s = session.lock().expect("session poisoned");
                s.next_version = s.next_version.max(m.version + 1);
                s.head = Some(s.head.map_or(m.version, |h| h.max(m.version)));
                s.versions.insert(m.version, m.blob);
            }
        }
        Ok((store, admin))
    }

    pub fn doc_size_limit(&self) -> usize {
        self.config.doc_size_limit
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let bytes = self
            .backend
            .get(key)?
            .ok_or_else(|| StoreError::Metadata(format!("missing document `{key}`")))?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Metadata(format!("{key}: {e}")))
    }

    fn write_json<T: Serialize>(&self, key: &str, value: &T) -> Result<()> {
        // manifests and small index documents are not subject to the chunk limit
        let bytes =
            serde_json::to_vec(value).map_err(|e| StoreError::Metadata(e.to_string()))?;
        Ok(self.backend.put(key, bytes)?)
    }

    fn put_document(&self, key: &str, bytes: Vec<u8>) -> Result<()> {
        if bytes.len() > self.config.doc_size_limit {
            return Err(StoreError::DocumentTooLarge {
                key: key.to_string(),
                size: bytes.len(),
                limit: self.config.doc_size_limit,
            });
        }
        Ok(self.backend.put(key, bytes)?)
    }

    // ---- credentials ---------------------------------------------------

    fn authenticate(&self, cred: &StoreCredential) -> Result<BTreeSet<Scope>> {
        let principals = self.principals.read().expect("principals poisoned");
        let rec = principals
            .get(&cred.principal)
            .ok_or(StoreError::Authentication(AuthFailure::UnknownPrincipal))?;
        if rec.secret != cred.secret {
            return Err(StoreError::Authentication(AuthFailure::BadSecret));
        }
        if rec.revoked {
            return Err(StoreError::Authentication(AuthFailure::Revoked));
        }
        if self.clock.now() >= rec.expiry {
            return Err(StoreError::Authentication(AuthFailure::Expired));
        }
        Ok(rec.scopes.clone())
    }

    fn authorize(&self, cred: &StoreCredential, needed: Scope, action: &str) -> Result<()> {
        let scopes = self.authenticate(cred)?;
        if scopes.contains(&Scope::Admin) || scopes.contains(&needed) {
            Ok(())
        } else {
            Err(StoreError::Authorization {
                principal: cred.principal.clone(),
                action: action.to_string(),
            })
        }
    }

    pub fn issue_store_credential(
        &self,
        admin: &StoreCredential,
        session: &str,
        grant: Grant,
        ttl_s: f64,
    ) -> Result<StoreCredential> {
        self.authorize(admin, Scope::Admin, "issue credentials")?;
        let seq = {
            let mut s = self.principal_seq.lock().expect("sequence poisoned");
            *s += 1;
            *s
        };
        let s = session.to_string();
        let (principal, scopes) = match grant {
            Grant::Client(client_id) => (
                format!("{session}/client/{client_id}/{seq}"),
                BTreeSet::from([
                    Scope::ReadGlobal { session: s.clone() },
                    Scope::WriteResult {
                        session: s,
                        client_id: client_id.clone(),
                    },
                    Scope::InvocationCounter { client_id },
                ]),
            ),
            Grant::Aggregator => (
                format!("{session}/aggregator/{seq}"),
                BTreeSet::from([
                    Scope::ReadGlobal { session: s.clone() },
                    Scope::WriteGlobal { session: s.clone() },
                    Scope::ReadResults { session: s },
                ]),
            ),
        };
        let cred = StoreCredential {
            principal,
            secret: random_secret(),
            scopes,
            expiry: self.clock.now() + ttl_s,
        };
        self.principals.write().expect("principals poisoned").insert(
            cred.principal.clone(),
            PrincipalRecord {
                secret: cred.secret.clone(),
                scopes: cred.scopes.clone(),
                expiry: cred.expiry,
                revoked: false,
            },
        );
        Ok(cred)
    }

    pub fn revoke_credential(&self, admin: &StoreCredential, principal: &str) -> Result<()> {
        self.authorize(admin, Scope::Admin, "revoke credentials")?;
        if let Some(rec) = self
            .principals
            .write()
            .expect("principals poisoned")
            .get_mut(principal)
        {
            rec.revoked = true;
        }
        Ok(())
    }

    // ---- sessions ------------------------------------------------------

    fn session(&self, id: &str) -> Result<Arc<Mutex<SessionState>>> {
        self.sessions
            .read()
            .expect("sessions poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownSession(id.to_string()))
    }

    pub fn create_session(&self, admin: &StoreCredential, id: &str, model: ModelSpec) -> Result<()> {
        self.authorize(admin, Scope::Admin, "create sessions")?;
        model.validate()?;
        let mut sessions = self.sessions.write().expect("sessions poisoned");
        if sessions.contains_key(id) {
            return Err(StoreError::SessionExists(id.to_string()));
        }
        self.write_json(
            &format!("sessions/{id}/session.json"),
            &SessionDoc {
                model: model.clone(),
                current_round: 0,
            },
        )?;
        sessions.insert(
            id.to_string(),
            Arc::new(Mutex::new(SessionState {
                model,
                current_round: 0,
                next_version: 0,
                head: None,
                versions: BTreeMap::new(),
                results: BTreeMap::new(),
            })),
        );
        Ok(())
    }

    pub fn model_spec(&self, cred: &StoreCredential, session: &str) -> Result<ModelSpec> {
        self.authorize(
            cred,
            Scope::ReadGlobal {
                session: session.to_string(),
            },
            "read the global model",
        )?;
        Ok(self.session(session)?.lock().expect("session poisoned").model.clone())
    }

    /// Opens `round` for result uploads; results for any other round are
    /// rejected as stale from now on.
    pub fn begin_round(&self, admin: &StoreCredential, session: &str, round: u64) -> Result<()> {
        self.authorize(admin, Scope::Admin, "advance rounds")?;
        let state = self.session(session)?;
        let mut s = state.lock().expect("session poisoned");
        s.current_round = round;
        self.write_json(
            &format!("sessions/{session}/session.json"),
            &SessionDoc {
                model: s.model.clone(),
                current_round: round,
            },
        )
    }

    pub fn current_round(&self, session: &str) -> Result<u64> {
        Ok(self.session(session)?.lock().expect("session poisoned").current_round)
    }

    // ---- blobs ---------------------------------------------------------

    fn write_blob(&self, blob_id: &str, chunk_keys: impl Fn(usize) -> String, bytes: &[u8]) -> Result<ChunkedBlob> {
        let limit = self.config.doc_size_limit.max(1);
        let mut chunk_ids: Vec<String> = Vec::with_capacity(bytes.len() / limit + 1);
        let chunks: Vec<&[u8]> = if bytes.is_empty() {
            vec![&[][..]]
        } else {
            bytes.chunks(limit).collect()
        };
        for (k, chunk) in chunks.into_iter().enumerate() {
            let key = chunk_keys(k);
            if let Err(e) = self.put_document(&key, chunk.to_vec()) {
                for written in &chunk_ids {
                    let _ = self.backend.delete(written);
                }
                return Err(e);
            }
            chunk_ids.push(key);
        }
        Ok(ChunkedBlob {
            blob_id: blob_id.to_string(),
            chunk_ids,
            total_bytes: bytes.len(),
            checksum: hex(&Sha256::digest(bytes)),
        })
    }

    fn read_blob(&self, blob: &ChunkedBlob) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(blob.total_bytes);
        for key in &blob.chunk_ids {
            let chunk = self
                .backend
                .get(key)?
                .ok_or_else(|| StoreError::Corruption(blob.blob_id.clone()))?;
            out.extend_from_slice(&chunk);
        }
        if out.len() != blob.total_bytes || hex(&Sha256::digest(&out)) != blob.checksum {
            return Err(StoreError::Corruption(blob.blob_id.clone()));
        }
        Ok(out)
    }

    // ---- global model --------------------------------------------------

    /// Stores a new global model. The first model of a session is version 0.
    /// Chunks are written first; the version becomes visible only when the
    /// head pointer is flipped afterwards.
    pub fn put_global_model(&self, cred: &StoreCredential, session: &str, params: &ParameterSet) -> Result<u64> {
        self.authorize(
            cred,
            Scope::WriteGlobal {
                session: session.to_string(),
            },
            "write the global model",
        )?;
        let state = self.session(session)?;
        let version = {
            let mut s = state.lock().expect("session poisoned");
            s.model.check_params(params)?;
            let v = s.next_version;
            s.next_version += 1;
            v
        };
        let bytes = encode_parameter_set(params);
        let prefix = format!("sessions/{session}/global/{version}");
        let blob = self.write_blob(&prefix, |k| format!("{prefix}/chunk_{k}.bin"), &bytes)?;
        self.write_json(
            &format!("{prefix}/manifest.json"),
            &GlobalManifest {
                version,
                blob: blob.clone(),
            },
        )?;
        let mut s = state.lock().expect("session poisoned");
        s.versions.insert(version, blob);
        if s.head.is_none_or(|h| version > h) {
            s.head = Some(version);
        }
        Ok(version)
    }

    pub fn get_global_model(&self, cred: &StoreCredential, session: &str) -> Result<ParameterSet> {
        self.get_global_version(cred, session, None)
    }

    /// A specific committed version, or the latest when `version` is `None`.
    pub fn get_global_version(
        &self,
        cred: &StoreCredential,
        session: &str,
        version: Option<u64>,
    ) -> Result<ParameterSet> {
        self.authorize(
            cred,
            Scope::ReadGlobal {
                session: session.to_string(),
            },
            "read the global model",
        )?;
        let (version, blob) = {
            let state = self.session(session)?;
            let s = state.lock().expect("session poisoned");
            let v = match version {
                Some(v) => v,
                None => s.head.ok_or_else(|| StoreError::NoGlobalModel(session.to_string()))?,
            };
            let blob = s
                .versions
                .get(&v)
                .cloned()
                .ok_or_else(|| StoreError::NoGlobalModel(session.to_string()))?;
            (v, blob)
        };
        let bytes = self.read_blob(&blob)?;
        let mut params = decode_parameter_set(&bytes)?;
        params.version = version;
        Ok(params)
    }

    pub fn global_version(&self, session: &str) -> Result<Option<u64>> {
        Ok(self.session(session)?.lock().expect("session poisoned").head)
    }

    /// Serialized size and chunk count of the latest global model.
    pub fn global_blob(&self, session: &str) -> Result<Option<ChunkedBlob>> {
        let state = self.session(session)?;
        let s = state.lock().expect("session poisoned");
        Ok(s.head.and_then(|h| s.versions.get(&h).cloned()))
    }

    // ---- client results ------------------------------------------------

    pub fn put_client_result(&self, cred: &StoreCredential, result: &ClientResult) -> Result<()> {
        self.authorize(
            cred,
            Scope::WriteResult {
                session: result.session_id.clone(),
                client_id: result.client_id.clone(),
            },
            "write this client result",
        )?;
        if result.cardinality == 0 {
            return Err(StoreError::InvalidResult("cardinality must be positive".into()));
        }
        let state = self.session(&result.session_id)?;
        {
            let s = state.lock().expect("session poisoned");
            if result.round != s.current_round {
                return Err(StoreError::StaleRound {
                    got: result.round,
                    current: s.current_round,
                });
            }
            s.model
                .check_params(&result.params)
                .map_err(|e| StoreError::InvalidResult(e.to_string()))?;
        }
        let base = format!(
            "sessions/{}/results/{}/{}.bin",
            result.session_id, result.round, result.client_id
        );
        let bytes = encode_parameter_set(&result.params);
        let blob = self.write_blob(
            &base,
            |k| if k == 0 { base.clone() } else { format!("{base}.{k}") },
            &bytes,
        )?;
        let mut s = state.lock().expect("session poisoned");
        if result.round != s.current_round {
            return Err(StoreError::StaleRound {
                got: result.round,
                current: s.current_round,
            });
        }
        s.results.insert(
            (result.round, result.client_id.clone()),
            ResultMeta {
                blob,
                cardinality: result.cardinality,
                test_metrics: result.test_metrics,
            },
        );
        Ok(())
    }

    /// Client ids with a stored result for `round`, sorted.
    pub fn list_round_results(&self, cred: &StoreCredential, session: &str, round: u64) -> Result<Vec<String>> {
        self.authorize(
            cred,
            Scope::ReadResults {
                session: session.to_string(),
            },
            "read client results",
        )?;
        let state = self.session(session)?;
        let s = state.lock().expect("session poisoned");
        Ok(s.results
            .keys()
            .filter(|(r, _)| *r == round)
            .map(|(_, c)| c.clone())
            .collect())
    }

    /// Lazily loads the round's results `batch_size` at a time. When
    /// `only` is given, results from other clients are skipped.
    pub fn stream_round_results<'a>(
        &'a self,
        cred: &StoreCredential,
        session: &str,
        round: u64,
        batch_size: usize,
        only: Option<&BTreeSet<String>>,
    ) -> Result<ResultStream<'a>> {
        self.authorize(
            cred,
            Scope::ReadResults {
                session: session.to_string(),
            },
            "read client results",
        )?;
        if batch_size == 0 {
            return Err(StoreError::InvalidResult("batch size must be at least 1".into()));
        }
        let state = self.session(session)?;
        let s = state.lock().expect("session poisoned");
        let pending = s
            .results
            .iter()
            .filter(|((r, c), _)| *r == round && only.is_none_or(|set| set.contains(c)))
            .map(|((_, c), m)| (c.clone(), m.clone()))
            .collect();
        Ok(ResultStream {
            store: self,
            session: session.to_string(),
            round,
            batch_size,
            pending,
            gauge: Gauge::default(),
        })
    }

    // ---- invocation counters -------------------------------------------

    /// Atomically counts one invocation for `client_id` unless that would
    /// exceed `max`. Returns whether the invocation is allowed.
    pub fn check_and_increment_counter(&self, cred: &StoreCredential, client_id: &str, max: u64) -> Result<bool> {
        self.authorize(
            cred,
            Scope::InvocationCounter {
                client_id: client_id.to_string(),
            },
            "update this invocation counter",
        )?;
        let mut counters = self.counters.lock().expect("counters poisoned");
        let count = counters.get(client_id).copied().unwrap_or(0);
        if count >= max {
            return Ok(false);
        }
        self.write_json(&format!("counters/{client_id}.json"), &(count + 1))?;
        counters.insert(client_id.to_string(), count + 1);
        Ok(true)
    }

    pub fn invocation_count(&self, client_id: &str) -> u64 {
        self.counters
            .lock()
            .expect("counters poisoned")
            .get(client_id)
            .copied()
            .unwrap_or(0)
    }

    /// Digest over every stored document and all index state. Used to prove
    /// that rejected requests leave the store untouched.
    pub fn state_digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for key in self.backend.keys()? {
            h.update(key.as_bytes());
            if let Some(doc) = self.backend.get(&key)? {
                h.update(Sha256::digest(doc.as_slice()));
            }
        }
        let sessions = self.sessions.read().expect("sessions poisoned");
        let mut ids: Vec<_> = sessions.keys().collect();
        ids.sort();
        for id in ids {
            let s = sessions[id].lock().expect("session poisoned");
            h.update(format!("{id}:{}:{:?}:{}", s.current_round, s.head, s.next_version));
            for ((r, c), m) in &s.results {
                h.update(format!("{r}/{c}:{}", serde_json::to_string(m).unwrap_or_default()));
            }
        }
        for (c, n) in self.counters.lock().expect("counters poisoned").iter() {
            h.update(format!("{c}={n}"));
        }
        Ok(hex(&h.finalize()))
    }
}

/// One batch of decoded results. Holds a gauge reservation until dropped.
#[derive(Debug)]
pub struct ResultBatch {
    pub results: Vec<ClientResult>,
    _guard: GaugeGuard,
}

#[derive(Debug)]
pub struct ResultStream<'a> {
    store: &'a ParamStore,
    session: String,
    round: u64,
    batch_size: usize,
    pending: VecDeque<(String, ResultMeta)>,
    gauge: Gauge,
}

impl ResultStream<'_> {
    /// Tracks how many results are decoded and alive at once.
    pub fn with_gauge(mut self, gauge: Gauge) -> Self {
        self.gauge = gauge;
        self
    }

    pub fn remaining(&self) -> usize {
        self.pending.len()
    }

    fn load(&self, client_id: String, meta: ResultMeta) -> Result<ClientResult> {
        let bytes = self.store.read_blob(&meta.blob)?;
        Ok(ClientResult {
            session_id: self.session.clone(),
            round: self.round,
            client_id,
            params: decode_parameter_set(&bytes)?,
            cardinality: meta.cardinality,
            test_metrics: meta.test_metrics,
        })
    }
}

impl Iterator for ResultStream<'_> {
    type Item = Result<ResultBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pending.is_empty() {
            return None;
        }
        let n = self.batch_size.min(self.pending.len());
        let guard = self.gauge.acquire(n);
        let mut results = Vec::with_capacity(n);
        for _ in 0..n {
            let (client, meta) = self.pending.pop_front().expect("n <= len");
            match self.load(client, meta) {
                Ok(r) => results.push(r),
                Err(e) => return Some(Err(e)),
            }
        }
        Some(Ok(ResultBatch {
            results,
            _guard: guard,
        }))
    }
}

#[cfg(test)]
mod tests;
