//! Signed invocation tokens.
//!
//! An [`AuthServer`] hands out short-lived Ed25519-signed tokens to the
//! controller; client functions check them with a [`Verifier`] that caches the
//! issuer's public key for the life of the function instance. Public keys are
//! published through a [`KeyRegistry`] which counts every fetch.
//!
//! Token format: `b64url(header) . b64url(payload) . b64url(signature)` where
//! the payload is JSON with keys in lexicographic order and the signature
//! covers the first two segments exactly as transmitted.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SharedClock;

pub const DEFAULT_TOKEN_TTL_S: f64 = 900.0;
pub const INVOKE_CLIENTS_SCOPE: &str = "invoke:clients";

const HEADER: &str = r#"{"alg":"EdDSA","typ":"JWT"}"#;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuthError {
    #[error("invalid server credentials for `{0}`")]
    BadCredentials(String),
    #[error("no published key `{key_id}` for issuer `{issuer}`")]
    UnknownKey { issuer: String, key_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BadSignature,
    Expired,
    InsufficientScope,
    WrongIssuer,
    MissingApiToken,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BadSignature => "bad_signature",
            Self::Expired => "expired",
            Self::InsufficientScope => "insufficient_scope",
            Self::WrongIssuer => "wrong_issuer",
            Self::MissingApiToken => "missing_api_token",
        }
    }
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Signed claims. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Claims {
    pub exp: f64,
    pub iat: f64,
    pub iss: String,
    pub kid: String,
    pub nonce: u64,
    pub scopes: BTreeSet<String>,
    pub sub: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvocationToken {
    pub claims: Claims,
    pub signature: [u8; 64],
    encoded: String,
}

impl InvocationToken {
    pub fn as_str(&self) -> &str {
        &self.encoded
    }
}

impl std::fmt::Display for InvocationToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.encoded)
    }
}

#[derive(Debug, Clone)]
pub struct SigningKeyPair {
    pub key_id: String,
    signing: SigningKey,
}

impl SigningKeyPair {
    pub fn generate(key_id: impl Into<String>, rng: &mut impl Rng) -> Self {
        Self {
            key_id: key_id.into(),
            signing: SigningKey::from_bytes(&rng.random()),
        }
    }

    pub fn signing_key(&self) -> &SigningKey {
        &self.signing
    }

    pub fn public(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }
}

/// Public key distribution endpoint.
#[derive(Debug, Default)]
pub struct KeyRegistry {
    keys: RwLock<HashMap<(String, String), VerifyingKey>>,
    fetches: AtomicU64,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, issuer: &str, key_id: &str, key: VerifyingKey) {
        self.keys
            .write()
            .expect("key registry poisoned")
            .insert((issuer.to_string(), key_id.to_string()), key);
    }

    pub fn fetch(&self, issuer: &str, key_id: &str) -> Result<VerifyingKey, AuthError> {
        self.fetches.fetch_add(1, Ordering::SeqCst);
        self.keys
            .read()
            .expect("key registry poisoned")
            .get(&(issuer.to_string(), key_id.to_string()))
            .copied()
            .ok_or_else(|| AuthError::UnknownKey {
                issuer: issuer.to_string(),
                key_id: key_id.to_string(),
            })
    }

    pub fn fetch_count(&self) -> u64 {
        self.fetches.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerCredentials {
    pub client_id: String,
    pub client_secret: String,
}

#[derive(Debug)]
pub struct AuthServer {
    issuer: String,
    scopes: BTreeSet<String>,
    ttl_s: f64,
    clock: SharedClock,
    registry: Arc<KeyRegistry>,
    key: RwLock<SigningKeyPair>,
    key_seq: AtomicU64,
    rng: Mutex<ChaCha20Rng>,
    nonce: AtomicU64,
    servers: RwLock<HashMap<String, String>>,
}

impl AuthServer {
    pub fn new(issuer: impl Into<String>, seed: u64, clock: SharedClock, registry: Arc<KeyRegistry>) -> Self {
        let issuer = issuer.into();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let key = SigningKeyPair::generate("key-0", &mut rng);
        registry.publish(&issuer, &key.key_id, key.public());
        Self {
            issuer,
            scopes: BTreeSet::from([INVOKE_CLIENTS_SCOPE.to_string()]),
            ttl_s: DEFAULT_TOKEN_TTL_S,
            clock,
            registry,
            key: RwLock::new(key),
            key_seq: AtomicU64::new(1),
            nonce: AtomicU64::new(rng.random::<u32>() as u64),
            rng: Mutex::new(rng),
            servers: RwLock::new(HashMap::new()),
        }
    }

    pub fn with_ttl(mut self, ttl_s: f64) -> Self {
        self.ttl_s = ttl_s;
        self
    }

    pub fn with_scopes<I: IntoIterator<Item = S>, S: Into<String>>(mut self, scopes: I) -> Self {
        self.scopes = scopes.into_iter().map(Into::into).collect();
        self
    }

    pub fn issuer(&self) -> &str {
        &self.issuer
    }

    pub fn registry(&self) -> &Arc<KeyRegistry> {
        &self.registry
    }

    pub fn current_key_id(&self) -> String {
        self.key.read().expect("key poisoned").key_id.clone()
    }

    /// Registers a controller and returns its credentials.
    pub fn register_server(&self, client_id: &str) -> ServerCredentials {
        let secret: [u8; 24] = self.rng.lock().expect("rng poisoned").random();
        let creds = ServerCredentials {
            client_id: client_id.to_string(),
            client_secret: URL_SAFE_NO_PAD.encode(secret),
        };
        self.servers
            .write()
            .expect("server table poisoned")
            .insert(creds.client_id.clone(), creds.client_secret.clone());
        creds
    }

    /// Replaces the signing key and publishes the new public key. Tokens
    /// signed with older keys stay valid until they expire.
    pub fn rotate_key(&self) -> String {
        let id = format!("key-{}", self.key_seq.fetch_add(1, Ordering::SeqCst));
        let key = SigningKeyPair::generate(id.clone(), &mut *self.rng.lock().expect("rng poisoned"));
        self.registry.publish(&self.issuer, &id, key.public());
        *self.key.write().expect("key poisoned") = key;
        id
    }

    pub fn fetch_token(&self, creds: &ServerCredentials) -> Result<InvocationToken, AuthError> {
        let ok = self
            .servers
            .read()
            .expect("server table poisoned")
            .get(&creds.client_id)
            .is_some_and(|s| constant_time_eq(s.as_bytes(), creds.client_secret.as_bytes()));
        if !ok {
            return Err(AuthError::BadCredentials(creds.client_id.clone()));
        }
        let now = self.clock.now();
        let key = self.key.read().expect("key poisoned");
        let claims = Claims {
            exp: now + self.ttl_s,
            iat: now,
            iss: self.issuer.clone(),
            kid: key.key_id.clone(),
            nonce: self.nonce.fetch_add(1, Ordering::SeqCst),
            scopes: self.scopes.clone(),
            sub: creds.client_id.clone(),
        };
        Ok(sign(&claims, &key.signing))
    }
}

/// Signs arbitrary claims. Exposed so tests can mint tokens under keys the
/// verifier does not trust.
pub fn sign(claims: &Claims, key: &SigningKey) -> InvocationToken {
    let payload = serde_json::to_vec(claims).expect("claims serialize");
    let signing_input = format!(
        "{}.{}",
        URL_SAFE_NO_PAD.encode(HEADER),
        URL_SAFE_NO_PAD.encode(payload)
    );
    let signature = key.sign(signing_input.as_bytes()).to_bytes();
    InvocationToken {
        claims: claims.clone(),
        signature,
        encoded: format!("{signing_input}.{}", URL_SAFE_NO_PAD.encode(signature)),
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientAuthPolicy {
    pub trusted_issuer: String,
    pub required_scopes: BTreeSet<String>,
    #[serde(default)]
    pub extra_api_token: Option<String>,
}

impl ClientAuthPolicy {
    pub fn new(trusted_issuer: impl Into<String>) -> Self {
        Self {
            trusted_issuer: trusted_issuer.into(),
            required_scopes: BTreeSet::from([INVOKE_CLIENTS_SCOPE.to_string()]),
            extra_api_token: None,
        }
    }

    pub fn with_api_token(mut self, token: impl Into<String>) -> Self {
        self.extra_api_token = Some(token.into());
        self
    }
}

/// Splits and decodes a token without checking anything.
fn parse(token: &str) -> Option<(&str, Claims, Signature)> {
    let (signing_input, sig_b64) = token.rsplit_once('.')?;
    let (header_b64, payload_b64) = signing_input.split_once('.')?;
    if URL_SAFE_NO_PAD.decode(header_b64).ok()? != HEADER.as_bytes() {
        return None;
    }
    let claims: Claims = serde_json::from_slice(&URL_SAFE_NO_PAD.decode(payload_b64).ok()?).ok()?;
    let sig: [u8; 64] = URL_SAFE_NO_PAD.decode(sig_b64).ok()?.try_into().ok()?;
    Some((signing_input, claims, Signature::from_bytes(&sig)))
}

/// Validates tokens against a policy, keeping the last fetched public key in
/// memory. One verifier lives in each warm function instance.
#[derive(Debug)]
pub struct Verifier {
    policy: ClientAuthPolicy,
    registry: Arc<KeyRegistry>,
    cached: Mutex<Option<(String, VerifyingKey)>>,
    fetches: AtomicU64,
}

impl Verifier {
    pub fn new(policy: ClientAuthPolicy, registry: Arc<KeyRegistry>) -> Self {
        Self {
            policy,
            registry,
            cached: Mutex::new(None),
            fetches: AtomicU64::new(0),
        }
    }

    /// Key fetches made by this verifier.
    pub fn fetch_count(&self) -> u64 {
        self.fetches.load(Ordering::SeqCst)
    }

    pub fn policy(&self) -> &ClientAuthPolicy {
        &self.policy
    }

    fn key_for(&self, key_id: &str) -> Option<VerifyingKey> {
        let mut cached = self.cached.lock().expect("verifier cache poisoned");
        if let Some((id, key)) = cached.as_ref() {
            if id == key_id {
                return Some(*key);
            }
        }
        self.fetches.fetch_add(1, Ordering::SeqCst);
        let key = self.registry.fetch(&self.policy.trusted_issuer, key_id).ok()?;
        *cached = Some((key_id.to_string(), key));
        Some(key)
    }

    pub fn validate(&self, token: &str, api_token: Option<&str>, now: f64) -> Result<Claims, RejectReason> {
        let (signing_input, claims, sig) = parse(token).ok_or(RejectReason::BadSignature)?;
        if claims.iss != self.policy.trusted_issuer {
            return Err(RejectReason::WrongIssuer);
        }
        let key = self.key_for(&claims.kid).ok_or(RejectReason::BadSignature)?;
        key.verify_strict(signing_input.as_bytes(), &sig)
            .map_err(|_| RejectReason::BadSignature)?;
        if !(claims.exp > claims.iat) || now >= claims.exp {
            return Err(RejectReason::Expired);
        }
        if !claims.scopes.is_superset(&self.policy.required_scopes) {
            return Err(RejectReason::InsufficientScope);
        }
        if let Some(expected) = &self.policy.extra_api_token {
            if !api_token.is_some_and(|t| constant_time_eq(t.as_bytes(), expected.as_bytes())) {
                return Err(RejectReason::MissingApiToken);
            }
        }
        Ok(claims)
    }
}

/// One-shot validation with a fresh verifier.
pub fn validate_token(
    token: &str,
    policy: &ClientAuthPolicy,
    registry: &Arc<KeyRegistry>,
    api_token: Option<&str>,
    now: f64,
) -> Result<Claims, RejectReason> {
    Verifier::new(policy.clone(), registry.clone()).validate(token, api_token, now)
}
