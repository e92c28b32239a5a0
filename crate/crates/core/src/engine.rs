//! The login pipeline: credential check, feature extraction, risk
//! assessment, escalation and learning on success.
//!
//! [`Engine`] is transport-agnostic; the HTTP service and the replay harness
//! both drive it. Per-user work is serialized through a per-user lock, the
//! challenge registry transitions atomically, and store saves are exclusive.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anomaly::{self, AnomalyConfig, AnomalyError, OutlierDegree, RiskAssessment};
use crate::clustering::{self, ClusterError, ElbowReport};
use crate::mfa::{
    self, AuthDecision, ChallengeKind, DecisionKind, IssuedChallenge, MfaEngine, MfaError,
    Notifier, VerifyOutcome,
};
use crate::session::{
    reconstruct_text, Dimension, FeatureVector, Field, LoginSession, Range, SessionContext,
    SessionError,
};
use crate::store::{self, AttemptOutcome, Enrollment, HashParams, ProfileStore, StoreError};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> i64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(start_ms: i64) -> Self {
        Self(AtomicI64::new(start_ms))
    }

    pub fn set(&self, ms: i64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: i64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub anomaly: AnomalyConfig,
    pub otp_ttl_ms: i64,
    /// Seeds challenge secrets, salts and per-profile clustering seeds.
    /// `None` draws challenge secrets and salts from the OS.
    pub seed: Option<u64>,
    pub hash_params: HashParams,
    /// Prefix of the out-of-band approval URLs written to the outbox.
    pub base_url: String,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            anomaly: AnomalyConfig::default(),
            otp_ttl_ms: mfa::DEFAULT_TTL_MS,
            seed: None,
            hash_params: HashParams::default(),
            base_url: "http://127.0.0.1:8807".into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("unknown user")]
    UnknownUser,
    #[error("bad credentials")]
    BadCredentials,
    #[error("profile not trained: {have} of {need} sessions")]
    NotTrained { have: usize, need: usize },
    #[error("user {0:?} already exists")]
    DuplicateUser(String),
    #[error("enrollment rejected: {0}")]
    Enrollment(StoreError),
    #[error("unknown challenge {0}")]
    UnknownChallenge(String),
    #[error("challenge closed")]
    ChallengeClosed,
    #[error("challenge kind mismatch: {0}")]
    WrongChallengeKind(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<AnomalyError> for EngineError {
    fn from(e: AnomalyError) -> Self {
        match e {
            AnomalyError::NotTrained { have, need } => EngineError::NotTrained { have, need },
            other => EngineError::Internal(other.to_string()),
        }
    }
}

impl From<ClusterError> for EngineError {
    fn from(e: ClusterError) -> Self {
        EngineError::Internal(e.to_string())
    }
}

impl From<MfaError> for EngineError {
    fn from(e: MfaError) -> Self {
        match e {
            MfaError::UnknownChallenge(id) => EngineError::UnknownChallenge(id),
            MfaError::ChallengeClosed(_) => EngineError::ChallengeClosed,
            MfaError::WrongKind { .. } => EngineError::WrongChallengeKind(e.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptStatus {
    Granted,
    Challenge,
    Denied,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttemptResult {
    pub attempt_id: String,
    pub status: AttemptStatus,
    pub decision: AuthDecision,
    pub assessment: Option<RiskAssessment>,
    pub challenge: Option<IssuedChallenge>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChallengeStatus {
    Granted,
    Denied,
    /// Wrong code; the challenge stays open.
    Retry,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ChallengeResult {
    pub status: ChallengeStatus,
    pub reason: Option<&'static str>,
    pub attempts_left: Option<u32>,
}

/// Audit record of one login attempt. Key events are not retained.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttemptRecord {
    pub attempt_id: String,
    pub username: String,
    pub session_events: usize,
    pub password_match: bool,
    pub assessment: Option<RiskAssessment>,
    pub decision: AuthDecision,
    pub challenge_id: Option<String>,
    pub outcome: AttemptOutcome,
    pub received_ms: i64,
    pub resolved_ms: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileSummary {
    pub username: String,
    pub history_len: usize,
    pub dimensions: Vec<Dimension>,
    pub ranges: Vec<(Dimension, Range)>,
    pub enrolled_context: SessionContext,
    pub seed: u64,
    pub created_ms: i64,
    pub updated_ms: i64,
}

/// Current cluster geometry of a profile, for plotting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterExport {
    pub dimensions: Vec<Dimension>,
    pub k: usize,
    pub points: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub elbow: ElbowReport,
}

struct PendingLearning {
    username: String,
    attempt_id: String,
    features: FeatureVector,
    received_ms: i64,
}

/// Per-profile clustering seed derived from the engine seed and username.
pub fn profile_seed(engine_seed: Option<u64>, username: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(engine_seed.unwrap_or(0).to_le_bytes());
    h.update(username.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub struct Engine {
    store: RwLock<ProfileStore>,
    store_path: Option<PathBuf>,
    user_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    save_lock: Mutex<()>,
    mfa: MfaEngine,
    pending: Mutex<HashMap<String, PendingLearning>>,
    records: Mutex<Vec<AttemptRecord>>,
    attempt_counter: AtomicU64,
    salt_rng: Mutex<ChaCha20Rng>,
    clock: Arc<dyn Clock>,
    config: EngineConfig,
}

impl Engine {
    pub fn new(
        store: ProfileStore,
        config: EngineConfig,
        notifier: Arc<dyn Notifier>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let mfa_seed = config.seed.map(|s| clustering::restart_seed(s, 1));
        let salt_rng = match config.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(clustering::restart_seed(s, 2)),
            None => ChaCha20Rng::from_os_rng(),
        };
        Self {
            store: RwLock::new(store),
            store_path: None,
            user_locks: Mutex::new(HashMap::new()),
            save_lock: Mutex::new(()),
            mfa: MfaEngine::new(
                notifier,
                mfa_seed,
                config.otp_ttl_ms,
                config.base_url.clone(),
            ),
            pending: Mutex::new(HashMap::new()),
            records: Mutex::new(Vec::new()),
            attempt_counter: AtomicU64::new(0),
            salt_rng: Mutex::new(salt_rng),
            clock,
            config,
        }
    }

    /// Persists the store to `path` after every change.
    pub fn with_store_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.store_path = Some(path.into());
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn now_ms(&self) -> i64 {
        self.clock.now_ms()
    }

    pub fn snapshot(&self) -> ProfileStore {
        self.store.read().expect("store lock").clone()
    }

    pub fn records(&self) -> Vec<AttemptRecord> {
        self.records.lock().expect("records lock").clone()
    }

    fn user_lock(&self, username: &str) -> Arc<Mutex<()>> {
        self.user_locks
            .lock()
            .expect("user locks")
            .entry(username.to_string())
            .or_default()
            .clone()
    }

    fn persist(&self) {
        let Some(path) = &self.store_path else { return };
        let _exclusive = self.save_lock.lock().expect("save lock");
        let snapshot = self.snapshot();
        if let Err(e) = snapshot.save(path) {
            tracing::warn!("store save failed, learning not persisted: {e}");
        }
    }

    pub fn username_exists(&self, username: &str) -> bool {
        self.store
            .read()
            .expect("store lock")
            .verify_username(username)
    }

    pub fn enroll(
        &self,
        username: &str,
        password: &str,
        sessions: &[LoginSession],
        context: Option<SessionContext>,
    ) -> Result<usize, EngineError> {
        let lock = self.user_lock(username);
        let _guard = lock.lock().expect("user lock");
        if self.username_exists(username) {
            return Err(EngineError::DuplicateUser(username.to_string()));
        }
        let profile = {
            let mut rng = self.salt_rng.lock().expect("salt rng");
            store::enroll(
                Enrollment {
                    username,
                    password,
                    sessions,
                    context,
                    min_history: self.config.anomaly.min_history,
                    hash_params: self.config.hash_params,
                    seed: profile_seed(self.config.seed, username),
                    now_ms: self.now_ms(),
                },
                &mut *rng,
            )
        };
        let profile = profile.map_err(|e| match e {
            StoreError::Hash(m) => EngineError::Internal(m),
            other => EngineError::Enrollment(other),
        })?;
        let trained = profile.raw_history.len();
        self.store
            .write()
            .expect("store lock")
            .insert(profile)
            .map_err(|_| EngineError::DuplicateUser(username.to_string()))?;
        self.persist();
        Ok(trained)
    }

    fn next_attempt_id(&self) -> String {
        format!(
            "att-{:08}",
            self.attempt_counter.fetch_add(1, Ordering::SeqCst) + 1
        )
    }

    fn record(&self, record: AttemptRecord) {
        self.records.lock().expect("records lock").push(record);
    }

    /// Runs one login attempt through the whole pipeline.
    pub fn attempt(&self, session: &LoginSession) -> Result<AttemptResult, EngineError> {
        let received_ms = self.now_ms();
        let username = session.username_claim.as_str();
        if !self.username_exists(username) {
            return Err(EngineError::UnknownUser);
        }
        let lock = self.user_lock(username);
        let _guard = lock.lock().expect("user lock");
        let profile = self
            .store
            .read()
            .expect("store lock")
            .get(username)
            .cloned()
            .ok_or(EngineError::UnknownUser)?;

        let attempt_id = self.next_attempt_id();
        let typed_user_ok = session.fields.username.is_none()
            || reconstruct_text(session, Field::Username)? == username;
        let typed_password = reconstruct_text(session, Field::Password)?;
        if !(typed_user_ok & profile.verify_password(&typed_password)) {
            self.record(AttemptRecord {
                attempt_id,
                username: username.to_string(),
                session_events: session.events.len(),
                password_match: false,
                assessment: None,
                decision: AuthDecision::Deny,
                challenge_id: None,
                outcome: AttemptOutcome::Denied,
                received_ms,
                resolved_ms: Some(received_ms),
            });
            return Err(EngineError::BadCredentials);
        }

        let raw = profile.attempt_features(session)?;
        let min_history = self.config.anomaly.min_history;
        if profile.raw_history.len() < min_history {
            return Err(EngineError::NotTrained {
                have: profile.raw_history.len(),
                need: min_history,
            });
        }
        let history = profile.normalized_history()?;
        let attempt_point = profile.attempt_point(&raw, self.config.anomaly.clamp_attempts)?;
        let assessment =
            anomaly::assess(&history, &attempt_point, profile.seed, &self.config.anomaly)?;

        let (status, decision, challenge) = match mfa::decide(&assessment) {
            DecisionKind::Grant => (AttemptStatus::Granted, AuthDecision::Grant, None),
            kind => {
                let ck = if kind == DecisionKind::ChallengeOtp {
                    ChallengeKind::Otp
                } else {
                    ChallengeKind::Oob
                };
                let issued = self.mfa.issue(ck, username, received_ms);
                let decision = match ck {
                    ChallengeKind::Otp => AuthDecision::ChallengeOtp(issued.id.clone()),
                    ChallengeKind::Oob => AuthDecision::ChallengeOob(issued.id.clone()),
                };
                (AttemptStatus::Challenge, decision, Some(issued))
            }
        };

        match &challenge {
            None => self.learn(username, raw, received_ms),
            Some(issued) => {
                self.pending.lock().expect("pending lock").insert(
                    issued.id.clone(),
                    PendingLearning {
                        username: username.to_string(),
                        attempt_id: attempt_id.clone(),
                        features: raw,
                        received_ms,
                    },
                );
            }
        }

        self.record(AttemptRecord {
            attempt_id: attempt_id.clone(),
            username: username.to_string(),
            session_events: session.events.len(),
            password_match: true,
            assessment: Some(assessment.clone()),
            decision: decision.clone(),
            challenge_id: challenge.as_ref().map(|c| c.id.clone()),
            outcome: if status == AttemptStatus::Granted {
                AttemptOutcome::Granted
            } else {
                AttemptOutcome::PendingChallenge
            },
            received_ms,
            resolved_ms: (status == AttemptStatus::Granted).then_some(received_ms),
        });

        Ok(AttemptResult {
            attempt_id,
            status,
            decision,
            assessment: Some(assessment),
            challenge,
        })
    }

    /// Appends a granted attempt to its profile; failures only skip learning.
    fn learn(&self, username: &str, raw: FeatureVector, timestamp_ms: i64) {
        let appended = {
            let mut store = self.store.write().expect("store lock");
            match store.get_mut(username) {
                Some(p) => p.append_success(raw, timestamp_ms, AttemptOutcome::Granted),
                None => Err(StoreError::UnknownUser(username.to_string())),
            }
        };
        match appended {
            Ok(()) => self.persist(),
            Err(e) => tracing::warn!(user = username, "learning skipped: {e}"),
        }
    }

    /// Submits an OTP code or OOB token for a pending challenge.
    pub fn resolve_challenge(
        &self,
        id: &str,
        kind: ChallengeKind,
        secret: &str,
    ) -> Result<ChallengeResult, EngineError> {
        let user = self
            .mfa
            .get(id)
            .ok_or_else(|| EngineError::UnknownChallenge(id.to_string()))?
            .user;
        let lock = self.user_lock(&user);
        let _guard = lock.lock().expect("user lock");
        let now = self.now_ms();
        let (outcome, _) = self.mfa.respond(id, kind, secret, now)?;

        let finalize = |outcome: AttemptOutcome| {
            let pending = self.pending.lock().expect("pending lock").remove(id);
            if let Some(p) = &pending {
                if let Some(r) = self
                    .records
                    .lock()
                    .expect("records lock")
                    .iter_mut()
                    .find(|r| r.attempt_id == p.attempt_id)
                {
                    r.outcome = outcome;
                    r.resolved_ms = Some(now);
                }
            }
            pending
        };

        Ok(match outcome {
            VerifyOutcome::Verified => {
                if let Some(p) = finalize(AttemptOutcome::Granted) {
                    self.learn(&p.username, p.features, p.received_ms);
                }
                ChallengeResult {
                    status: ChallengeStatus::Granted,
                    reason: None,
                    attempts_left: None,
                }
            }
            VerifyOutcome::Rejected { attempts_left } => ChallengeResult {
                status: ChallengeStatus::Retry,
                reason: Some("wrong_code"),
                attempts_left: Some(attempts_left),
            },
            VerifyOutcome::Failed => {
                finalize(AttemptOutcome::Denied);
                ChallengeResult {
                    status: ChallengeStatus::Denied,
                    reason: Some("failed"),
                    attempts_left: Some(0),
                }
            }
            VerifyOutcome::Expired => {
                finalize(AttemptOutcome::Denied);
                ChallengeResult {
                    status: ChallengeStatus::Denied,
                    reason: Some("expired"),
                    attempts_left: None,
                }
            }
        })
    }

    pub fn profile_summary(&self, username: &str) -> Result<ProfileSummary, EngineError> {
        let store = self.store.read().expect("store lock");
        let p = store.get(username).ok_or(EngineError::UnknownUser)?;
        Ok(ProfileSummary {
            username: p.username.clone(),
            history_len: p.raw_history.len(),
            dimensions: p.dimensions(),
            ranges: p
                .dimensions()
                .into_iter()
                .filter_map(|d| p.ranges.get(d).map(|r| (d, r)))
                .collect(),
            enrolled_context: p.enrolled_context.clone(),
            seed: p.seed,
            created_ms: p.created_ms,
            updated_ms: p.updated_ms,
        })
    }

    pub fn cluster_export(&self, username: &str) -> Result<ClusterExport, EngineError> {
        let profile = self
            .store
            .read()
            .expect("store lock")
            .get(username)
            .cloned()
            .ok_or(EngineError::UnknownUser)?;
        cluster_geometry(&profile, &self.config.anomaly)
    }

    /// Degree the pipeline would assign, without issuing challenges or learning.
    pub fn dry_assess(&self, session: &LoginSession) -> Result<RiskAssessment, EngineError> {
        let profile = self
            .store
            .read()
            .expect("store lock")
            .get(&session.username_claim)
            .cloned()
            .ok_or(EngineError::UnknownUser)?;
        let raw = profile.attempt_features(session)?;
        let history = profile.normalized_history()?;
        let point = profile.attempt_point(&raw, self.config.anomaly.clamp_attempts)?;
        Ok(anomaly::assess(
            &history,
            &point,
            profile.seed,
            &self.config.anomaly,
        )?)
    }
}

/// Re-fits the elbow-selected model over a profile's normalized history.
pub fn cluster_geometry(
    profile: &store::UserProfile,
    config: &AnomalyConfig,
) -> Result<ClusterExport, EngineError> {
    let n = profile.raw_history.len();
    if n < config.min_history.max(1) {
        return Err(EngineError::NotTrained {
            have: n,
            need: config.min_history.max(1),
        });
    }
    let points = profile.normalized_history()?;
    let (k_min, k_max) = config.k_range(n);
    let (model, elbow) = clustering::elbow_fit(
        &points,
        k_min,
        k_max,
        profile.seed,
        config.restarts,
        config.max_iter,
    )?;
    Ok(ClusterExport {
        dimensions: profile.dimensions(),
        k: model.k,
        points,
        assignments: model.assignments,
        centroids: model.centroids,
        elbow,
    })
}

/// Whether an outcome grants access; used by scenario accounting.
pub fn is_normal(assessment: &RiskAssessment) -> bool {
    assessment.degree == OutlierDegree::Normal
}
