//! Per-user profiles and their on-disk store.
//!
//! A profile keeps the salted password hash, the enrolled context, the raw
//! (unnormalized) feature history and the ranges covering it. Raw vectors are
//! kept so that widening the ranges re-scales old points as well.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use argon2::{Algorithm, Argon2, Params, Version};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::session::{
    self, apply_context, extract_features, reconstruct_text, Dimension, FeatureVector, Field,
    LoginSession, NormalizationRanges, SessionContext, SessionError,
};

pub const STORE_VERSION: &str = "keydyn-store/1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("user {0:?} already exists")]
    DuplicateUser(String),
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("insufficient training: {have} sessions, {need} required")]
    InsufficientTraining { have: usize, need: usize },
    #[error("training session {index} rejected: {reason}")]
    RejectedSession { index: usize, reason: String },
    #[error("attempt is not eligible for learning (outcome {0:?})")]
    NotEligible(AttemptOutcome),
    #[error(transparent)]
    Features(#[from] SessionError),
    #[error("password hashing failed: {0}")]
    Hash(String),
    #[error("corrupt store file at byte {offset}: {message}")]
    Corrupt { offset: usize, message: String },
    #[error("store version mismatch: file has {found:?}, expected {expected:?}")]
    VersionMismatch { found: String, expected: String },
    #[error("store i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Final outcome of one login attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Granted,
    Denied,
    PendingChallenge,
}

/// Argon2id cost parameters, recorded per user.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashParams {
    pub m_cost_kib: u32,
    pub t_cost: u32,
    pub p_cost: u32,
    pub output_len: usize,
}

impl Default for HashParams {
    fn default() -> Self {
        Self {
            m_cost_kib: 19 * 1024,
            t_cost: 2,
            p_cost: 1,
            output_len: 32,
        }
    }
}

impl HashParams {
    /// Cheap parameters for tests and simulations.
    pub fn light() -> Self {
        Self {
            m_cost_kib: 256,
            t_cost: 1,
            p_cost: 1,
            output_len: 32,
        }
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct PasswordCredential {
    pub algorithm: String,
    pub params: HashParams,
    /// 16 random bytes, hex.
    pub salt: String,
    pub hash: String,
}

impl std::fmt::Debug for PasswordCredential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PasswordCredential")
            .field("algorithm", &self.algorithm)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

fn argon2_hash(password: &str, salt: &[u8], params: HashParams) -> Result<Vec<u8>, StoreError> {
    let p = Params::new(
        params.m_cost_kib,
        params.t_cost,
        params.p_cost,
        Some(params.output_len),
    )
    .map_err(|e| StoreError::Hash(e.to_string()))?;
    let mut out = vec![0u8; params.output_len];
    Argon2::new(Algorithm::Argon2id, Version::V0x13, p)
        .hash_password_into(password.as_bytes(), salt, &mut out)
        .map_err(|e| StoreError::Hash(e.to_string()))?;
    Ok(out)
}

impl PasswordCredential {
    pub fn create(
        password: &str,
        params: HashParams,
        rng: &mut impl RngCore,
    ) -> Result<Self, StoreError> {
        let mut salt = [0u8; 16];
        rng.fill_bytes(&mut salt);
        let hash = argon2_hash(password, &salt, params)?;
        Ok(Self {
            algorithm: "argon2id".into(),
            params,
            salt: hex::encode(salt),
            hash: hex::encode(hash),
        })
    }

    /// Constant-time comparison against the stored hash.
    pub fn verify(&self, password: &str) -> bool {
        let (Ok(salt), Ok(expected)) = (hex::decode(&self.salt), hex::decode(&self.hash)) else {
            return false;
        };
        match argon2_hash(password, &salt, self.params) {
            Ok(actual) => bool::from(actual.ct_eq(&expected)),
            Err(_) => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub timestamp_ms: i64,
    pub features: FeatureVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub username: String,
    pub credential: PasswordCredential,
    pub enrolled_context: SessionContext,
    pub raw_history: Vec<HistoryEntry>,
    pub ranges: NormalizationRanges,
    pub seed: u64,
    pub created_ms: i64,
    pub updated_ms: i64,
}

impl UserProfile {
    pub fn dimensions(&self) -> Vec<Dimension> {
        self.ranges.dimensions()
    }

    pub fn verify_password(&self, typed: &str) -> bool {
        self.credential.verify(typed)
    }

    /// History re-scaled with the current ranges, as clustering points.
    pub fn normalized_history(&self) -> Result<Vec<Vec<f64>>, SessionError> {
        self.raw_history
            .iter()
            .map(|h| session::normalize(&h.features, &self.ranges).map(|fv| fv.point()))
            .collect()
    }

    /// Raw features of a login attempt, aligned with this profile's dimensions.
    pub fn attempt_features(&self, session: &LoginSession) -> Result<FeatureVector, SessionError> {
        let mut fv = extract_features(session)?;
        apply_context(&mut fv, &session.context, &self.enrolled_context);
        fv.project(&self.dimensions())
    }

    /// Scales raw attempt features against this profile's ranges.
    pub fn attempt_point(
        &self,
        raw: &FeatureVector,
        clamp: bool,
    ) -> Result<Vec<f64>, SessionError> {
        let scaled = if clamp {
            session::normalize(raw, &self.ranges)?
        } else {
            session::normalize_attempt(raw, &self.ranges)?
        };
        Ok(scaled.point())
    }

    /// Records a successful attempt and widens the ranges to cover it.
    pub fn append_success(
        &mut self,
        raw: FeatureVector,
        timestamp_ms: i64,
        outcome: AttemptOutcome,
    ) -> Result<(), StoreError> {
        if outcome != AttemptOutcome::Granted {
            return Err(StoreError::NotEligible(outcome));
        }
        let raw = raw.project(&self.dimensions())?;
        self.ranges = session::update_ranges(&self.ranges, &raw)?;
        let at = self
            .raw_history
            .partition_point(|h| h.timestamp_ms <= timestamp_ms);
        self.raw_history.insert(
            at,
            HistoryEntry {
                timestamp_ms,
                features: raw,
            },
        );
        self.updated_ms = self.updated_ms.max(timestamp_ms);
        Ok(())
    }

    pub fn ranges_cover_history(&self) -> bool {
        self.raw_history
            .iter()
            .all(|h| self.ranges.covers(&h.features))
    }
}

/// Everything needed to create a profile.
pub struct Enrollment<'a> {
    pub username: &'a str,
    pub password: &'a str,
    pub sessions: &'a [LoginSession],
    /// Defaults to the first session's context.
    pub context: Option<SessionContext>,
    pub min_history: usize,
    pub hash_params: HashParams,
    pub seed: u64,
    pub now_ms: i64,
}

/// Builds a profile from training sessions whose typed credentials must match.
pub fn enroll(e: Enrollment<'_>, rng: &mut impl RngCore) -> Result<UserProfile, StoreError> {
    if e.sessions.len() < e.min_history {
        return Err(StoreError::InsufficientTraining {
            have: e.sessions.len(),
            need: e.min_history,
        });
    }
    let context = e.context.unwrap_or_else(|| e.sessions[0].context.clone());
    let with_pressure = e.sessions[0].pressure.is_some();

    let mut history = Vec::with_capacity(e.sessions.len());
    for (index, s) in e.sessions.iter().enumerate() {
        let reject = |reason: String| StoreError::RejectedSession { index, reason };
        if s.fields.username.is_some() && reconstruct_text(s, Field::Username)? != e.username {
            return Err(reject("typed username does not match".into()));
        }
        if s.username_claim != e.username {
            return Err(reject("username claim does not match".into()));
        }
        if reconstruct_text(s, Field::Password)? != e.password {
            return Err(reject("typed password does not match".into()));
        }
        if s.pressure.is_some() != with_pressure {
            return Err(reject("pressure present in some sessions only".into()));
        }
        let mut fv = extract_features(s).map_err(|err| reject(err.to_string()))?;
        apply_context(&mut fv, &s.context, &context);
        history.push(HistoryEntry {
            timestamp_ms: e.now_ms + index as i64,
            features: fv,
        });
    }
    let ranges = NormalizationRanges::fit(history.iter().map(|h| &h.features))?;
    Ok(UserProfile {
        username: e.username.to_string(),
        credential: PasswordCredential::create(e.password, e.hash_params, rng)?,
        enrolled_context: context,
        raw_history: history,
        ranges,
        seed: e.seed,
        created_ms: e.now_ms,
        updated_ms: e.now_ms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileStore {
    pub version: String,
    pub users: BTreeMap<String, UserProfile>,
}

impl Default for ProfileStore {
    fn default() -> Self {
        Self {
            version: STORE_VERSION.to_string(),
            users: BTreeMap::new(),
        }
    }
}

#[derive(Deserialize)]
struct VersionProbe {
    version: String,
}

fn byte_offset(bytes: &[u8], err: &serde_json::Error) -> usize {
    if err.line() == 0 {
        return bytes.len();
    }
    let line_start: usize = bytes
        .split_inclusive(|&b| b == b'\n')
        .take(err.line() - 1)
        .map(<[u8]>::len)
        .sum();
    (line_start + err.column().saturating_sub(1)).min(bytes.len())
}

impl ProfileStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn verify_username(&self, username: &str) -> bool {
        !username.is_empty() && self.users.contains_key(username)
    }

    pub fn get(&self, username: &str) -> Option<&UserProfile> {
        self.users.get(username)
    }

    pub fn get_mut(&mut self, username: &str) -> Option<&mut UserProfile> {
        self.users.get_mut(username)
    }

    pub fn insert(&mut self, profile: UserProfile) -> Result<(), StoreError> {
        if self.users.contains_key(&profile.username) {
            return Err(StoreError::DuplicateUser(profile.username));
        }
        self.users.insert(profile.username.clone(), profile);
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, StoreError> {
        let corrupt = |e: serde_json::Error| StoreError::Corrupt {
            offset: byte_offset(bytes, &e),
            message: e.to_string(),
        };
        let probe: VersionProbe = serde_json::from_slice(bytes).map_err(corrupt)?;
        if probe.version != STORE_VERSION {
            return Err(StoreError::VersionMismatch {
                found: probe.version,
                expected: STORE_VERSION.into(),
            });
        }
        serde_json::from_slice(bytes).map_err(corrupt)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("store serialization is infallible")
    }

    /// Reads a store; a missing file yields an empty store.
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        match std::fs::read(path) {
            Ok(bytes) => Self::from_json(&bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes to a temporary sibling and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_json())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::{FieldSpan, FieldSpans, Key, KeyEvent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn typed(user: &str, password: &str, dwell: f64) -> LoginSession {
        let mut events = Vec::new();
        let mut t = 0.0;
        for c in user.chars().chain(password.chars()) {
            events.push(KeyEvent::down(Key::Char(c), t));
            events.push(KeyEvent::up(Key::Char(c), t + dwell));
            t += dwell + 50.0;
        }
        let u = user.chars().count() * 2;
        LoginSession::new(
            user,
            SessionContext {
                geo: "ZA".into(),
                ..Default::default()
            },
            FieldSpans {
                username: Some(FieldSpan::new(0, u - 1)),
                password: Some(FieldSpan::new(u, events.len() - 1)),
            },
            events,
            None,
        )
        .unwrap()
    }

    fn sessions(n: usize) -> Vec<LoginSession> {
        (0..n)
            .map(|i| typed("alice", "pw", 80.0 + i as f64))
            .collect()
    }

    fn enrollment<'a>(sessions: &'a [LoginSession], password: &'a str) -> Enrollment<'a> {
        Enrollment {
            username: "alice",
            password,
            sessions,
            context: None,
            min_history: 10,
            hash_params: HashParams::light(),
            seed: 7,
            now_ms: 1_000,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn enroll_builds_history_and_ranges() {
        let s = sessions(10);
        let p = enroll(enrollment(&s, "pw"), &mut rng()).unwrap();
        assert_eq!(p.raw_history.len(), 10);
        assert!(p.ranges_cover_history());
        assert_eq!(p.enrolled_context.geo, "ZA");
        assert_eq!(p.credential.salt.len(), 32);
    }

    #[test]
    fn enroll_rejections() {
        let s = sessions(9);
        assert!(matches!(
            enroll(enrollment(&s, "pw"), &mut rng()),
            Err(StoreError::InsufficientTraining { have: 9, need: 10 })
        ));
        let mut s = sessions(10);
        s[4] = typed("alice", "px", 90.0);
        match enroll(enrollment(&s, "pw"), &mut rng()) {
            Err(StoreError::RejectedSession { index, .. }) => assert_eq!(index, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn password_verification() {
        let s = sessions(10);
        let p = enroll(enrollment(&s, "pw"), &mut rng()).unwrap();
        assert!(p.verify_password("pw"));
        assert!(!p.verify_password("pw2"));
        assert!(!p.verify_password(""));
        assert!(!format!("{:?}", p.credential).contains(&p.credential.hash));
    }

    #[test]
    fn verify_username_cases() {
        let s = sessions(10);
        let mut store = ProfileStore::new();
        store
            .insert(enroll(enrollment(&s, "pw"), &mut rng()).unwrap())
            .unwrap();
        assert!(store.verify_username("alice"));
        assert!(!store.verify_username("mallory"));
        assert!(!store.verify_username(""));
        let dup = enroll(enrollment(&s, "pw"), &mut rng()).unwrap();
        assert!(matches!(
            store.insert(dup),
            Err(StoreError::DuplicateUser(_))
        ));
    }

    #[test]
    fn append_success_grows_and_widens() {
        let s = sessions(10);
        let mut p = enroll(enrollment(&s, "pw"), &mut rng()).unwrap();
        let far = p.attempt_features(&typed("alice", "pw", 400.0)).unwrap();
        let before = p.ranges.get(Dimension::MeanDwell).unwrap();
        p.append_success(far.clone(), 5_000, AttemptOutcome::Granted)
            .unwrap();
        assert_eq!(p.raw_history.len(), 11);
        assert!(p.ranges.get(Dimension::MeanDwell).unwrap().max > before.max);
        assert!(p.ranges_cover_history());
        assert!(matches!(
            p.append_success(far, 6_000, AttemptOutcome::Denied),
            Err(StoreError::NotEligible(AttemptOutcome::Denied))
        ));
        assert_eq!(p.raw_history.len(), 11);
    }

    #[test]
    fn history_stays_time_ordered() {
        let s = sessions(10);
        let mut p = enroll(enrollment(&s, "pw"), &mut rng()).unwrap();
        let fv = p.raw_history[0].features.clone();
        p.append_success(fv, 1_003, AttemptOutcome::Granted)
            .unwrap();
        assert!(p
            .raw_history
            .windows(2)
            .all(|w| w[0].timestamp_ms <= w[1].timestamp_ms));
    }

    #[test]
    fn save_load_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.json");
        let empty = ProfileStore::new();
        empty.save(&path).unwrap();
        assert_eq!(ProfileStore::load(&path).unwrap(), empty);

        let s = sessions(10);
        let mut store = ProfileStore::new();
        store
            .insert(enroll(enrollment(&s, "pw"), &mut rng()).unwrap())
            .unwrap();
        store.save(&path).unwrap();
        assert_eq!(ProfileStore::load(&path).unwrap(), store);

        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() / 2;
        match ProfileStore::from_json(&bytes[..cut]) {
            Err(StoreError::Corrupt { offset, .. }) => assert!(offset <= cut),
            other => panic!("unexpected {other:?}"),
        }
        let other = br#"{"version":"keydyn-store/0","users":{}}"#;
        assert!(matches!(
            ProfileStore::from_json(other),
            Err(StoreError::VersionMismatch { .. })
        ));
        assert_eq!(
            ProfileStore::load(&dir.path().join("missing.json")).unwrap(),
            ProfileStore::new()
        );
    }
}
