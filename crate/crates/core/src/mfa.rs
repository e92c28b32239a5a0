//! Risk-driven escalation: maps an outlier degree to an authentication
//! action and runs the OTP / out-of-band challenge lifecycles.

use std::collections::HashMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::anomaly::{OutlierDegree, RiskAssessment};

pub const DEFAULT_TTL_MS: i64 = 300_000;
pub const OTP_ATTEMPTS: u32 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum MfaError {
    #[error("challenge closed ({0:?})")]
    ChallengeClosed(ChallengeState),
    #[error("challenge is {actual:?}, not {expected:?}")]
    WrongKind {
        expected: ChallengeKind,
        actual: ChallengeKind,
    },
    #[error("unknown challenge {0}")]
    UnknownChallenge(String),
}

#[derive(Debug, Error)]
#[error("delivery failed: {0}")]
pub struct DeliveryError(pub String);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", content = "challenge_id", rename_all = "snake_case")]
pub enum AuthDecision {
    Grant,
    ChallengeOtp(String),
    ChallengeOob(String),
    Deny,
}

/// Decision before any challenge has been issued.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Grant,
    ChallengeOtp,
    ChallengeOob,
}

pub fn decide_degree(degree: OutlierDegree) -> DecisionKind {
    match degree {
        OutlierDegree::Normal => DecisionKind::Grant,
        OutlierDegree::FirstDegree => DecisionKind::ChallengeOtp,
        OutlierDegree::SecondDegree => DecisionKind::ChallengeOob,
    }
}

pub fn decide(assessment: &RiskAssessment) -> DecisionKind {
    decide_degree(assessment.degree)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChallengeKind {
    Otp,
    Oob,
}

impl ChallengeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChallengeKind::Otp => "otp",
            ChallengeKind::Oob => "oob",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChallengeState {
    Pending,
    Verified,
    Failed,
    Expired,
}

impl ChallengeState {
    pub fn is_terminal(self) -> bool {
        self != ChallengeState::Pending
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Challenge {
    pub id: String,
    pub kind: ChallengeKind,
    pub user: String,
    /// Six-digit code for OTP, 128-bit hex token for OOB.
    pub secret: String,
    pub issued_at: i64,
    pub expires_at: i64,
    pub attempts_left: u32,
    pub state: ChallengeState,
}

impl fmt::Debug for Challenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Challenge")
            .field("id", &self.id)
            .field("kind", &self.kind)
            .field("user", &self.user)
            .field("secret", &"<redacted>")
            .field("issued_at", &self.issued_at)
            .field("expires_at", &self.expires_at)
            .field("attempts_left", &self.attempts_left)
            .field("state", &self.state)
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum VerifyOutcome {
    Verified,
    /// Wrong secret, challenge still pending.
    Rejected {
        attempts_left: u32,
    },
    Failed,
    Expired,
}

fn random_hex(rng: &mut impl RngCore, bytes: usize) -> String {
    let mut buf = vec![0u8; bytes];
    rng.fill_bytes(&mut buf);
    hex::encode(buf)
}

pub fn issue_otp(user: &str, now: i64, ttl_ms: i64, rng: &mut impl Rng) -> Challenge {
    let id = random_hex(rng, 16);
    let code = format!("{:06}", rng.random_range(0..1_000_000u32));
    Challenge {
        id,
        kind: ChallengeKind::Otp,
        user: user.to_string(),
        secret: code,
        issued_at: now,
        expires_at: now + ttl_ms,
        attempts_left: OTP_ATTEMPTS,
        state: ChallengeState::Pending,
    }
}

pub fn issue_oob(user: &str, now: i64, ttl_ms: i64, rng: &mut impl Rng) -> Challenge {
    let id = random_hex(rng, 16);
    let token = random_hex(rng, 16);
    Challenge {
        id,
        kind: ChallengeKind::Oob,
        user: user.to_string(),
        secret: token,
        issued_at: now,
        expires_at: now + ttl_ms,
        attempts_left: 1,
        state: ChallengeState::Pending,
    }
}

fn respond(
    challenge: &mut Challenge,
    kind: ChallengeKind,
    presented: &str,
    now: i64,
) -> Result<VerifyOutcome, MfaError> {
    if challenge.kind != kind {
        return Err(MfaError::WrongKind {
            expected: kind,
            actual: challenge.kind,
        });
    }
    if challenge.state.is_terminal() {
        return Err(MfaError::ChallengeClosed(challenge.state));
    }
    if now > challenge.expires_at {
        challenge.state = ChallengeState::Expired;
        return Ok(VerifyOutcome::Expired);
    }
    if bool::from(challenge.secret.as_bytes().ct_eq(presented.as_bytes())) {
        challenge.state = ChallengeState::Verified;
        return Ok(VerifyOutcome::Verified);
    }
    challenge.attempts_left = challenge.attempts_left.saturating_sub(1);
    if challenge.attempts_left == 0 {
        challenge.state = ChallengeState::Failed;
        Ok(VerifyOutcome::Failed)
    } else {
        Ok(VerifyOutcome::Rejected {
            attempts_left: challenge.attempts_left,
        })
    }
}

pub fn verify_otp(
    challenge: &mut Challenge,
    code: &str,
    now: i64,
) -> Result<VerifyOutcome, MfaError> {
    respond(challenge, ChallengeKind::Otp, code, now)
}

pub fn approve_oob(
    challenge: &mut Challenge,
    token: &str,
    now: i64,
) -> Result<VerifyOutcome, MfaError> {
    respond(challenge, ChallengeKind::Oob, token, now)
}

/// A line of the outbox: `ts kind user payload`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutboxEntry {
    pub ts: i64,
    pub kind: ChallengeKind,
    pub user: String,
    /// OTP code, or the OOB approval URL carrying the token.
    pub payload: String,
}

impl OutboxEntry {
    pub fn parse(line: &str) -> Option<OutboxEntry> {
        let mut parts = line.trim_end().splitn(4, ' ');
        let ts = parts.next()?.parse().ok()?;
        let kind = match parts.next()? {
            "otp" => ChallengeKind::Otp,
            "oob" => ChallengeKind::Oob,
            _ => return None,
        };
        let user = parts.next()?.to_string();
        let payload = parts.next()?.to_string();
        Some(OutboxEntry {
            ts,
            kind,
            user,
            payload,
        })
    }

    /// The secret a challenge responder submits.
    pub fn secret(&self) -> &str {
        match self.kind {
            ChallengeKind::Otp => &self.payload,
            ChallengeKind::Oob => self
                .payload
                .rsplit("token=")
                .next()
                .unwrap_or(&self.payload),
        }
    }

    /// Challenge id embedded in an OOB approval URL.
    pub fn challenge_id(&self) -> Option<&str> {
        let rest = self.payload.split("/v1/challenge/").nth(1)?;
        rest.split('/').next()
    }
}

impl fmt::Display for OutboxEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.ts,
            self.kind.as_str(),
            self.user,
            self.payload
        )
    }
}

/// Second-channel delivery of challenge secrets.
pub trait Notifier: Send + Sync {
    fn deliver(&self, entry: &OutboxEntry) -> Result<(), DeliveryError>;
}

/// Appends outbox lines to a local file.
#[derive(Debug, Clone)]
pub struct OutboxLog {
    path: PathBuf,
}

impl OutboxLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read_entries(path: &Path) -> std::io::Result<Vec<OutboxEntry>> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e),
        };
        Ok(text.lines().filter_map(OutboxEntry::parse).collect())
    }
}

impl Notifier for OutboxLog {
    fn deliver(&self, entry: &OutboxEntry) -> Result<(), DeliveryError> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| DeliveryError(e.to_string()))?;
        writeln!(file, "{entry}").map_err(|e| DeliveryError(e.to_string()))
    }
}

/// In-memory outbox, for tests and in-process replay.
#[derive(Debug, Clone, Default)]
pub struct MemoryOutbox {
    entries: Arc<Mutex<Vec<OutboxEntry>>>,
}

impl MemoryOutbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> Vec<OutboxEntry> {
        self.entries.lock().expect("outbox lock").clone()
    }

    pub fn last(&self) -> Option<OutboxEntry> {
        self.entries.lock().expect("outbox lock").last().cloned()
    }
}

impl Notifier for MemoryOutbox {
    fn deliver(&self, entry: &OutboxEntry) -> Result<(), DeliveryError> {
        self.entries
            .lock()
            .expect("outbox lock")
            .push(entry.clone());
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct IssuedChallenge {
    pub id: String,
    pub kind: ChallengeKind,
    pub expires_at: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delivery_error: Option<String>,
}

/// Challenge registry with delivery. Each challenge is transitioned under the
/// registry lock, so verification is an atomic test-and-set.
pub struct MfaEngine {
    challenges: Mutex<HashMap<String, Challenge>>,
    notifier: Arc<dyn Notifier>,
    rng: Mutex<ChaCha20Rng>,
    ttl_ms: i64,
    base_url: String,
}

impl MfaEngine {
    pub fn new(
        notifier: Arc<dyn Notifier>,
        seed: Option<u64>,
        ttl_ms: i64,
        base_url: impl Into<String>,
    ) -> Self {
        let rng = match seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_os_rng(),
        };
        Self {
            challenges: Mutex::new(HashMap::new()),
            notifier,
            rng: Mutex::new(rng),
            ttl_ms,
            base_url: base_url.into(),
        }
    }

    pub fn issue(&self, kind: ChallengeKind, user: &str, now: i64) -> IssuedChallenge {
        let challenge = {
            let mut rng = self.rng.lock().expect("rng lock");
            match kind {
                ChallengeKind::Otp => issue_otp(user, now, self.ttl_ms, &mut *rng),
                ChallengeKind::Oob => issue_oob(user, now, self.ttl_ms, &mut *rng),
            }
        };
        let payload = match kind {
            ChallengeKind::Otp => challenge.secret.clone(),
            ChallengeKind::Oob => format!(
                "{}/v1/challenge/{}/oob?token={}",
                self.base_url.trim_end_matches('/'),
                challenge.id,
                challenge.secret
            ),
        };
        let entry = OutboxEntry {
            ts: now,
            kind,
            user: user.to_string(),
            payload,
        };
        let delivery_error = self.notifier.deliver(&entry).err().map(|e| {
            tracing::warn!(challenge = %challenge.id, "challenge delivery failed: {e}");
            e.to_string()
        });
        let issued = IssuedChallenge {
            id: challenge.id.clone(),
            kind,
            expires_at: challenge.expires_at,
            delivery_error,
        };
        self.challenges
            .lock()
            .expect("registry lock")
            .insert(challenge.id.clone(), challenge);
        issued
    }

    pub fn respond(
        &self,
        id: &str,
        kind: ChallengeKind,
        secret: &str,
        now: i64,
    ) -> Result<(VerifyOutcome, Challenge), MfaError> {
        let mut registry = self.challenges.lock().expect("registry lock");
        let challenge = registry
            .get_mut(id)
            .ok_or_else(|| MfaError::UnknownChallenge(id.to_string()))?;
        let outcome = respond(challenge, kind, secret, now)?;
        Ok((outcome, challenge.clone()))
    }

    pub fn get(&self, id: &str) -> Option<Challenge> {
        self.challenges
            .lock()
            .expect("registry lock")
            .get(id)
            .cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(1)
    }

    #[test]
    fn decide_maps_each_degree() {
        assert_eq!(decide_degree(OutlierDegree::Normal), DecisionKind::Grant);
        assert_eq!(
            decide_degree(OutlierDegree::FirstDegree),
            DecisionKind::ChallengeOtp
        );
        assert_eq!(
            decide_degree(OutlierDegree::SecondDegree),
            DecisionKind::ChallengeOob
        );
    }

    #[test]
    fn otp_issue_shape() {
        let mut r = rng();
        let c = issue_otp("alice", 0, DEFAULT_TTL_MS, &mut r);
        assert_eq!(c.expires_at, 300_000);
        assert_eq!(c.secret.len(), 6);
        assert!(c.secret.chars().all(|ch| ch.is_ascii_digit()));
        assert_eq!(c.state, ChallengeState::Pending);
        assert_eq!(c.attempts_left, 3);
        let d = issue_otp("alice", 0, DEFAULT_TTL_MS, &mut r);
        assert_ne!(c.id, d.id);
        // same rng state, same sequence
        let again = issue_otp("alice", 0, DEFAULT_TTL_MS, &mut rng());
        assert_eq!(again.secret, c.secret);
    }

    #[test]
    fn otp_verify_paths() {
        let mut c = issue_otp("u", 0, DEFAULT_TTL_MS, &mut rng());
        let code = c.secret.clone();
        assert_eq!(verify_otp(&mut c, &code, 1000), Ok(VerifyOutcome::Verified));
        assert_eq!(
            verify_otp(&mut c, &code, 1000),
            Err(MfaError::ChallengeClosed(ChallengeState::Verified))
        );

        let mut c = issue_otp("u", 0, DEFAULT_TTL_MS, &mut rng());
        let code = c.secret.clone();
        assert_eq!(
            verify_otp(&mut c, &code, 300_000),
            Ok(VerifyOutcome::Verified)
        );

        let mut c = issue_otp("u", 0, DEFAULT_TTL_MS, &mut rng());
        let code = c.secret.clone();
        assert_eq!(
            verify_otp(&mut c, &code, 300_001),
            Ok(VerifyOutcome::Expired)
        );
        assert_eq!(c.state, ChallengeState::Expired);

        let mut c = issue_otp("u", 0, DEFAULT_TTL_MS, &mut rng());
        assert_eq!(
            verify_otp(&mut c, "bad", 1),
            Ok(VerifyOutcome::Rejected { attempts_left: 2 })
        );
        assert_eq!(
            verify_otp(&mut c, "bad", 2),
            Ok(VerifyOutcome::Rejected { attempts_left: 1 })
        );
        assert_eq!(verify_otp(&mut c, "bad", 3), Ok(VerifyOutcome::Failed));
        assert_eq!(c.state, ChallengeState::Failed);
    }

    #[test]
    fn oob_paths() {
        let mut c = issue_oob("u", 10, DEFAULT_TTL_MS, &mut rng());
        assert_eq!(c.secret.len(), 32);
        let token = c.secret.clone();
        assert_eq!(approve_oob(&mut c, &token, 20), Ok(VerifyOutcome::Verified));

        let mut c = issue_oob("u", 10, DEFAULT_TTL_MS, &mut rng());
        assert_eq!(approve_oob(&mut c, "00", 20), Ok(VerifyOutcome::Failed));

        let mut c = issue_oob("u", 10, DEFAULT_TTL_MS, &mut rng());
        let token = c.secret.clone();
        assert_eq!(
            approve_oob(&mut c, &token, 300_011),
            Ok(VerifyOutcome::Expired)
        );

        let mut c = issue_oob("u", 10, DEFAULT_TTL_MS, &mut rng());
        assert!(matches!(
            verify_otp(&mut c, "x", 0),
            Err(MfaError::WrongKind { .. })
        ));
    }

    #[test]
    fn debug_redacts_secret() {
        let c = issue_otp("u", 0, 1, &mut rng());
        assert!(!format!("{c:?}").contains(&c.secret));
    }

    #[test]
    fn outbox_line_roundtrip() {
        let e = OutboxEntry {
            ts: 5,
            kind: ChallengeKind::Oob,
            user: "bob".into(),
            payload: "http://h/v1/challenge/abc/oob?token=ff00".into(),
        };
        let parsed = OutboxEntry::parse(&e.to_string()).unwrap();
        assert_eq!(parsed, e);
        assert_eq!(parsed.secret(), "ff00");
        assert_eq!(parsed.challenge_id(), Some("abc"));
        assert_eq!(OutboxEntry::parse("garbage"), None);
    }

    struct Down;
    impl Notifier for Down {
        fn deliver(&self, _: &OutboxEntry) -> Result<(), DeliveryError> {
            Err(DeliveryError("notifier down".into()))
        }
    }

    #[test]
    fn delivery_failure_still_creates_challenge() {
        let engine = MfaEngine::new(Arc::new(Down), Some(3), DEFAULT_TTL_MS, "http://x");
        let issued = engine.issue(ChallengeKind::Otp, "u", 0);
        assert!(issued.delivery_error.is_some());
        assert_eq!(
            engine.get(&issued.id).unwrap().state,
            ChallengeState::Pending
        );
    }

    #[test]
    fn engine_delivers_to_outbox_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("outbox.log");
        let engine = MfaEngine::new(
            Arc::new(OutboxLog::new(&path)),
            Some(3),
            DEFAULT_TTL_MS,
            "http://x",
        );
        let issued = engine.issue(ChallengeKind::Oob, "carol", 42);
        let entries = OutboxLog::read_entries(&path).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].challenge_id(), Some(issued.id.as_str()));
        let (outcome, c) = engine
            .respond(&issued.id, ChallengeKind::Oob, entries[0].secret(), 43)
            .unwrap();
        assert_eq!(outcome, VerifyOutcome::Verified);
        assert_eq!(c.state, ChallengeState::Verified);
        assert_eq!(
            engine
                .respond("nope", ChallengeKind::Oob, "x", 0)
                .unwrap_err(),
            MfaError::UnknownChallenge("nope".into())
        );
    }
}
