//! Synthetic typists, labeled attack scenarios, replay and metrics.

use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::{AnomalyConfig, OutlierDegree};
use crate::clustering::ElbowReport;
use crate::engine::{self, ChallengeStatus, Engine, EngineError};
use crate::mfa::{ChallengeKind, MemoryOutbox, OutboxEntry, OutboxLog};
use crate::session::{Dimension, FieldSpan, FieldSpans, Key, KeyEvent, LoginSession, SessionError};
use crate::store::UserProfile;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid typist model: {0}")]
    InvalidModel(String),
    #[error("unknown user {0:?} in scenario")]
    UnknownUser(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Engine(EngineError),
    #[error("http: {0}")]
    Http(String),
    #[error("unexpected reply: {0}")]
    Protocol(String),
    #[error("no outbox entry for challenge {0}")]
    MissingDelivery(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftStyle {
    /// Capitals typed while holding a Shift key.
    #[default]
    ShiftKey,
    /// Capitals typed by toggling CapsLock around them.
    CapsLock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypistModel {
    pub dwell_mean: f64,
    pub dwell_std: f64,
    pub flight_mean: f64,
    pub flight_std: f64,
    /// Per-character probability of a wrong key corrected with Backspace.
    pub error_rate: f64,
    #[serde(default)]
    pub shift_style: ShiftStyle,
    #[serde(default)]
    pub seed: u64,
}

impl TypistModel {
    pub fn fast() -> Self {
        Self::timing(75.0, 8.0, 65.0, 12.0, 0.02)
    }

    pub fn moderate() -> Self {
        Self::timing(100.0, 12.0, 140.0, 25.0, 0.04)
    }

    pub fn slow() -> Self {
        Self::timing(140.0, 18.0, 260.0, 45.0, 0.06)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "fast" => Some(Self::fast()),
            "moderate" => Some(Self::moderate()),
            "slow" => Some(Self::slow()),
            _ => None,
        }
    }

    fn timing(
        dwell_mean: f64,
        dwell_std: f64,
        flight_mean: f64,
        flight_std: f64,
        error_rate: f64,
    ) -> Self {
        Self {
            dwell_mean,
            dwell_std,
            flight_mean,
            flight_std,
            error_rate,
            shift_style: ShiftStyle::ShiftKey,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let finite = [
            self.dwell_mean,
            self.dwell_std,
            self.flight_mean,
            self.flight_std,
            self.error_rate,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(HarnessError::InvalidModel("non-finite parameter".into()));
        }
        if self.dwell_mean <= 0.0 || self.flight_mean <= 0.0 {
            return Err(HarnessError::InvalidModel("means must be positive".into()));
        }
        if self.dwell_std < 0.0 || self.flight_std < 0.0 {
            return Err(HarnessError::InvalidModel(
                "std must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.error_rate) {
            return Err(HarnessError::InvalidModel(
                "error_rate must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Gaussian sample truncated below at 1 ms by rejection.
fn truncated(mean: f64, std: f64, rng: &mut dyn RngCore) -> f64 {
    if std == 0.0 {
        return mean.max(1.0);
    }
    let normal = Normal::new(mean, std).expect("validated std");
    for _ in 0..10_000 {
        let x: f64 = normal.sample(rng);
        if x >= 1.0 {
            return x;
        }
    }
    1.0
}

fn left_hand(c: char) -> bool {
    "qwertasdfgzxcvb".contains(c)
}

/// The unmodified key that yields `c` under Shift or CapsLock, if any.
fn shifted_base(c: char) -> Option<char> {
    if !c.is_uppercase() {
        return None;
    }
    let mut lower = c.to_lowercase();
    let (Some(l), None) = (lower.next(), lower.next()) else {
        return None;
    };
    let mut upper = l.to_uppercase();
    match (upper.next(), upper.next()) {
        (Some(u), None) if u == c && l.is_lowercase() => Some(l),
        _ => None,
    }
}

struct Typing<'a> {
    model: &'a TypistModel,
    rng: &'a mut dyn RngCore,
    events: Vec<KeyEvent>,
    /// Time of the next key-down.
    cursor: f64,
    caps_on: bool,
}

impl Typing<'_> {
    fn dwell(&mut self) -> f64 {
        truncated(self.model.dwell_mean, self.model.dwell_std, self.rng)
    }

    fn flight(&mut self) -> f64 {
        truncated(self.model.flight_mean, self.model.flight_std, self.rng)
    }

    fn tap(&mut self, key: Key) {
        let down = self.cursor;
        let up = down + self.dwell();
        self.events.push(KeyEvent::down(key.clone(), down));
        self.events.push(KeyEvent::up(key, up));
        self.cursor = up + self.flight();
    }

    fn shifted_tap(&mut self, base: char) {
        let shift = if left_hand(base) {
            Key::RShift
        } else {
            Key::LShift
        };
        let shift_down = self.cursor;
        let down = shift_down + (self.flight() / 2.0).max(1.0);
        let up = down + self.dwell();
        let shift_up = up + (self.dwell() / 4.0).max(1.0);
        self.events.push(KeyEvent::down(shift.clone(), shift_down));
        self.events.push(KeyEvent::down(Key::Char(base), down));
        self.events.push(KeyEvent::up(Key::Char(base), up));
        self.events.push(KeyEvent::up(shift, shift_up));
        self.cursor = shift_up + self.flight();
    }

    fn set_caps(&mut self, on: bool) {
        if self.caps_on != on {
            self.tap(Key::CapsLock);
            self.caps_on = on;
        }
    }

    fn typo(&mut self, intended: char) {
        let base = intended.to_lowercase().next().unwrap_or(intended);
        let mut wrong = base;
        while wrong == base {
            wrong = (b'a' + self.rng.random_range(0..26u8)) as char;
        }
        self.tap(Key::Char(wrong));
        self.tap(Key::Backspace);
    }

    fn type_char(&mut self, c: char) {
        if self.model.error_rate > 0.0 && self.rng.random_bool(self.model.error_rate) {
            self.typo(c);
        }
        match (shifted_base(c), self.model.shift_style) {
            (Some(base), ShiftStyle::ShiftKey) => self.shifted_tap(base),
            (Some(base), ShiftStyle::CapsLock) => {
                self.set_caps(true);
                self.tap(Key::Char(base));
            }
            (None, _) => {
                if c.is_lowercase() {
                    self.set_caps(false);
                }
                self.tap(Key::Char(c));
            }
        }
    }

    /// Types `text` and returns the inclusive event span it occupied.
    fn type_field(&mut self, text: &str) -> FieldSpan {
        let start = self.events.len();
        for c in text.chars() {
            self.type_char(c);
        }
        self.set_caps(false);
        FieldSpan::new(start, self.events.len() - 1)
    }
}

fn round_ms(t: f64) -> f64 {
    (t * 10.0).round() / 10.0
}

/// Key events for typing `text`, starting at t = 0.
pub fn simulate_text(
    model: &TypistModel,
    text: &str,
    rng: &mut dyn RngCore,
) -> Result<Vec<KeyEvent>, HarnessError> {
    model.validate()?;
    let mut typing = Typing {
        model,
        rng,
        events: Vec::new(),
        cursor: 0.0,
        caps_on: false,
    };
    if !text.is_empty() {
        typing.type_field(text);
    }
    Ok(typing.events)
}

/// A full login session: the username followed by the password.
pub fn simulate_session(
    model: &TypistModel,
    username: &str,
    password: &str,
    rng: &mut dyn RngCore,
) -> Result<LoginSession, HarnessError> {
    model.validate()?;
    if username.is_empty() || password.is_empty() {
        return Err(HarnessError::InvalidModel(
            "username and password must be non-empty".into(),
        ));
    }
    let mut typing = Typing {
        model,
        rng,
        events: Vec::new(),
        cursor: 0.0,
        caps_on: false,
    };
    let user_span = typing.type_field(username);
    // moving focus to the password field
    typing.cursor += typing.flight() * 2.0;
    let pass_span = typing.type_field(password);
    let mut events = typing.events;
    for ev in &mut events {
        ev.t = round_ms(ev.t);
    }
    let fields = FieldSpans {
        username: Some(user_span),
        password: Some(pass_span),
    };
    Ok(LoginSession::new(
        username,
        Default::default(),
        fields,
        events,
        None,
    )?)
}

/// Typists that differ from `base` by at least `sigmas` standard deviations in
/// dwell or flight, or by their shift style.
pub fn imposter_models(base: &TypistModel, n: usize, sigmas: f64, seed: u64) -> Vec<TypistModel> {
    let dwell_step = base.dwell_std.max(base.dwell_mean * 0.1);
    let flight_step = base.flight_std.max(base.flight_mean * 0.1);
    (0..n)
        .map(|i| {
            let m = sigmas + (i / 5) as f64;
            let mut model = base.clone().with_seed(seed.wrapping_add(i as u64 + 1));
            let slower = |mean: f64, step: f64| mean + m * step;
            let faster = |mean: f64, step: f64| {
                let v = mean - m * step;
                if v >= 5.0 {
                    v
                } else {
                    mean + m * step
                }
            };
            match i % 5 {
                0 => {
                    model.dwell_mean = slower(base.dwell_mean, dwell_step);
                    model.flight_mean = slower(base.flight_mean, flight_step);
                }
                1 => {
                    model.dwell_mean = faster(base.dwell_mean, dwell_step);
                    model.flight_mean = faster(base.flight_mean, flight_step);
                }
                2 => {
                    model.shift_style = match base.shift_style {
                        ShiftStyle::ShiftKey => ShiftStyle::CapsLock,
                        ShiftStyle::CapsLock => ShiftStyle::ShiftKey,
                    };
                }
                3 => model.dwell_mean = slower(base.dwell_mean, dwell_step),
                _ => {
                    model.dwell_mean = faster(base.dwell_mean, dwell_step);
                    model.flight_mean = slower(base.flight_mean, flight_step);
                }
            }
            model
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Legit,
    Imposter,
}

/// Whether the subject can complete a second-factor challenge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChallengeBehavior {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledAttempt {
    pub session: LoginSession,
    pub truth: Truth,
    pub challenge_behavior: ChallengeBehavior,
}

pub fn read_scenario(bytes: &[u8]) -> Result<Vec<LabeledAttempt>, HarnessError> {
    let attempts: Vec<LabeledAttempt> = serde_json::from_slice(bytes)?;
    for a in &attempts {
        a.session.validate()?;
    }
    Ok(attempts)
}

/// Sessions for training one user.
pub fn training_sessions(
    model: &TypistModel,
    username: &str,
    password: &str,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<LoginSession>, HarnessError> {
    (0..n)
        .map(|_| simulate_session(model, username, password, rng))
        .collect()
}

/// `n_legit` attempts by the enrolled typist, then one imposter attempt per
/// model, all with the correct credentials.
pub fn stolen_credential_scenario(
    legit: &TypistModel,
    imposters: &[TypistModel],
    username: &str,
    password: &str,
    n_legit: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<LabeledAttempt>, HarnessError> {
    let mut attempts = Vec::new();
    for _ in 0..n_legit {
        attempts.push(LabeledAttempt {
            session: simulate_session(legit, username, password, rng)?,
            truth: Truth::Legit,
            challenge_behavior: ChallengeBehavior::Pass,
        });
    }
    for model in imposters {
        attempts.push(LabeledAttempt {
            session: simulate_session(model, username, password, rng)?,
            truth: Truth::Imposter,
            challenge_behavior: ChallengeBehavior::Fail,
        });
    }
    Ok(attempts)
}

/// What a target answered to a login attempt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TargetReply {
    Granted {
        degree: OutlierDegree,
    },
    Challenge {
        id: String,
        kind: ChallengeKind,
        degree: OutlierDegree,
    },
    Denied {
        reason: String,
    },
}

/// Something a scenario can be replayed against.
pub trait ReplayTarget {
    fn attempt(&mut self, session: &LoginSession) -> Result<TargetReply, HarnessError>;
    /// Reads the delivered secret for a challenge from the second channel.
    fn delivered_secret(
        &mut self,
        user: &str,
        id: &str,
        kind: ChallengeKind,
    ) -> Result<String, HarnessError>;
    fn respond(
        &mut self,
        id: &str,
        kind: ChallengeKind,
        secret: &str,
    ) -> Result<ChallengeStatus, HarnessError>;
}

/// Finds the secret for challenge `id` among outbox entries. OTP lines carry
/// no id, so the newest OTP for the user is taken; replay is sequential per
/// user, which makes that the right one.
pub fn find_secret(
    entries: &[OutboxEntry],
    user: &str,
    id: &str,
    kind: ChallengeKind,
) -> Option<String> {
    entries
        .iter()
        .rev()
        .find(|e| {
            e.kind == kind
                && e.user == user
                && match kind {
                    ChallengeKind::Otp => true,
                    ChallengeKind::Oob => e.challenge_id() == Some(id),
                }
        })
        .map(|e| e.secret().to_string())
}

pub struct InProcessTarget {
    pub engine: Arc<Engine>,
    pub outbox: MemoryOutbox,
}

impl ReplayTarget for InProcessTarget {
    fn attempt(&mut self, session: &LoginSession) -> Result<TargetReply, HarnessError> {
        match self.engine.attempt(session) {
            Ok(r) => {
                let degree = r
                    .assessment
                    .as_ref()
                    .map(|a| a.degree)
                    .unwrap_or(OutlierDegree::SecondDegree);
                Ok(match r.challenge {
                    None => TargetReply::Granted { degree },
                    Some(c) => TargetReply::Challenge {
                        id: c.id,
                        kind: c.kind,
                        degree,
                    },
                })
            }
            Err(EngineError::UnknownUser) => {
                Err(HarnessError::UnknownUser(session.username_claim.clone()))
            }
            Err(EngineError::BadCredentials) => Ok(TargetReply::Denied {
                reason: "bad_credentials".into(),
            }),
            Err(e) => Err(HarnessError::Engine(e)),
        }
    }

    fn delivered_secret(
        &mut self,
        user: &str,
        id: &str,
        kind: ChallengeKind,
    ) -> Result<String, HarnessError> {
        find_secret(&self.outbox.entries(), user, id, kind)
            .ok_or_else(|| HarnessError::MissingDelivery(id.into()))
    }

    fn respond(
        &mut self,
        id: &str,
        kind: ChallengeKind,
        secret: &str,
    ) -> Result<ChallengeStatus, HarnessError> {
        match self.engine.resolve_challenge(id, kind, secret) {
            Ok(r) => Ok(r.status),
            Err(EngineError::ChallengeClosed) => Ok(ChallengeStatus::Denied),
            Err(e) => Err(HarnessError::Engine(e)),
        }
    }
}

/// Replays against a running service, reading secrets from its outbox file.
pub struct HttpTarget {
    pub base_url: String,
    pub outbox: PathBuf,
    client: reqwest::blocking::Client,
}

impl HttpTarget {
    pub fn new(base_url: impl Into<String>, outbox: impl Into<PathBuf>) -> Self {
        Self {
            base_url: base_url.into(),
            outbox: outbox.into(),
            client: reqwest::blocking::Client::new(),
        }
    }

    fn post(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<(u16, serde_json::Value), HarnessError> {
        let url = format!("{}{}", self.base_url.trim_end_matches('/'), path);
        let resp = self
            .client
            .post(url)
            .json(body)
            .send()
            .map_err(|e| HarnessError::Http(e.to_string()))?;
        let status = resp.status().as_u16();
        let value = resp.json().map_err(|e| HarnessError::Http(e.to_string()))?;
        Ok((status, value))
    }
}

fn field<'a>(v: &'a serde_json::Value, key: &str) -> Result<&'a str, HarnessError> {
    v.get(key)
        .and_then(|x| x.as_str())
        .ok_or_else(|| HarnessError::Protocol(format!("missing {key} in {v}")))
}

fn degree_of(v: &serde_json::Value) -> Result<OutlierDegree, HarnessError> {
    serde_json::from_value(v.get("risk").cloned().unwrap_or_default())
        .map_err(|_| HarnessError::Protocol(format!("missing risk in {v}")))
}

impl ReplayTarget for HttpTarget {
    fn attempt(&mut self, session: &LoginSession) -> Result<TargetReply, HarnessError> {
        let (status, v) = self.post("/v1/login/attempt", &serde_json::to_value(session)?)?;
        match status {
            200 => Ok(TargetReply::Granted {
                degree: degree_of(&v)?,
            }),
            202 => {
                let challenge = v
                    .get("challenge")
                    .ok_or_else(|| HarnessError::Protocol(v.to_string()))?;
                let kind =
                    serde_json::from_value(challenge.get("kind").cloned().unwrap_or_default())?;
                Ok(TargetReply::Challenge {
                    id: field(challenge, "id")?.to_string(),
                    kind,
                    degree: degree_of(&v)?,
                })
            }
            403 if field(&v, "reason").ok() == Some("unknown_user") => {
                Err(HarnessError::UnknownUser(session.username_claim.clone()))
            }
            403 => Ok(TargetReply::Denied {
                reason: field(&v, "reason").unwrap_or("denied").to_string(),
            }),
            _ => Err(HarnessError::Protocol(format!("status {status}: {v}"))),
        }
    }

    fn delivered_secret(
        &mut self,
        user: &str,
        id: &str,
        kind: ChallengeKind,
    ) -> Result<String, HarnessError> {
        let entries = OutboxLog::read_entries(&self.outbox)?;
        find_secret(&entries, user, id, kind)
            .ok_or_else(|| HarnessError::MissingDelivery(id.into()))
    }

    fn respond(
        &mut self,
        id: &str,
        kind: ChallengeKind,
        secret: &str,
    ) -> Result<ChallengeStatus, HarnessError> {
        let body = match kind {
            ChallengeKind::Otp => serde_json::json!({ "code": secret }),
            ChallengeKind::Oob => serde_json::json!({ "token": secret }),
        };
        let (status, v) = self.post(&format!("/v1/challenge/{id}/{}", kind.as_str()), &body)?;
        match (status, field(&v, "outcome").ok()) {
            (200, Some("granted")) => Ok(ChallengeStatus::Granted),
            (403, Some("retry")) => Ok(ChallengeStatus::Retry),
            // 409: the challenge was already closed
            (403 | 409, _) => Ok(ChallengeStatus::Denied),
            _ => Err(HarnessError::Protocol(format!("status {status}: {v}"))),
        }
    }
}

/// A secret guaranteed to differ from `real`, standing in for a guess.
fn wrong_secret(real: &str) -> String {
    let mut chars: Vec<char> = real.chars().collect();
    if let Some(last) = chars.last_mut() {
        *last = if *last == '0' { '1' } else { '0' };
    }
    chars.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub index: usize,
    pub username: String,
    pub truth: Truth,
    pub degree: Option<OutlierDegree>,
    pub challenge: Option<ChallengeKind>,
    pub challenge_status: Option<ChallengeStatus>,
    pub granted: bool,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub legit_total: usize,
    pub legit_granted: usize,
    pub legit_denied: usize,
    pub imposter_total: usize,
    pub imposter_granted: usize,
    pub imposter_denied: usize,
    pub challenged: usize,
    pub challenged_otp: usize,
    pub challenged_oob: usize,
    pub challenges_passed: usize,
    /// Attempts assessed as Normal.
    pub normal: usize,
    /// `imposter_granted / imposter_total`; `None` without imposters.
    pub fpr: Option<f64>,
    /// `legit_denied / legit_total`; `None` without legit attempts.
    pub fnr: Option<f64>,
    /// `legit_granted / legit_total`.
    pub gar: Option<f64>,
}

impl MetricsReport {
    pub fn from_logs(logs: &[AttemptLog]) -> Self {
        let mut m = MetricsReport::default();
        for log in logs {
            match (log.truth, log.granted) {
                (Truth::Legit, true) => m.legit_granted += 1,
                (Truth::Legit, false) => m.legit_denied += 1,
                (Truth::Imposter, true) => m.imposter_granted += 1,
                (Truth::Imposter, false) => m.imposter_denied += 1,
            }
            match log.challenge {
                Some(ChallengeKind::Otp) => m.challenged_otp += 1,
                Some(ChallengeKind::Oob) => m.challenged_oob += 1,
                None => {}
            }
            if log.challenge_status == Some(ChallengeStatus::Granted) {
                m.challenges_passed += 1;
            }
            if log.degree == Some(OutlierDegree::Normal) {
                m.normal += 1;
            }
        }
        m.legit_total = m.legit_granted + m.legit_denied;
        m.imposter_total = m.imposter_granted + m.imposter_denied;
        m.challenged = m.challenged_otp + m.challenged_oob;
        let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        m.fpr = rate(m.imposter_granted, m.imposter_total);
        m.fnr = rate(m.legit_denied, m.legit_total);
        m.gar = rate(m.legit_granted, m.legit_total);
        m
    }
}

/// Runs every attempt in order. Challenged subjects with `Pass` answer with
/// the delivered secret; with `Fail` they submit a wrong one.
pub fn replay(
    target: &mut dyn ReplayTarget,
    attempts: &[LabeledAttempt],
) -> Result<(MetricsReport, Vec<AttemptLog>), HarnessError> {
    let mut logs = Vec::with_capacity(attempts.len());
    for (index, a) in attempts.iter().enumerate() {
        let user = &a.session.username_claim;
        let mut log = AttemptLog {
            index,
            username: user.clone(),
            truth: a.truth,
            degree: None,
            challenge: None,
            challenge_status: None,
            granted: false,
            reason: None,
        };
        match target.attempt(&a.session)? {
            TargetReply::Granted { degree } => {
                log.degree = Some(degree);
                log.granted = true;
            }
            TargetReply::Denied { reason } => log.reason = Some(reason),
            TargetReply::Challenge { id, kind, degree } => {
                log.degree = Some(degree);
                log.challenge = Some(kind);
                let real = target.delivered_secret(user, &id, kind)?;
                let secret = match a.challenge_behavior {
                    ChallengeBehavior::Pass => real,
                    ChallengeBehavior::Fail => wrong_secret(&real),
                };
                let status = target.respond(&id, kind, &secret)?;
                log.challenge_status = Some(status);
                log.granted = status == ChallengeStatus::Granted;
                if !log.granted {
                    log.reason = Some("challenge_not_completed".into());
                }
            }
        }
        logs.push(log);
    }
    Ok((MetricsReport::from_logs(&logs), logs))
}

/// CSV exports of a profile's cluster geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileExport {
    pub elbow: ElbowReport,
    /// Header `x,y,kind`; rows for history, centroids, then the attempt.
    pub scatter_csv: String,
}

/// Projects the profile's normalized history, the centroids and optionally an
/// attempt onto two dimensions.
pub fn export_profile(
    profile: &UserProfile,
    config: &AnomalyConfig,
    attempt: Option<&LoginSession>,
    x: Dimension,
    y: Dimension,
) -> Result<ProfileExport, HarnessError> {
    let geometry = engine::cluster_geometry(profile, config).map_err(HarnessError::Engine)?;
    let dims = &geometry.dimensions;
    let axis = |d: Dimension| {
        dims.iter()
            .position(|&x| x == d)
            .ok_or(HarnessError::Session(SessionError::MissingDimension(d)))
    };
    let (xi, yi) = (axis(x)?, axis(y)?);
    let mut csv = String::from("x,y,kind\n");
    for p in &geometry.points {
        csv.push_str(&format!("{},{},history\n", p[xi], p[yi]));
    }
    for c in &geometry.centroids {
        csv.push_str(&format!("{},{},centroid\n", c[xi], c[yi]));
    }
    if let Some(session) = attempt {
        let raw = profile.attempt_features(session)?;
        let p = profile.attempt_point(&raw, config.clamp_attempts)?;
        csv.push_str(&format!("{},{},attempt\n", p[xi], p[yi]));
    }
    Ok(ProfileExport {
        elbow: geometry.elbow,
        scatter_csv: csv,
    })
}
