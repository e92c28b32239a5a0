use std::path::{Path, PathBuf};
use std::sync::Arc;

use keydyn::anomaly::{AnomalyConfig, OutlierDegree};
use keydyn::engine::{Engine, EngineConfig, ManualClock};
use keydyn::harness::{self, TypistModel};
use keydyn::mfa::{self, ChallengeKind, OutboxLog};
use keydyn::service::{engine_from_config, BackgroundServer, ServiceConfig};
use keydyn::session::LoginSession;
use keydyn::store::{HashParams, ProfileStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reqwest::blocking::Client;
use serde_json::{json, Value};

mod common;

const USER: &str = "carol";
const PASSWORD: &str = "Blue-Kettle42";
const START_MS: i64 = 1_700_000_000_000;

struct Fixture {
    dir: tempfile::TempDir,
    engine: Arc<Engine>,
    clock: Arc<ManualClock>,
    server: BackgroundServer,
    http: Client,
    rng: ChaCha8Rng,
}

fn engine_config(seed: u64) -> EngineConfig {
    EngineConfig {
        seed: Some(seed),
        hash_params: HashParams::light(),
        ..Default::default()
    }
}

fn service_config(dir: &Path, engine: EngineConfig) -> ServiceConfig {
    ServiceConfig {
        port: 0,
        store_path: dir.join("store.json"),
        outbox_path: dir.join("outbox.log"),
        engine,
        ..Default::default()
    }
}

fn start(
    dir: &Path,
    engine: EngineConfig,
    clock: Arc<ManualClock>,
) -> (Arc<Engine>, BackgroundServer) {
    let engine = Arc::new(engine_from_config(&service_config(dir, engine), clock).unwrap());
    let server = BackgroundServer::start(engine.clone(), 0).unwrap();
    (engine, server)
}

impl Fixture {
    /// A server with `carol` enrolled from 20 moderate-typist sessions.
    fn trained(seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(START_MS));
        let (engine, server) = start(dir.path(), engine_config(seed), clock.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let training =
            harness::training_sessions(&TypistModel::moderate(), USER, PASSWORD, 20, &mut rng)
                .unwrap();
        engine.enroll(USER, PASSWORD, &training, None).unwrap();
        Fixture {
            dir,
            engine,
            clock,
            server,
            http: Client::new(),
            rng,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.server.base_url())
    }

    fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let resp = self.http.post(self.url(path)).json(body).send().unwrap();
        (resp.status().as_u16(), resp.json().unwrap())
    }

    fn post_raw(&self, path: &str, body: &'static str) -> (u16, Value) {
        let resp = self
            .http
            .post(self.url(path))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .unwrap();
        (resp.status().as_u16(), resp.json().unwrap())
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let resp = self.http.get(self.url(path)).send().unwrap();
        (resp.status().as_u16(), resp.json().unwrap())
    }

    fn attempt(&self, session: &LoginSession) -> (u16, Value) {
        self.post("/v1/login/attempt", &serde_json::to_value(session).unwrap())
    }

    fn session(&mut self, degree: OutlierDegree) -> LoginSession {
        common::session_with_degree(
            &self.engine,
            &TypistModel::moderate(),
            USER,
            PASSWORD,
            degree,
            &mut self.rng,
        )
        .expect("session with requested degree")
    }

    fn outbox(&self) -> PathBuf {
        self.dir.path().join("outbox.log")
    }

    fn secret(&self, id: &str, kind: ChallengeKind) -> String {
        let entries = OutboxLog::read_entries(&self.outbox()).unwrap();
        harness::find_secret(&entries, USER, id, kind).expect("delivered secret")
    }

    fn history_len(&self) -> u64 {
        self.get(&format!("/v1/admin/users/{USER}/profile")).1["history_len"]
            .as_u64()
            .unwrap()
    }
}

fn assert_error_body(v: &Value, code: &str) {
    assert_eq!(v["error"], code, "{v}");
    assert!(v["detail"].is_string(), "{v}");
}

#[test]
fn username_lookup() {
    let f = Fixture::trained(1);
    assert_eq!(
        f.post("/v1/login/username", &json!({ "username": USER })),
        (200, json!({ "exists": true }))
    );
    assert_eq!(
        f.post("/v1/login/username", &json!({ "username": "mallory" })),
        (200, json!({ "exists": false }))
    );

    let (status, v) = f.post("/v1/login/username", &json!({}));
    assert_eq!(status, 400);
    assert_error_body(&v, "malformed");
    let (status, v) = f.post_raw("/v1/login/username", "{not json");
    assert_eq!(status, 400);
    assert_error_body(&v, "malformed");
}

#[test]
fn legit_attempt_is_granted_and_learned() {
    let mut f = Fixture::trained(2);
    let before = f.history_len();
    let session = f.session(OutlierDegree::Normal);
    let (status, v) = f.attempt(&session);
    assert_eq!(status, 200, "{v}");
    assert_eq!(v["outcome"], "granted");
    assert_eq!(v["risk"], "normal");
    assert!(v["attempt_id"].is_string());
    assert!(v.get("challenge").is_none());
    assert!(v.get("explain").is_none());
    assert_eq!(f.history_len(), before + 1);
}

#[test]
fn explain_flag_adds_the_stage_log() {
    let mut f = Fixture::trained(3);
    let session = f.session(OutlierDegree::Normal);
    let resp = f
        .http
        .post(f.url("/v1/login/attempt?explain=true"))
        .json(&session)
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let v: Value = resp.json().unwrap();
    assert_eq!(v["explain"]["degree"], "normal");
    assert!(
        v["explain"]["explain"]
            .as_array()
            .is_some_and(|l| !l.is_empty()),
        "{v}"
    );
}

#[test]
fn far_field_imposter_gets_out_of_band_challenge() {
    let mut f = Fixture::trained(4);
    let before = f.history_len();
    let imposter = TypistModel {
        dwell_mean: 300.0,
        flight_mean: 600.0,
        ..TypistModel::moderate()
    };
    let session = harness::simulate_session(&imposter, USER, PASSWORD, &mut f.rng).unwrap();
    let (status, v) = f.attempt(&session);
    assert_eq!(status, 202, "{v}");
    assert_eq!(v["outcome"], "challenge");
    assert_eq!(v["risk"], "second_degree");
    assert_eq!(v["challenge"]["kind"], "oob");
    assert_eq!(v["challenge"]["expires_at"], START_MS + mfa::DEFAULT_TTL_MS);
    // nothing is learned while the challenge is pending
    assert_eq!(f.history_len(), before);
}

#[test]
fn wrong_password_reveals_no_risk_data() {
    let mut f = Fixture::trained(5);
    let session =
        harness::simulate_session(&TypistModel::moderate(), USER, "Blue-Kettle43", &mut f.rng)
            .unwrap();
    for path in ["/v1/login/attempt", "/v1/login/attempt?explain=true"] {
        let (status, v) = f.post(path, &serde_json::to_value(&session).unwrap());
        assert_eq!(status, 403);
        assert_eq!(
            v,
            json!({ "outcome": "denied", "reason": "bad_credentials" })
        );
    }
}

#[test]
fn unknown_user_is_denied_before_password_check() {
    let mut f = Fixture::trained(6);
    let session =
        harness::simulate_session(&TypistModel::moderate(), "mallory", PASSWORD, &mut f.rng)
            .unwrap();
    let (status, v) = f.attempt(&session);
    assert_eq!(status, 403);
    assert_eq!(v["reason"], "unknown_user");
    assert!(v.get("risk").is_none());
    assert!(f.engine.records().is_empty());
}

#[test]
fn malformed_session_is_rejected() {
    let mut f = Fixture::trained(7);
    let (status, v) = f.post_raw("/v1/login/attempt", r#"{"username_claim": "carol"}"#);
    assert_eq!(status, 400);
    assert_error_body(&v, "malformed_session");

    let mut session = f.session(OutlierDegree::Normal);
    session.events.swap(0, 3);
    let (status, v) = f.attempt(&session);
    assert_eq!(status, 400);
    assert_error_body(&v, "malformed_session");
}

#[test]
fn untrained_profile_answers_conflict() {
    let f = Fixture::trained(8);
    let session =
        harness::simulate_session(&TypistModel::moderate(), USER, PASSWORD, &mut f.rng.clone())
            .unwrap();
    let dir = f.dir.path().to_path_buf();
    drop(f.server);

    // same store, stricter training requirement
    let mut config = engine_config(8);
    config.anomaly = AnomalyConfig {
        min_history: 30,
        ..Default::default()
    };
    let (_engine, server) = start(&dir, config, Arc::new(ManualClock::new(START_MS)));
    let resp = Client::new()
        .post(format!("{}/v1/login/attempt", server.base_url()))
        .json(&session)
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 409);
    assert_error_body(&resp.json().unwrap(), "not_trained");
}

#[test]
fn otp_challenge_lifecycle() {
    let mut f = Fixture::trained(9);
    let before = f.history_len();

    // correct code
    let (status, v) = {
        let s = f.session(OutlierDegree::FirstDegree);
        f.attempt(&s)
    };
    assert_eq!(status, 202, "{v}");
    assert_eq!(v["risk"], "first_degree");
    assert_eq!(v["challenge"]["kind"], "otp");
    let id = v["challenge"]["id"].as_str().unwrap().to_string();
    let code = f.secret(&id, ChallengeKind::Otp);
    assert_eq!(code.len(), 6);
    let (status, v) = f.post(&format!("/v1/challenge/{id}/otp"), &json!({ "code": code }));
    assert_eq!((status, v), (200, json!({ "outcome": "granted" })));
    assert_eq!(f.history_len(), before + 1);

    // the challenge is terminal now
    let (status, v) = f.post(&format!("/v1/challenge/{id}/otp"), &json!({ "code": code }));
    assert_eq!(status, 409);
    assert_error_body(&v, "challenge_closed");

    // wrong code, then retries run out
    let (_, v) = {
        let s = f.session(OutlierDegree::FirstDegree);
        f.attempt(&s)
    };
    let id = v["challenge"]["id"].as_str().unwrap().to_string();
    let wrong = common::differ(&f.secret(&id, ChallengeKind::Otp));
    let (status, v) = f.post(
        &format!("/v1/challenge/{id}/otp"),
        &json!({ "code": wrong }),
    );
    assert_eq!(status, 403);
    assert_eq!(
        v,
        json!({ "outcome": "retry", "reason": "wrong_code", "attempts_left": 2 })
    );
    f.post(
        &format!("/v1/challenge/{id}/otp"),
        &json!({ "code": wrong }),
    );
    let (status, v) = f.post(
        &format!("/v1/challenge/{id}/otp"),
        &json!({ "code": wrong }),
    );
    assert_eq!((status, v["outcome"].as_str()), (403, Some("denied")));

    // expiry
    let (_, v) = {
        let s = f.session(OutlierDegree::FirstDegree);
        f.attempt(&s)
    };
    let id = v["challenge"]["id"].as_str().unwrap().to_string();
    let code = f.secret(&id, ChallengeKind::Otp);
    f.clock.advance(mfa::DEFAULT_TTL_MS + 1);
    let (status, v) = f.post(&format!("/v1/challenge/{id}/otp"), &json!({ "code": code }));
    assert_eq!(
        (status, v),
        (403, json!({ "outcome": "denied", "reason": "expired" }))
    );

    assert_eq!(f.history_len(), before + 1);
}

#[test]
fn challenge_errors() {
    let mut f = Fixture::trained(10);
    let (status, v) = f.post("/v1/challenge/ch-nope/otp", &json!({ "code": "123456" }));
    assert_eq!(status, 404);
    assert_error_body(&v, "unknown_challenge");

    let (_, v) = {
        let s = f.session(OutlierDegree::FirstDegree);
        f.attempt(&s)
    };
    let id = v["challenge"]["id"].as_str().unwrap().to_string();
    let (status, v) = f.post(
        &format!("/v1/challenge/{id}/oob"),
        &json!({ "token": "00" }),
    );
    assert_eq!(status, 400);
    assert_error_body(&v, "wrong_challenge_kind");
    let (status, v) = f.post(
        &format!("/v1/challenge/{id}/otp"),
        &json!({ "token": "00" }),
    );
    assert_eq!(status, 400);
    assert_error_body(&v, "malformed");
}

#[test]
fn out_of_band_link_approves() {
    let mut f = Fixture::trained(11);
    let before = f.history_len();
    let (_, v) = {
        let s = f.session(OutlierDegree::SecondDegree);
        f.attempt(&s)
    };
    let id = v["challenge"]["id"].as_str().unwrap().to_string();
    let entries = OutboxLog::read_entries(&f.outbox()).unwrap();
    let link = &entries.last().unwrap().payload;
    assert!(
        link.contains(&format!("/v1/challenge/{id}/oob?token=")),
        "{link}"
    );

    // follow the delivered link against this server's address
    let query = link.split_once("/v1/").unwrap().1;
    let (status, v) = f.get(&format!("/v1/{query}"));
    assert_eq!((status, v), (200, json!({ "outcome": "granted" })));
    assert_eq!(f.history_len(), before + 1);

    // a wrong token closes an out-of-band challenge at once
    let (_, v) = {
        let s = f.session(OutlierDegree::SecondDegree);
        f.attempt(&s)
    };
    let id = v["challenge"]["id"].as_str().unwrap().to_string();
    let wrong = common::differ(&f.secret(&id, ChallengeKind::Oob));
    let (status, v) = f.post(
        &format!("/v1/challenge/{id}/oob"),
        &json!({ "token": wrong }),
    );
    assert_eq!((status, v["outcome"].as_str()), (403, Some("denied")));
}

#[test]
fn enrollment_endpoint() {
    let f = Fixture::trained(12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = TypistModel::fast();
    let sessions = harness::training_sessions(&model, "dave", "Pa55word!", 10, &mut rng).unwrap();
    let body = json!({ "username": "dave", "password": "Pa55word!", "sessions": sessions });
    assert_eq!(f.post("/v1/enroll", &body), (201, json!({ "trained": 10 })));

    let (status, v) = f.post("/v1/enroll", &body);
    assert_eq!(status, 409);
    assert_error_body(&v, "duplicate_user");

    let short = json!({ "username": "erin", "password": "Pa55word!", "sessions": &sessions[..9] });
    let (status, v) = f.post("/v1/enroll", &short);
    assert_eq!(status, 422);
    assert_error_body(&v, "insufficient_training");

    let mut mixed = harness::training_sessions(&model, "erin", "Pa55word!", 10, &mut rng).unwrap();
    mixed[3] = harness::simulate_session(&model, "erin", "Pa55word?", &mut rng).unwrap();
    let (status, v) = f.post(
        "/v1/enroll",
        &json!({ "username": "erin", "password": "Pa55word!", "sessions": mixed }),
    );
    assert_eq!(status, 422);
    assert_error_body(&v, "rejected_session");
    assert!(v["detail"].as_str().unwrap().contains('3'), "{v}");
    assert_eq!(
        f.post("/v1/login/username", &json!({ "username": "erin" }))
            .1["exists"],
        false
    );

    let (status, v) = f.post_raw("/v1/enroll", r#"{"username": "erin"}"#);
    assert_eq!(status, 400);
    assert_error_body(&v, "malformed");
}

#[test]
fn profile_summary_carries_no_secrets() {
    let f = Fixture::trained(13);
    let (status, v) = f.get(&format!("/v1/admin/users/{USER}/profile"));
    assert_eq!(status, 200);
    assert_eq!(v["username"], USER);
    assert_eq!(v["history_len"], 20);
    let text = v.to_string();
    for secret in [PASSWORD, "credential", "hash", "salt", "argon"] {
        assert!(!text.contains(secret), "{secret} in {text}");
    }
    let (status, v) = f.get("/v1/admin/users/nobody/profile");
    assert_eq!(status, 404);
    assert_error_body(&v, "unknown_user");
}

#[test]
fn cluster_export_is_normalized_and_stable() {
    let f = Fixture::trained(14);
    let path = format!("/v1/admin/users/{USER}/clusters");
    let (status, v) = f.get(&path);
    assert_eq!(status, 200);
    let k = v["k"].as_u64().unwrap() as usize;
    let centroids = v["centroids"].as_array().unwrap();
    let points = v["points"].as_array().unwrap();
    let dims = v["dimensions"].as_array().unwrap().len();
    assert_eq!(centroids.len(), k);
    assert_eq!(points.len(), 20);
    assert_eq!(v["assignments"].as_array().unwrap().len(), 20);
    for p in points.iter().chain(centroids) {
        let p = p.as_array().unwrap();
        assert_eq!(p.len(), dims);
        assert!(
            p.iter().all(|x| (0.0..=1.0).contains(&x.as_f64().unwrap())),
            "{p:?}"
        );
    }
    assert_eq!(f.get(&path).1, v);
    assert_eq!(f.get("/v1/admin/users/nobody/clusters").0, 404);
}

#[test]
fn restart_reproduces_decisions() {
    let f = Fixture::trained(15);
    let store_path = f.dir.path().join("store.json");
    let original = ProfileStore::load(&store_path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(150);
    let models = [
        TypistModel::moderate(),
        TypistModel::slow(),
        TypistModel::moderate(),
        TypistModel::fast(),
    ];
    let sessions: Vec<LoginSession> = (0..8)
        .map(|i| harness::simulate_session(&models[i % 4], USER, PASSWORD, &mut rng).unwrap())
        .collect();

    // Answers every challenge correctly, so every attempt is learned.
    let run = |engine: &Arc<Engine>, outbox: &Path, sessions: &[LoginSession]| -> Vec<Value> {
        let server = BackgroundServer::start(engine.clone(), 0).unwrap();
        let http = Client::new();
        let mut out = Vec::new();
        for s in sessions {
            let v: Value = http
                .post(format!("{}/v1/login/attempt", server.base_url()))
                .json(s)
                .send()
                .unwrap()
                .json()
                .unwrap();
            if let Some(id) = v["challenge"]["id"].as_str() {
                let kind = if v["challenge"]["kind"] == "otp" {
                    ChallengeKind::Otp
                } else {
                    ChallengeKind::Oob
                };
                let entries = OutboxLog::read_entries(outbox).unwrap();
                let secret = harness::find_secret(&entries, USER, id, kind).unwrap();
                let body = match kind {
                    ChallengeKind::Otp => json!({ "code": secret }),
                    ChallengeKind::Oob => json!({ "token": secret }),
                };
                let url = format!("{}/v1/challenge/{id}/{}", server.base_url(), kind.as_str());
                let r: Value = http.post(url).json(&body).send().unwrap().json().unwrap();
                assert_eq!(r["outcome"], "granted");
            }
            out.push(json!({ "risk": v["risk"], "outcome": v["outcome"], "kind": v["challenge"]["kind"] }));
        }
        out
    };
    let fresh = |name: &str| {
        let dir = f.dir.path().join(name);
        std::fs::create_dir(&dir).unwrap();
        original.save(&dir.join("store.json")).unwrap();
        let config = service_config(&dir, engine_config(15));
        let engine =
            Arc::new(engine_from_config(&config, Arc::new(ManualClock::new(START_MS))).unwrap());
        (dir, engine)
    };

    let (dir_a, a) = fresh("a");
    let straight = run(&a, &dir_a.join("outbox.log"), &sessions);
    let (dir_b, b) = fresh("b");
    assert_eq!(run(&b, &dir_b.join("outbox.log"), &sessions), straight);

    // restart halfway through from the persisted store
    let (dir_c, c) = fresh("c");
    let mut split = run(&c, &dir_c.join("outbox.log"), &sessions[..4]);
    drop(c);
    let config = service_config(&dir_c, engine_config(15));
    let d = Arc::new(engine_from_config(&config, Arc::new(ManualClock::new(START_MS))).unwrap());
    split.extend(run(&d, &dir_c.join("outbox.log"), &sessions[4..]));
    assert_eq!(split, straight);
    assert_eq!(
        ProfileStore::load(&dir_c.join("store.json")).unwrap(),
        b.snapshot()
    );
}

#[test]
fn concurrent_users_keep_their_own_order() {
    let f = Fixture::trained(16);
    let mut rng = ChaCha8Rng::seed_from_u64(160);
    let dave = harness::training_sessions(&TypistModel::fast(), "dave", "Pa55word!", 12, &mut rng)
        .unwrap();
    f.engine.enroll("dave", "Pa55word!", &dave, None).unwrap();

    let jobs: Vec<(String, &str, &str, TypistModel, u64)> = (0..8u64)
        .map(|i| {
            let (user, pw, model) = if i % 2 == 0 {
                (USER, PASSWORD, TypistModel::moderate())
            } else {
                ("dave", "Pa55word!", TypistModel::fast())
            };
            (f.server.base_url(), user, pw, model, i)
        })
        .collect();
    std::thread::scope(|scope| {
        for (base, user, pw, model, i) in &jobs {
            scope.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
                let http = Client::new();
                for _ in 0..3 {
                    let s = harness::simulate_session(model, user, pw, &mut rng).unwrap();
                    let resp = http
                        .post(format!("{base}/v1/login/attempt"))
                        .json(&s)
                        .send()
                        .unwrap();
                    assert!(matches!(resp.status().as_u16(), 200 | 202));
                }
            });
        }
    });

    let records = f.engine.records();
    assert_eq!(records.len(), 24);
    let store = f.engine.snapshot();
    for (user, trained) in [(USER, 20), ("dave", 12)] {
        let granted = records
            .iter()
            .filter(|r| r.username == user && r.challenge_id.is_none())
            .count();
        let profile = store.get(user).unwrap();
        assert_eq!(profile.raw_history.len(), trained + granted);
        assert!(profile.ranges_cover_history());
        assert!(profile
            .raw_history
            .windows(2)
            .all(|w| w[0].timestamp_ms <= w[1].timestamp_ms));
    }
    // the persisted file matches memory
    assert_eq!(
        ProfileStore::load(&f.dir.path().join("store.json")).unwrap(),
        store
    );
}
