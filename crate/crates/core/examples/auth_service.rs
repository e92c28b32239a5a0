//! Start the HTTP service on a free port, enroll over HTTP, and log in as
//! the owner and as someone holding the stolen password.
//!
//!     cargo run --example auth_service

use std::sync::Arc;

use keydyn::engine::{Engine, EngineConfig, SystemClock};
use keydyn::harness::{self, TypistModel};
use keydyn::mfa::OutboxLog;
use keydyn::service::BackgroundServer;
use keydyn::store::{HashParams, ProfileStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let outbox = dir.path().join("outbox.log");
    let config = EngineConfig {
        seed: Some(1),
        hash_params: HashParams::light(),
        ..Default::default()
    };
    let engine = Engine::new(
        ProfileStore::new(),
        config,
        Arc::new(OutboxLog::new(&outbox)),
        Arc::new(SystemClock),
    )
    .with_store_path(dir.path().join("store.json"));
    let server = BackgroundServer::start(Arc::new(engine), 0)?;
    let url = server.base_url();
    let http = reqwest::blocking::Client::new();
    println!("service at {url}");

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let owner = TypistModel::moderate();
    let sessions = harness::training_sessions(&owner, "erin", "Tiger-Lily9", 20, &mut rng)?;
    let r = http
        .post(format!("{url}/v1/enroll"))
        .json(&json!({ "username": "erin", "password": "Tiger-Lily9", "sessions": sessions }))
        .send()?;
    println!("enroll -> {} {}", r.status(), r.text()?);

    let r = http
        .post(format!("{url}/v1/login/username"))
        .json(&json!({ "username": "erin" }))
        .send()?;
    println!("username step -> {}", r.text()?);

    let own = harness::simulate_session(&owner, "erin", "Tiger-Lily9", &mut rng)?;
    let r = http
        .post(format!("{url}/v1/login/attempt"))
        .json(&own)
        .send()?;
    println!("owner -> {} {}", r.status(), r.text()?);

    let thief = TypistModel {
        dwell_mean: 160.0,
        flight_mean: 260.0,
        ..owner.clone()
    };
    let stolen = harness::simulate_session(&thief, "erin", "Tiger-Lily9", &mut rng)?;
    let r = http
        .post(format!("{url}/v1/login/attempt?explain=true"))
        .json(&stolen)
        .send()?;
    let status = r.status();
    let body: serde_json::Value = r.json()?;
    println!(
        "thief -> {status} outcome={} risk={} challenge={}",
        body["outcome"], body["risk"], body["challenge"]
    );
    if let Some(id) = body["challenge"]["id"].as_str() {
        let kind = body["challenge"]["kind"].as_str().unwrap_or("oob");
        let field = if kind == "otp" { "code" } else { "token" };
        let r = http
            .post(format!("{url}/v1/challenge/{id}/{kind}"))
            .json(&json!({ field: "0000" }))
            .send()?;
        println!("thief guesses -> {} {}", r.status(), r.text()?);
    }

    let r = http
        .get(format!("{url}/v1/admin/users/erin/clusters"))
        .send()?;
    let clusters: serde_json::Value = r.json()?;
    println!(
        "clusters: k={} over {} points",
        clusters["k"],
        clusters["points"].as_array().map_or(0, |p| p.len())
    );
    Ok(())
}
