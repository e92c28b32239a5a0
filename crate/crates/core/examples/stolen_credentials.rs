//! Train a profile, then replay its legitimate owner and ten imposters who
//! know the password but type differently.
//!
//!     cargo run --example stolen_credentials -- [seed]

use std::sync::Arc;

use keydyn::engine::{Engine, EngineConfig, ManualClock};
use keydyn::harness::{self, InProcessTarget, TypistModel};
use keydyn::mfa::MemoryOutbox;
use keydyn::store::{HashParams, ProfileStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(7);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (user, password) = ("alice", "Correct-Horse7");
    let owner = TypistModel::moderate();

    let outbox = MemoryOutbox::new();
    let config = EngineConfig {
        seed: Some(seed),
        hash_params: HashParams::light(),
        ..Default::default()
    };
    let engine = Arc::new(Engine::new(
        ProfileStore::new(),
        config,
        Arc::new(outbox.clone()),
        Arc::new(ManualClock::new(1_700_000_000_000)),
    ));

    let training = harness::training_sessions(&owner, user, password, 20, &mut rng)?;
    engine.enroll(user, password, &training, None)?;
    let summary = engine.cluster_export(user)?;
    println!(
        "trained {user} on {} sessions, elbow k = {}",
        training.len(),
        summary.k
    );

    let imposters = harness::imposter_models(&owner, 10, 3.0, seed);
    let scenario =
        harness::stolen_credential_scenario(&owner, &imposters, user, password, 10, &mut rng)?;
    let mut target = InProcessTarget { engine, outbox };
    let (report, logs) = harness::replay(&mut target, &scenario)?;
    for log in &logs {
        println!(
            "#{:<2} {:<8} degree={:<13} challenge={:<4} granted={}",
            log.index,
            format!("{:?}", log.truth).to_lowercase(),
            log.degree.map(|d| format!("{d:?}")).unwrap_or_default(),
            log.challenge.map(|c| c.as_str()).unwrap_or("-"),
            log.granted
        );
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
