//! Enroll a profile, learn from a successful login, and round-trip the
//! store through its JSON file.
//!
//!     cargo run --example profile_store

use keydyn::harness::{self, TypistModel};
use keydyn::store::{self, AttemptOutcome, Enrollment, HashParams, ProfileStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let typist = TypistModel::fast();
    let sessions = harness::training_sessions(&typist, "bob", "s3cret-Pass", 12, &mut rng)?;

    let mut profile = store::enroll(
        Enrollment {
            username: "bob",
            password: "s3cret-Pass",
            sessions: &sessions,
            context: None,
            min_history: 10,
            hash_params: HashParams::light(),
            seed: 1234,
            now_ms: 0,
        },
        &mut rng,
    )?;
    println!("enrolled bob with {} sessions", profile.raw_history.len());
    println!(
        "password check: right={} wrong={}",
        profile.verify_password("s3cret-Pass"),
        profile.verify_password("guess")
    );

    let next = harness::simulate_session(&typist, "bob", "s3cret-Pass", &mut rng)?;
    let raw = profile.attempt_features(&next)?;
    profile.append_success(raw, 60_000, AttemptOutcome::Granted)?;
    println!(
        "after a granted login: {} sessions, ranges cover history: {}",
        profile.raw_history.len(),
        profile.ranges_cover_history()
    );

    let mut db = ProfileStore::new();
    db.insert(profile)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("store.json");
    db.save(&path)?;
    let loaded = ProfileStore::load(&path)?;
    println!("reloaded store equal: {}", loaded == db);

    std::fs::write(&path, &std::fs::read(&path)?[..200])?;
    println!("truncated file: {}", ProfileStore::load(&path).unwrap_err());
    Ok(())
}
