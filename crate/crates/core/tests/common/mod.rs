#![allow(dead_code)]

use keydyn::anomaly::OutlierDegree;
use keydyn::engine::Engine;
use keydyn::harness::{self, TypistModel};
use keydyn::session::{
    Dimension, FeatureVector, LoginSession, NormalizationRanges, SessionContext,
};
use keydyn::store::{HashParams, HistoryEntry, PasswordCredential, ProfileStore, UserProfile};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A session by a variant of `owner` that the engine currently assesses at
/// `degree`. Timing is stretched step by step until the degree matches.
pub fn session_with_degree(
    engine: &Engine,
    owner: &TypistModel,
    user: &str,
    password: &str,
    degree: OutlierDegree,
    rng: &mut ChaCha8Rng,
) -> Option<LoginSession> {
    for step in 0..400 {
        let scale = match degree {
            OutlierDegree::Normal => 1.0,
            _ => 1.0 + 0.01 * (step % 200) as f64,
        };
        let model = TypistModel {
            flight_mean: owner.flight_mean * scale,
            ..owner.clone()
        };
        let s = harness::simulate_session(&model, user, password, rng).ok()?;
        if engine.dry_assess(&s).ok()?.degree == degree {
            return Some(s);
        }
    }
    None
}

/// A string of the same length that differs from `s`.
pub fn differ(s: &str) -> String {
    let mut c: Vec<char> = s.chars().collect();
    if let Some(last) = c.last_mut() {
        *last = if *last == '0' { '1' } else { '0' };
    }
    c.into_iter().collect()
}

fn text(rng: &mut ChaCha8Rng) -> String {
    let alphabet = ['a', 'Z', '7', ' ', 'é', '"', '\\', 'λ', '😀', '-'];
    (0..rng.random_range(0..8))
        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
        .collect()
}

fn value(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(0.0..1.0),
        1 => rng.random_range(-1e6..1e6),
        2 => rng.random::<f64>() * 10f64.powi(rng.random_range(-300..300)),
        _ => rng.random_range(0..20) as f64,
    }
}

/// A store with random users, histories and credentials.
pub fn random_store(rng: &mut ChaCha8Rng) -> ProfileStore {
    let mut store = ProfileStore::new();
    for u in 0..rng.random_range(0..4) {
        let mut dims = Dimension::BASE.to_vec();
        if rng.random_bool(0.3) {
            dims.push(Dimension::PressureMean);
        }
        let history: Vec<HistoryEntry> = (0..rng.random_range(0..12))
            .map(|i| HistoryEntry {
                timestamp_ms: i * 1000 + rng.random_range(0..1000),
                features: FeatureVector::from_pairs(dims.iter().map(|&d| (d, value(rng)))),
            })
            .collect();
        let ranges =
            NormalizationRanges::fit(history.iter().map(|h| &h.features)).expect("same dims");
        let username = format!("user{u}{}", text(rng));
        let profile = UserProfile {
            username: username.clone(),
            credential: PasswordCredential::create(&text(rng), HashParams::light(), rng)
                .expect("hash"),
            enrolled_context: SessionContext {
                geo: text(rng),
                timezone: text(rng),
                device_id: text(rng),
            },
            raw_history: history,
            ranges,
            seed: rng.random(),
            created_ms: rng.random_range(0..i64::MAX / 2),
            updated_ms: rng.random_range(0..i64::MAX / 2),
        };
        store.insert(profile).expect("unique names");
    }
    store
}
