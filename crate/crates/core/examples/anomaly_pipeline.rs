//! Run the global, contextual and local checks on three attempts against
//! one history: close, near the edge, and far away.
//!
//!     cargo run --example anomaly_pipeline

use keydyn::anomaly::{self, AnomalyConfig};
use keydyn::mfa;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let history: Vec<Vec<f64>> = (0..20)
        .map(|_| {
            vec![
                0.5 + rng.random_range(-0.1..0.1),
                0.5 + rng.random_range(-0.1..0.1),
            ]
        })
        .collect();
    let config = AnomalyConfig::default();

    for (label, attempt) in [
        ("close", vec![0.52, 0.48]),
        ("edge", vec![0.5, 0.66]),
        ("far", vec![3.0, 3.0]),
    ] {
        let a = anomaly::assess(&history, &attempt, 99, &config)?;
        println!(
            "{label:>5}: global_pass={} distance={:.3} thresholds={:?} degree={:?} -> {:?}",
            a.global_pass,
            a.distance,
            a.thresholds.map(|t| (t.t1, t.t2)),
            a.degree,
            mfa::decide(&a)
        );
    }

    let a = anomaly::assess(&history, &[0.5, 0.66], 99, &config)?;
    println!(
        "explain log:\n{}",
        serde_json::to_string_pretty(&a.explain)?
    );
    Ok(())
}
