//! Issue OTP and out-of-band challenges, read them from the outbox and
//! answer them, including a wrong code and an expiry.
//!
//!     cargo run --example mfa_challenges

use std::sync::Arc;

use keydyn::mfa::{ChallengeKind, MemoryOutbox, MfaEngine};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let outbox = MemoryOutbox::new();
    let mfa = MfaEngine::new(
        Arc::new(outbox.clone()),
        Some(1),
        300_000,
        "http://127.0.0.1:8807",
    );

    let otp = mfa.issue(ChallengeKind::Otp, "alice", 1_000);
    let code = outbox.last().expect("delivered").payload;
    println!("otp {} delivered: {}", otp.id, outbox.last().unwrap());
    let (outcome, _) = mfa.respond(&otp.id, ChallengeKind::Otp, "000000", 2_000)?;
    println!("  wrong code -> {outcome:?}");
    let (outcome, _) = mfa.respond(&otp.id, ChallengeKind::Otp, &code, 3_000)?;
    println!("  right code -> {outcome:?}");
    println!(
        "  answering again -> {:?}",
        mfa.respond(&otp.id, ChallengeKind::Otp, &code, 4_000).err()
    );

    let oob = mfa.issue(ChallengeKind::Oob, "alice", 10_000);
    let entry = outbox.last().expect("delivered");
    println!("oob link: {}", entry.payload);
    let (outcome, _) = mfa.respond(&oob.id, ChallengeKind::Oob, entry.secret(), 20_000)?;
    println!("  approve -> {outcome:?}");

    let late = mfa.issue(ChallengeKind::Otp, "alice", 0);
    let code = outbox.last().unwrap().payload;
    let (outcome, _) = mfa.respond(&late.id, ChallengeKind::Otp, &code, 300_001)?;
    println!("late answer -> {outcome:?}");
    Ok(())
}
