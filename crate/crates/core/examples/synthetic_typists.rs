//! Simulate the preset typists and show how their features differ.
//!
//!     cargo run --example synthetic_typists

use keydyn::harness::{self, ShiftStyle, TypistModel};
use keydyn::session::{extract_features, reconstruct_text, Dimension, Field};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let caps = TypistModel {
        shift_style: ShiftStyle::CapsLock,
        ..TypistModel::moderate()
    };
    for (name, model) in [
        ("fast", TypistModel::fast()),
        ("moderate", TypistModel::moderate()),
        ("slow", TypistModel::slow()),
        ("capslock", caps),
    ] {
        let s = harness::simulate_session(&model, "dave", "Blue-Sky42", &mut rng)?;
        let fv = extract_features(&s)?;
        println!(
            "{name:>9}: typed {:?}, {} events, dwell {:.0} ms, flight {:.0} ms, {:.2} keys/s, shift L/R {}/{}, caps {}, backspace {}",
            reconstruct_text(&s, Field::Password)?,
            s.events.len(),
            fv.get(Dimension::MeanDwell).unwrap_or_default(),
            fv.get(Dimension::MeanFlight).unwrap_or_default(),
            fv.get(Dimension::TypingRate).unwrap_or_default(),
            fv.get(Dimension::ShiftLeftCount).unwrap_or_default(),
            fv.get(Dimension::ShiftRightCount).unwrap_or_default(),
            fv.get(Dimension::CapslockCount).unwrap_or_default(),
            fv.get(Dimension::BackspaceCount).unwrap_or_default(),
        );
    }
    for m in harness::imposter_models(&TypistModel::moderate(), 5, 3.0, 1) {
        println!(
            "imposter: dwell {:.0}, flight {:.0}, {:?}",
            m.dwell_mean, m.flight_mean, m.shift_style
        );
    }
    Ok(())
}
