//! Reconstruct the typed password from raw key events and extract the
//! feature vector, then scale it against a small training range.
//!
//!     cargo run --example feature_extraction

use keydyn::session::{
    self, extract_features, reconstruct_text, Field, FieldSpan, FieldSpans, Key, KeyEvent,
    LoginSession, NormalizationRanges,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // "aB" with a slip: 'x' typed and removed, then Shift held for 'b'.
    let events = vec![
        KeyEvent::down(Key::Char('a'), 0.0),
        KeyEvent::up(Key::Char('a'), 80.0),
        KeyEvent::down(Key::Char('x'), 150.0),
        KeyEvent::up(Key::Char('x'), 230.0),
        KeyEvent::down(Key::Backspace, 300.0),
        KeyEvent::up(Key::Backspace, 360.0),
        KeyEvent::down(Key::LShift, 420.0),
        KeyEvent::down(Key::Char('b'), 470.0),
        KeyEvent::up(Key::Char('b'), 560.0),
        KeyEvent::up(Key::LShift, 590.0),
    ];
    let fields = FieldSpans {
        username: None,
        password: Some(FieldSpan::new(0, events.len() - 1)),
    };
    let attempt = LoginSession::new("alice", Default::default(), fields, events, None)?;

    println!(
        "typed password: {:?}",
        reconstruct_text(&attempt, Field::Password)?
    );
    let raw = extract_features(&attempt)?;
    for (dim, value) in raw.iter() {
        println!("  {:<18} {value:.3}", dim.name());
    }

    // Ranges from two earlier sessions; the attempt is scaled against them.
    let mut slower = raw.clone();
    slower.set(session::Dimension::MeanDwell, 120.0);
    let ranges = NormalizationRanges::fit([&raw, &slower])?;
    let scaled = session::normalize(&raw, &ranges)?;
    println!("normalized: {:?}", scaled.point());
    println!("session document:\n{}", attempt.to_json());
    Ok(())
}
