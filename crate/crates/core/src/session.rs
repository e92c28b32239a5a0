//! Login-session telemetry: key events, typed-text reconstruction and
//! feature extraction.
//!
//! A [`LoginSession`] carries the raw key-down/key-up stream captured while a
//! user types a username and a password, plus the context the client
//! declared. [`extract_features`] turns it into a raw [`FeatureVector`];
//! [`normalize`] maps that onto the unit cube using a profile's
//! [`NormalizationRanges`]; [`normalize_attempt`] applies the same map to an
//! attempt without clamping.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error("malformed session document: {0}")]
    Malformed(String),
    #[error("unsorted timestamps at event {index}")]
    Unsorted { index: usize },
    #[error("orphan key-up for {key} at event {index}")]
    OrphanKeyUp { key: String, index: usize },
    #[error("invalid field span {field}: {reason}")]
    InvalidSpan { field: &'static str, reason: String },
    #[error("overlapping field spans")]
    OverlappingSpans,
    #[error("pressure must have one value in [0,1] per event")]
    InvalidPressure,
    #[error("unknown key identifier {0:?}")]
    UnknownKey(String),
    #[error("insufficient telemetry: {0}")]
    InsufficientTelemetry(&'static str),
    #[error("dimension {0} missing from normalization ranges")]
    MissingDimension(Dimension),
    #[error("dimension mismatch between feature vector and ranges")]
    DimensionMismatch,
}

/// Symbolic key identifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Key {
    Char(char),
    LShift,
    RShift,
    CapsLock,
    Backspace,
    Delete,
    Enter,
    /// A named key this crate does not interpret (kept so parsing is lossless).
    Other(String),
}

impl Key {
    pub fn parse(id: &str) -> Key {
        let mut chars = id.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            return Key::Char(c);
        }
        match id {
            "LShift" => Key::LShift,
            "RShift" => Key::RShift,
            "CapsLock" => Key::CapsLock,
            "Backspace" => Key::Backspace,
            "Delete" => Key::Delete,
            "Enter" => Key::Enter,
            other => Key::Other(other.to_string()),
        }
    }

    /// Keys that produce a character.
    pub fn is_printable(&self) -> bool {
        matches!(self, Key::Char(c) if !c.is_control())
    }

    pub fn is_shift(&self) -> bool {
        matches!(self, Key::LShift | Key::RShift)
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Key::Char(c) => write!(f, "{c}"),
            Key::LShift => f.write_str("LShift"),
            Key::RShift => f.write_str("RShift"),
            Key::CapsLock => f.write_str("CapsLock"),
            Key::Backspace => f.write_str("Backspace"),
            Key::Delete => f.write_str("Delete"),
            Key::Enter => f.write_str("Enter"),
            Key::Other(s) => f.write_str(s),
        }
    }
}

impl Serialize for Key {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Key {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.is_empty() {
            return Err(serde::de::Error::custom("empty key identifier"));
        }
        Ok(Key::parse(&s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyAction {
    Down,
    Up,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyEvent {
    pub key: Key,
    pub action: KeyAction,
    /// Milliseconds, monotonic within a session.
    pub t: f64,
}

impl KeyEvent {
    pub fn down(key: Key, t: f64) -> Self {
        Self {
            key,
            action: KeyAction::Down,
            t,
        }
    }

    pub fn up(key: Key, t: f64) -> Self {
        Self {
            key,
            action: KeyAction::Up,
            t,
        }
    }
}

/// Client-declared login context.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionContext {
    pub geo: String,
    pub timezone: String,
    pub device_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    Username,
    Password,
}

impl Field {
    fn name(self) -> &'static str {
        match self {
            Field::Username => "username",
            Field::Password => "password",
        }
    }
}

/// Inclusive event-index range `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FieldSpan {
    pub start: usize,
    pub end: usize,
}

impl FieldSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, index: usize) -> bool {
        (self.start..=self.end).contains(&index)
    }
}

impl Serialize for FieldSpan {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.start, self.end].serialize(s)
    }
}

impl<'de> Deserialize<'de> for FieldSpan {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [start, end] = <[usize; 2]>::deserialize(d)?;
        Ok(FieldSpan { start, end })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpans {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub username: Option<FieldSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub password: Option<FieldSpan>,
}

impl FieldSpans {
    pub fn get(&self, field: Field) -> Option<FieldSpan> {
        match field {
            Field::Username => self.username,
            Field::Password => self.password,
        }
    }
}

/// One login attempt's telemetry. Construct through [`parse_session`] or
/// [`LoginSession::new`] so the event invariants are checked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoginSession {
    pub username_claim: String,
    #[serde(default)]
    pub context: SessionContext,
    pub fields: FieldSpans,
    pub events: Vec<KeyEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pressure: Option<Vec<f64>>,
}

impl LoginSession {
    pub fn new(
        username_claim: impl Into<String>,
        context: SessionContext,
        fields: FieldSpans,
        events: Vec<KeyEvent>,
        pressure: Option<Vec<f64>>,
    ) -> Result<Self, SessionError> {
        let session = Self {
            username_claim: username_claim.into(),
            context,
            fields,
            events,
            pressure,
        };
        session.validate()?;
        Ok(session)
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let mut prev = f64::NEG_INFINITY;
        let mut held: HashMap<&Key, usize> = HashMap::new();
        for (index, ev) in self.events.iter().enumerate() {
            if !ev.t.is_finite() || ev.t < 0.0 {
                return Err(SessionError::Malformed(format!(
                    "event {index} has invalid timestamp {}",
                    ev.t
                )));
            }
            if ev.t < prev {
                return Err(SessionError::Unsorted { index });
            }
            prev = ev.t;
            match ev.action {
                KeyAction::Down => *held.entry(&ev.key).or_default() += 1,
                KeyAction::Up => match held.get_mut(&ev.key) {
                    Some(n) if *n > 0 => *n -= 1,
                    _ => {
                        return Err(SessionError::OrphanKeyUp {
                            key: ev.key.to_string(),
                            index,
                        })
                    }
                },
            }
        }

        let n = self.events.len();
        for field in [Field::Username, Field::Password] {
            if let Some(span) = self.fields.get(field) {
                if span.start > span.end || span.end >= n {
                    return Err(SessionError::InvalidSpan {
                        field: field.name(),
                        reason: format!("[{}, {}] with {n} events", span.start, span.end),
                    });
                }
            }
        }
        if let (Some(u), Some(p)) = (self.fields.username, self.fields.password) {
            if u.end >= p.start {
                return Err(SessionError::OverlappingSpans);
            }
        }

        if let Some(pressure) = &self.pressure {
            if pressure.len() != n || pressure.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(SessionError::InvalidPressure);
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("session serialization is infallible")
    }

    /// Indices of events inside the given field's span.
    fn span_indices(&self, field: Field) -> std::ops::Range<usize> {
        match self.fields.get(field) {
            Some(span) => span.start..span.end + 1,
            None => 0..0,
        }
    }

    /// First and last event index across both spans.
    fn overall_span(&self) -> Option<(usize, usize)> {
        let spans = [self.fields.username, self.fields.password];
        let start = spans.iter().flatten().map(|s| s.start).min()?;
        let end = spans.iter().flatten().map(|s| s.end).max()?;
        Some((start, end))
    }
}

/// Decodes and validates a session document (UTF-8 JSON).
pub fn parse_session(bytes: &[u8]) -> Result<LoginSession, SessionError> {
    let session: LoginSession =
        serde_json::from_slice(bytes).map_err(|e| SessionError::Malformed(e.to_string()))?;
    session.validate()?;
    Ok(session)
}

/// Replays the key stream and returns the final text of `field`.
///
/// Printable keys are taken as the unmodified key: a lowercase letter is
/// uppercased while exactly one of (a Shift key is held, CapsLock is on)
/// holds; every other character is used verbatim. Modifier state carries over
/// from events before the span. Backspace removes the last character; Delete
/// is a no-op since the cursor is always at the end; Enter is ignored.
pub fn reconstruct_text(session: &LoginSession, field: Field) -> Result<String, SessionError> {
    let range = session.span_indices(field);
    if range.is_empty() {
        return Ok(String::new());
    }
    let mut shifts_held = 0usize;
    let mut caps = false;
    let mut text = String::new();
    for (index, ev) in session.events[..range.end].iter().enumerate() {
        let in_span = range.contains(&index);
        match (&ev.key, ev.action) {
            (Key::LShift | Key::RShift, KeyAction::Down) => shifts_held += 1,
            (Key::LShift | Key::RShift, KeyAction::Up) => {
                shifts_held = shifts_held.saturating_sub(1)
            }
            (Key::CapsLock, KeyAction::Down) => caps = !caps,
            (Key::Other(name), _) if in_span => return Err(SessionError::UnknownKey(name.clone())),
            (Key::Char(c), KeyAction::Down) if in_span => {
                if c.is_control() {
                    return Err(SessionError::UnknownKey(c.to_string()));
                }
                if c.is_lowercase() && ((shifts_held > 0) != caps) {
                    text.extend(c.to_uppercase());
                } else {
                    text.push(*c);
                }
            }
            (Key::Backspace, KeyAction::Down) if in_span => {
                text.pop();
            }
            _ => {}
        }
    }
    Ok(text)
}

/// Clustered feature dimensions, in their fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    TypingRate,
    SessionTime,
    MeanDwell,
    MeanFlight,
    ShiftLeftCount,
    ShiftRightCount,
    CapslockCount,
    BackspaceCount,
    DeleteCount,
    GeoMismatch,
    PressureMean,
}

impl Dimension {
    /// Dimensions every vector carries; `PressureMean` is appended only when
    /// the client supplied pressure.
    pub const BASE: [Dimension; 10] = [
        Dimension::TypingRate,
        Dimension::SessionTime,
        Dimension::MeanDwell,
        Dimension::MeanFlight,
        Dimension::ShiftLeftCount,
        Dimension::ShiftRightCount,
        Dimension::CapslockCount,
        Dimension::BackspaceCount,
        Dimension::DeleteCount,
        Dimension::GeoMismatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::TypingRate => "typing_rate",
            Dimension::SessionTime => "session_time",
            Dimension::MeanDwell => "mean_dwell",
            Dimension::MeanFlight => "mean_flight",
            Dimension::ShiftLeftCount => "shift_left_count",
            Dimension::ShiftRightCount => "shift_right_count",
            Dimension::CapslockCount => "capslock_count",
            Dimension::BackspaceCount => "backspace_count",
            Dimension::DeleteCount => "delete_count",
            Dimension::GeoMismatch => "geo_mismatch",
            Dimension::PressureMean => "pressure_mean",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named feature values. Iteration follows [`Dimension`] order, so the
/// numeric point of two vectors with the same dimension set lines up.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector {
    values: BTreeMap<Dimension, f64>,
}

impl FeatureVector {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Dimension, f64)>) -> Self {
        Self {
            values: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, dim: Dimension) -> Option<f64> {
        self.values.get(&dim).copied()
    }

    pub fn set(&mut self, dim: Dimension, value: f64) {
        self.values.insert(dim, value);
    }

    pub fn dimensions(&self) -> Vec<Dimension> {
        self.values.keys().copied().collect()
    }

    pub fn has_pressure(&self) -> bool {
        self.values.contains_key(&Dimension::PressureMean)
    }

    /// Values in dimension order.
    pub fn point(&self) -> Vec<f64> {
        self.values.values().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Dimension, f64)> + '_ {
        self.values.iter().map(|(d, v)| (*d, *v))
    }

    /// Restricts the vector to `dims`, failing if any is absent.
    pub fn project(&self, dims: &[Dimension]) -> Result<FeatureVector, SessionError> {
        dims.iter()
            .map(|d| {
                self.get(*d)
                    .map(|v| (*d, v))
                    .ok_or(SessionError::MissingDimension(*d))
            })
            .collect::<Result<BTreeMap<_, _>, _>>()
            .map(|values| FeatureVector { values })
    }
}

/// Sets `geo_mismatch` to 1 when the session's declared geo differs from the
/// enrolled one. Only geo is compared; timezone and device are informational.
pub fn apply_context(fv: &mut FeatureVector, session: &SessionContext, enrolled: &SessionContext) {
    let mismatch = session.geo.trim() != enrolled.geo.trim();
    fv.set(Dimension::GeoMismatch, if mismatch { 1.0 } else { 0.0 });
}

/// Extracts the raw (unnormalized) feature vector.
///
/// Dwell, flight and typing rate come from printable keys pressed inside the
/// password span. Modifier and correction counts and the session time cover
/// both spans. `geo_mismatch` is left at 0; see [`apply_context`].
pub fn extract_features(session: &LoginSession) -> Result<FeatureVector, SessionError> {
    let password = session.span_indices(Field::Password);
    if password.is_empty() {
        return Err(SessionError::InsufficientTelemetry("no password span"));
    }
    let ups = match_key_ups(&session.events);

    // (down index, up index) for every printable key pressed in the password span.
    let mut strokes = Vec::new();
    for i in password.clone() {
        let ev = &session.events[i];
        if ev.action == KeyAction::Down && ev.key.is_printable() {
            match ups[i] {
                Some(j) => strokes.push((i, j)),
                None => {
                    return Err(SessionError::InsufficientTelemetry(
                        "key-down without key-up",
                    ))
                }
            }
        }
    }
    if strokes.is_empty() {
        return Err(SessionError::InsufficientTelemetry("no complete key pair"));
    }

    let t = |i: usize| session.events[i].t;
    let mean_dwell = strokes.iter().map(|&(d, u)| t(u) - t(d)).sum::<f64>() / strokes.len() as f64;
    let mean_flight = if strokes.len() > 1 {
        strokes
            .windows(2)
            .map(|w| t(w[1].0) - t(w[0].1))
            .sum::<f64>()
            / (strokes.len() - 1) as f64
    } else {
        0.0
    };

    let (first, last) = session.overall_span().expect("password span exists");
    let session_time = t(last) - t(first);
    if session_time <= 0.0 {
        return Err(SessionError::InsufficientTelemetry("zero-length session"));
    }
    let typing_rate = strokes.len() as f64 / (session_time / 1000.0);

    let mut counts: HashMap<Dimension, f64> = HashMap::new();
    let covered = |i: usize| {
        session.fields.username.is_some_and(|s| s.contains(i))
            || session.fields.password.is_some_and(|s| s.contains(i))
    };
    for (i, ev) in session.events.iter().enumerate() {
        if ev.action != KeyAction::Down || !covered(i) {
            continue;
        }
        let dim = match ev.key {
            Key::LShift => Dimension::ShiftLeftCount,
            Key::RShift => Dimension::ShiftRightCount,
            Key::CapsLock => Dimension::CapslockCount,
            Key::Backspace => Dimension::BackspaceCount,
            Key::Delete => Dimension::DeleteCount,
            _ => continue,
        };
        *counts.entry(dim).or_default() += 1.0;
    }

    let mut fv = FeatureVector::from_pairs([
        (Dimension::TypingRate, typing_rate),
        (Dimension::SessionTime, session_time),
        (Dimension::MeanDwell, mean_dwell),
        (Dimension::MeanFlight, mean_flight),
        (Dimension::GeoMismatch, 0.0),
    ]);
    for dim in [
        Dimension::ShiftLeftCount,
        Dimension::ShiftRightCount,
        Dimension::CapslockCount,
        Dimension::BackspaceCount,
        Dimension::DeleteCount,
    ] {
        fv.set(dim, counts.get(&dim).copied().unwrap_or(0.0));
    }

    if let Some(pressure) = &session.pressure {
        let p: Vec<f64> = strokes.iter().map(|&(d, _)| pressure[d]).collect();
        fv.set(
            Dimension::PressureMean,
            p.iter().sum::<f64>() / p.len() as f64,
        );
    }
    Ok(fv)
}

/// For each Down index, the index of the Up that releases it (FIFO per key).
fn match_key_ups(events: &[KeyEvent]) -> Vec<Option<usize>> {
    let mut pending: HashMap<&Key, VecDeque<usize>> = HashMap::new();
    let mut ups = vec![None; events.len()];
    for (i, ev) in events.iter().enumerate() {
        match ev.action {
            KeyAction::Down => pending.entry(&ev.key).or_default().push_back(i),
            KeyAction::Up => {
                if let Some(d) = pending.get_mut(&ev.key).and_then(VecDeque::pop_front) {
                    ups[d] = Some(i);
                }
            }
        }
    }
    ups
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

/// Per-dimension `(min, max)` observed over a training history.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizationRanges {
    ranges: BTreeMap<Dimension, Range>,
}

impl NormalizationRanges {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, dim: Dimension) -> Option<Range> {
        self.ranges.get(&dim).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn dimensions(&self) -> Vec<Dimension> {
        self.ranges.keys().copied().collect()
    }

    pub fn covers(&self, fv: &FeatureVector) -> bool {
        fv.iter()
            .all(|(d, v)| self.get(d).is_some_and(|r| r.min <= v && v <= r.max))
    }

    /// Builds ranges spanning every vector in `history`.
    pub fn fit<'a>(
        history: impl IntoIterator<Item = &'a FeatureVector>,
    ) -> Result<Self, SessionError> {
        history
            .into_iter()
            .try_fold(Self::new(), |r, fv| update_ranges(&r, fv))
    }
}

/// Min-max scales `fv` into `[0, 1]`, clamping values outside the range.
/// A degenerate range (`min == max`) maps every value to 0.5.
pub fn normalize(
    fv: &FeatureVector,
    ranges: &NormalizationRanges,
) -> Result<FeatureVector, SessionError> {
    scale(fv, ranges, |x, r| {
        let width = r.max - r.min;
        if width > 0.0 {
            ((x - r.min) / width).clamp(0.0, 1.0)
        } else {
            0.5
        }
    })
}

/// Scales an attempt with the same min-max map as the history but without
/// clamping, so distance beyond the training range is kept. On a degenerate
/// range a value equal to the bound maps to 0.5 and values below or above it
/// map to 0 or 1, so a dimension that never varied in training still
/// registers when an attempt departs from it.
///
/// Vectors inside their ranges scale exactly as with [`normalize`].
pub fn normalize_attempt(
    fv: &FeatureVector,
    ranges: &NormalizationRanges,
) -> Result<FeatureVector, SessionError> {
    scale(fv, ranges, |x, r| {
        let width = r.max - r.min;
        if width > 0.0 {
            (x - r.min) / width
        } else if x > r.max {
            1.0
        } else if x < r.min {
            0.0
        } else {
            0.5
        }
    })
}

fn scale(
    fv: &FeatureVector,
    ranges: &NormalizationRanges,
    map: impl Fn(f64, Range) -> f64,
) -> Result<FeatureVector, SessionError> {
    let mut out = FeatureVector::default();
    for (dim, x) in fv.iter() {
        let r = ranges.get(dim).ok_or(SessionError::MissingDimension(dim))?;
        out.set(dim, map(x, r));
    }
    Ok(out)
}

/// Widens each range to include `fv`. Empty ranges initialise to `(x, x)`.
pub fn update_ranges(
    ranges: &NormalizationRanges,
    fv: &FeatureVector,
) -> Result<NormalizationRanges, SessionError> {
    if ranges.is_empty() {
        return Ok(NormalizationRanges {
            ranges: fv
                .iter()
                .map(|(d, x)| (d, Range { min: x, max: x }))
                .collect(),
        });
    }
    if ranges.dimensions() != fv.dimensions() {
        return Err(SessionError::DimensionMismatch);
    }
    let mut next = ranges.clone();
    for (dim, x) in fv.iter() {
        let r = next.ranges.get_mut(&dim).expect("dimensions checked");
        r.min = r.min.min(x);
        r.max = r.max.max(x);
    }
    Ok(next)
}
