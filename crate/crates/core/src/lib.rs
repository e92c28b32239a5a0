//! Keystroke-dynamics risk scoring with step-up authentication.
//!
//! A login session's key events become a feature vector, the vector is
//! checked against the user's clustered history, and the resulting outlier
//! degree picks between granting, a one-time code, or out-of-band approval.

pub mod anomaly;
pub mod clustering;
pub mod engine;
pub mod harness;
pub mod mfa;
pub mod service;
pub mod session;
pub mod store;

pub use anomaly::{assess, AnomalyConfig, OutlierDegree, RiskAssessment, Thresholds};
pub use clustering::{elbow_fit, kmeans, ClusterModel, ElbowReport};
pub use engine::{Engine, EngineConfig, EngineError};
pub use mfa::{AuthDecision, ChallengeKind, MfaEngine};
pub use session::{
    extract_features, normalize, reconstruct_text, FeatureVector, KeyEvent, LoginSession,
};
pub use store::{ProfileStore, UserProfile};
