//! Three-stage risk assessment of a login attempt against its history:
//! a global check that re-clusters history plus attempt, contextualisation
//! through the nearest centroid, and a local two-threshold check.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{self, ClusterError, ClusterModel, ElbowReport};

#[derive(Debug, Error, PartialEq)]
pub enum AnomalyError {
    #[error("profile not trained: {have} historical attempts, {need} required")]
    NotTrained { have: usize, need: usize },
    #[error("context cluster has no historical members")]
    EmptyContext,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierDegree {
    Normal,
    FirstDegree,
    SecondDegree,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t1: f64,
    pub t2: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// `t1` is the cluster radius, `t2 = radius_factor * t1`.
    #[default]
    RadiusFactor,
    /// `t1` is mean + 3 standard deviations of the member distances.
    MeanThreeSigma,
}

impl std::str::FromStr for ThresholdMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "radius-factor" => Ok(Self::RadiusFactor),
            "mean-three-sigma" => Ok(Self::MeanThreeSigma),
            other => Err(format!("unknown threshold mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyConfig {
    pub min_history: usize,
    pub radius_factor: f64,
    pub epsilon_floor: f64,
    pub threshold_mode: ThresholdMode,
    pub k_min: usize,
    /// Upper bound of the elbow search; `None` means `min(10, n / 2)`.
    pub k_max: Option<usize>,
    pub restarts: usize,
    pub max_iter: usize,
    /// Clamp attempts into the unit cube like history instead of
    /// extrapolating past the training ranges.
    pub clamp_attempts: bool,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            min_history: 10,
            radius_factor: 2.0,
            epsilon_floor: 1e-6,
            threshold_mode: ThresholdMode::RadiusFactor,
            k_min: 1,
            k_max: None,
            restarts: clustering::DEFAULT_RESTARTS,
            max_iter: clustering::DEFAULT_MAX_ITER,
            clamp_attempts: false,
        }
    }
}

impl AnomalyConfig {
    /// Elbow search range for `n` points.
    pub fn k_range(&self, n: usize) -> (usize, usize) {
        let k_min = self.k_min.clamp(1, n.max(1));
        let k_max = self
            .k_max
            .unwrap_or_else(|| 10.min(n / 2))
            .min(n)
            .max(k_min);
        (k_min, k_max)
    }
}

/// One entry of the assessment's stage log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageLog {
    Global {
        k: usize,
        elbow: Vec<(usize, f64)>,
        attempt_cluster: usize,
        attempt_cluster_size: usize,
        pass: bool,
    },
    Context {
        cluster: usize,
        historical_members: usize,
        member_distances: Vec<f64>,
        attempt_distance: f64,
    },
    Local {
        t1: f64,
        t2: f64,
        distance: f64,
        degree: OutlierDegree,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskAssessment {
    pub global_pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_cluster: Option<usize>,
    /// Distance to the context centroid, or to the nearest centroid holding
    /// history when the global check failed.
    pub distance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Thresholds>,
    pub degree: OutlierDegree,
    pub recluster_k: usize,
    pub explain: Vec<StageLog>,
}

/// Result of re-clustering history together with the attempt. The attempt is
/// the last point of the clustered set.
#[derive(Clone, Debug)]
pub struct GlobalCheck {
    pub pass: bool,
    pub model: ClusterModel,
    pub elbow: ElbowReport,
}

impl GlobalCheck {
    pub fn attempt_index(&self) -> usize {
        self.model.assignments.len() - 1
    }

    pub fn attempt_cluster(&self) -> usize {
        self.model.assignments[self.attempt_index()]
    }
}

/// Re-clusters `history ∪ {attempt}` with elbow-selected k; the check fails
/// when the attempt ends up alone in its cluster.
pub fn global_check(
    history: &[Vec<f64>],
    attempt: &[f64],
    seed: u64,
    config: &AnomalyConfig,
) -> Result<GlobalCheck, AnomalyError> {
    if history.len() < config.min_history.max(1) {
        return Err(AnomalyError::NotTrained {
            have: history.len(),
            need: config.min_history.max(1),
        });
    }
    let mut points = history.to_vec();
    points.push(attempt.to_vec());
    let (k_min, k_max) = config.k_range(points.len());
    let (model, elbow) = clustering::elbow_fit(
        &points,
        k_min,
        k_max,
        seed,
        config.restarts,
        config.max_iter,
    )?;
    let attempt_cluster = model.assignments[history.len()];
    let pass = model.members(attempt_cluster).count() > 1;
    Ok(GlobalCheck { pass, model, elbow })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub cluster: usize,
    /// Historical members' distances to the centroid, ascending, de-duplicated.
    pub member_distances: Vec<f64>,
    pub attempt_distance: f64,
    pub historical_members: usize,
}

/// Distances closer than this count as the same value when de-duplicating.
const DEDUP_TOLERANCE: f64 = 1e-12;

/// Sorts ascending and drops repeated values.
pub fn dedup_distances(mut distances: Vec<f64>) -> Vec<f64> {
    distances.sort_by(f64::total_cmp);
    distances.dedup_by(|b, a| (*b - *a).abs() <= DEDUP_TOLERANCE);
    distances
}

/// Picks the centroid nearest the attempt and gathers the distances of that
/// cluster's historical members. `history` must be the points the model was
/// fitted on, minus the attempt.
pub fn contextualize(
    model: &ClusterModel,
    history: &[Vec<f64>],
    attempt: &[f64],
) -> Result<Context, AnomalyError> {
    let (cluster, attempt_distance) = clustering::nearest_centroid(&model.centroids, attempt)?;
    let centroid = &model.centroids[cluster];
    let distances = model
        .members(cluster)
        .filter(|&i| i < history.len())
        .map(|i| clustering::euclidean(&history[i], centroid))
        .collect::<Result<Vec<_>, _>>()?;
    if distances.is_empty() {
        return Err(AnomalyError::EmptyContext);
    }
    let historical_members = distances.len();
    Ok(Context {
        cluster,
        member_distances: dedup_distances(distances),
        attempt_distance,
        historical_members,
    })
}

/// Derives the two local thresholds from the context cluster's distances.
pub fn compute_thresholds(
    member_distances: &[f64],
    config: &AnomalyConfig,
) -> Result<Thresholds, AnomalyError> {
    if member_distances.is_empty() {
        return Err(AnomalyError::EmptyContext);
    }
    let t1 = match config.threshold_mode {
        ThresholdMode::RadiusFactor => member_distances
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max),
        ThresholdMode::MeanThreeSigma => {
            let n = member_distances.len() as f64;
            let mean = member_distances.iter().sum::<f64>() / n;
            let var = member_distances
                .iter()
                .map(|d| (d - mean).powi(2))
                .sum::<f64>()
                / n;
            mean + 3.0 * var.sqrt()
        }
    };
    let t1 = if t1 > 0.0 { t1 } else { config.epsilon_floor };
    Ok(Thresholds {
        t1,
        t2: config.radius_factor.max(1.0) * t1,
    })
}

/// `d <= t1` is normal, `t1 < d < t2` first degree, `d >= t2` second degree.
pub fn local_check(distance: f64, th: Thresholds) -> OutlierDegree {
    if distance >= th.t2 {
        OutlierDegree::SecondDegree
    } else if distance > th.t1 {
        OutlierDegree::FirstDegree
    } else {
        OutlierDegree::Normal
    }
}

/// Runs the full pipeline on normalized vectors.
pub fn assess(
    history: &[Vec<f64>],
    attempt: &[f64],
    seed: u64,
    config: &AnomalyConfig,
) -> Result<RiskAssessment, AnomalyError> {
    let global = global_check(history, attempt, seed, config)?;
    let model = &global.model;
    let attempt_cluster = global.attempt_cluster();
    let mut explain = vec![StageLog::Global {
        k: model.k,
        elbow: global.elbow.curve.iter().map(|p| (p.k, p.wcss)).collect(),
        attempt_cluster,
        attempt_cluster_size: model.members(attempt_cluster).count(),
        pass: global.pass,
    }];

    if !global.pass {
        let sizes = model.cluster_sizes();
        let distance = model
            .centroids
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != attempt_cluster && sizes[*c] > 0)
            .map(|(_, c)| clustering::euclidean(c, attempt))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        return Ok(RiskAssessment {
            global_pass: false,
            context_cluster: None,
            distance,
            thresholds: None,
            degree: OutlierDegree::SecondDegree,
            recluster_k: model.k,
            explain,
        });
    }

    let context = match contextualize(model, history, attempt) {
        Ok(c) => c,
        Err(AnomalyError::EmptyContext) => {
            return Ok(RiskAssessment {
                global_pass: true,
                context_cluster: None,
                distance: clustering::nearest_centroid(&model.centroids, attempt)?.1,
                thresholds: None,
                degree: OutlierDegree::SecondDegree,
                recluster_k: model.k,
                explain,
            })
        }
        Err(e) => return Err(e),
    };
    explain.push(StageLog::Context {
        cluster: context.cluster,
        historical_members: context.historical_members,
        member_distances: context.member_distances.clone(),
        attempt_distance: context.attempt_distance,
    });

    let thresholds = compute_thresholds(&context.member_distances, config)?;
    let degree = local_check(context.attempt_distance, thresholds);
    explain.push(StageLog::Local {
        t1: thresholds.t1,
        t2: thresholds.t2,
        distance: context.attempt_distance,
        degree,
    });

    Ok(RiskAssessment {
        global_pass: true,
        context_cluster: Some(context.cluster),
        distance: context.attempt_distance,
        thresholds: Some(thresholds),
        degree,
        recluster_k: model.k,
        explain,
    })
}
