//! k-means clustering with elbow-method selection of k.
//!
//! Lloyd iteration from k-means++ seeding. Every run is driven by a seeded
//! ChaCha RNG so identical inputs give identical models. Multi-restart runs
//! may execute in parallel but are reduced in restart order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_RESTARTS: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("no points to cluster")]
    Empty,
    #[error("k = {k} is invalid for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid k range [{k_min}, {k_max}] for {n} points")]
    InvalidRange {
        k_min: usize,
        k_max: usize,
        n: usize,
    },
    #[error("assignment index {index} out of range for {k} centroids")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("no centroids")]
    NoCentroids,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub wcss: f64,
    pub iterations: usize,
    pub seed: u64,
    /// WCSS after seeding and after every Lloyd iteration.
    pub wcss_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Indices of the points assigned to `cluster`.
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &a)| a == cluster)
            .map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElbowPoint {
    pub k: usize,
    pub wcss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElbowReport {
    pub curve: Vec<ElbowPoint>,
    pub chosen_k: usize,
    /// `(k, wcss(k-1) - 2 wcss(k) + wcss(k+1))` for each interior k.
    pub second_differences: Vec<(usize, f64)>,
}

impl ElbowReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,wcss\n");
        for p in &self.curve {
            out.push_str(&format!("{},{}\n", p.k, p.wcss));
        }
        out
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64, ClusterError> {
    if a.len() != b.len() {
        return Err(ClusterError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(sq_dist(a, b).sqrt())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn wcss(
    centroids: &[Vec<f64>],
    points: &[Vec<f64>],
    assignments: &[usize],
) -> Result<f64, ClusterError> {
    if points.len() != assignments.len() {
        return Err(ClusterError::InvalidK {
            k: assignments.len(),
            n: points.len(),
        });
    }
    let mut total = 0.0;
    for (p, &a) in points.iter().zip(assignments) {
        let c = centroids.get(a).ok_or(ClusterError::IndexOutOfRange {
            index: a,
            k: centroids.len(),
        })?;
        if c.len() != p.len() {
            return Err(ClusterError::DimensionMismatch {
                expected: c.len(),
                got: p.len(),
            });
        }
        total += sq_dist(p, c);
    }
    Ok(total)
}

/// Index and distance of the closest centroid; ties go to the lowest index.
pub fn nearest_centroid(
    centroids: &[Vec<f64>],
    point: &[f64],
) -> Result<(usize, f64), ClusterError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in centroids.iter().enumerate() {
        let d = euclidean(c, point)?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.ok_or(ClusterError::NoCentroids)
}

fn validate(points: &[Vec<f64>]) -> Result<usize, ClusterError> {
    let dim = points.first().ok_or(ClusterError::Empty)?.len();
    for p in points {
        if p.len() != dim {
            return Err(ClusterError::DimensionMismatch {
                expected: dim,
                got: p.len(),
            });
        }
    }
    Ok(dim)
}

fn nearest_sq(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, then D²-weighted.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // Floating-point leftovers must not land on an existing centre.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).expect("total > 0");
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn mean_of(
    points: &[Vec<f64>],
    assignments: &[usize],
    cluster: usize,
    dim: usize,
) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for (p, _) in points
        .iter()
        .zip(assignments)
        .filter(|(_, &a)| a == cluster)
    {
        for (s, x) in sum.iter_mut().zip(p) {
            *s += x;
        }
        n += 1;
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

/// Lloyd iteration from the given centroids until the assignment stops
/// changing or `max_iter` updates have run.
fn lloyd(
    points: &[Vec<f64>],
    mut centroids: Vec<Vec<f64>>,
    max_iter: usize,
    seed: u64,
) -> ClusterModel {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;

    loop {
        let mut changed = false;
        for (p, a) in points.iter().zip(assignments.iter_mut()) {
            let (best, _) = nearest_sq(&centroids, p);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if trace.is_empty() {
            trace.push(wcss(&centroids, points, &assignments).expect("consistent"));
        }
        if !changed || iterations >= max_iter {
            break;
        }

        // An emptied cluster takes over the point farthest from its centroid,
        // drawn from clusters that can spare one.
        loop {
            let mut sizes = vec![0usize; k];
            for &a in &assignments {
                sizes[a] += 1;
            }
            let Some(empty) = sizes.iter().position(|&s| s == 0) else {
                break;
            };
            let far = points
                .iter()
                .enumerate()
                .filter(|(i, _)| sizes[assignments[*i]] > 1)
                .map(|(i, p)| (i, sq_dist(p, &centroids[assignments[i]])))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                })
                .expect("k <= n guarantees a cluster with two or more members")
                .0;
            assignments[far] = empty;
            centroids[empty] = points[far].clone();
        }

        for (c, centroid) in centroids.iter_mut().enumerate() {
            if let Some(m) = mean_of(points, &assignments, c, dim) {
                *centroid = m;
            }
        }
        iterations += 1;
        trace.push(wcss(&centroids, points, &assignments).expect("consistent"));
    }

    let total = wcss(&centroids, points, &assignments).expect("consistent");
    ClusterModel {
        k,
        centroids,
        assignments,
        wcss: total,
        iterations,
        seed,
        wcss_trace: trace,
    }
}

/// Single seeded k-means run.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<ClusterModel, ClusterError> {
    validate(points)?;
    if k == 0 || k > points.len() {
        return Err(ClusterError::InvalidK { k, n: points.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = seed_centroids(points, k, &mut rng);
    Ok(lloyd(points, centroids, max_iter, seed))
}

/// Seed for restart `r` of a run seeded with `seed`.
pub fn restart_seed(seed: u64, r: usize) -> u64 {
    // splitmix64 finaliser over (seed, r)
    let mut z = seed
        ^ (r as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pick_best(models: impl IntoIterator<Item = ClusterModel>) -> Option<ClusterModel> {
    models.into_iter().fold(None, |best, m| match best {
        Some(b) if b.wcss <= m.wcss => Some(b),
        _ => Some(m),
    })
}

/// Best-WCSS model over `restarts` seeded runs (earliest restart wins ties).
pub fn kmeans_best(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
) -> Result<ClusterModel, ClusterError> {
    validate(points)?;
    if k == 0 || k > points.len() {
        return Err(ClusterError::InvalidK { k, n: points.len() });
    }
    let models: Vec<ClusterModel> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| kmeans(points, k, restart_seed(seed, r), max_iter))
        .collect::<Result<_, _>>()?;
    Ok(pick_best(models).expect("at least one restart"))
}

/// Warm start for k from a (k-1)-model: keep its centroids and open a new one
/// at the point farthest from its centroid. Its starting WCSS is below the
/// (k-1) optimum, so Lloyd can only end lower.
fn split_farthest(points: &[Vec<f64>], prev: &ClusterModel, max_iter: usize) -> ClusterModel {
    let (far, _) = points
        .iter()
        .zip(&prev.assignments)
        .map(|(p, &a)| sq_dist(p, &prev.centroids[a]))
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, d)| {
            if d > best.1 {
                (i, d)
            } else {
                best
            }
        });
    let mut centroids = prev.centroids.clone();
    centroids.push(points[far].clone());
    lloyd(points, centroids, max_iter, prev.seed)
}

/// Fits every k in `[k_min, k_max]` and returns the elbow-selected model.
///
/// Each k keeps its best of `restarts` runs plus a warm start split from the
/// k-1 winner, which keeps the recorded curve non-increasing. The elbow is the
/// interior k with the largest second difference; flat curves and ties
/// resolve to the smallest k, and ranges without an interior k pick `k_min`.
pub fn elbow_fit(
    points: &[Vec<f64>],
    k_min: usize,
    k_max: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
) -> Result<(ClusterModel, ElbowReport), ClusterError> {
    validate(points)?;
    let n = points.len();
    if k_min == 0 || k_min > k_max || k_max > n {
        return Err(ClusterError::InvalidRange { k_min, k_max, n });
    }

    let mut models: Vec<ClusterModel> = Vec::with_capacity(k_max - k_min + 1);
    for k in k_min..=k_max {
        let best = kmeans_best(points, k, seed, restarts, max_iter)?;
        let model = match models.last() {
            Some(prev) => {
                pick_best([best, split_farthest(points, prev, max_iter)]).expect("two candidates")
            }
            None => best,
        };
        models.push(model);
    }

    let curve: Vec<ElbowPoint> = models
        .iter()
        .map(|m| ElbowPoint {
            k: m.k,
            wcss: m.wcss,
        })
        .collect();
    let second_differences: Vec<(usize, f64)> = curve
        .windows(3)
        .map(|w| (w[1].k, w[0].wcss - 2.0 * w[1].wcss + w[2].wcss))
        .collect();

    // Below this the curve only differs by rounding, e.g. for identical points.
    let magnitude = points
        .iter()
        .map(|p| p.iter().map(|x| x * x).sum::<f64>())
        .fold(1.0, f64::max);
    let flat_tolerance = 1e-12 * curve[0].wcss.max(n as f64 * magnitude);
    let chosen_k = second_differences
        .iter()
        .fold(None, |best: Option<(usize, f64)>, &(k, sd)| match best {
            Some((_, b)) if b >= sd => best,
            _ => Some((k, sd)),
        })
        .filter(|&(_, sd)| sd > flat_tolerance)
        .map_or(k_min, |(k, _)| k);

    let model = models.swap_remove(chosen_k - k_min);
    Ok((
        model,
        ElbowReport {
            curve,
            chosen_k,
            second_differences,
        },
    ))
}

/// Elbow selection of k; see [`elbow_fit`].
pub fn choose_k_elbow(
    points: &[Vec<f64>],
    k_min: usize,
    k_max: usize,
    seed: u64,
    restarts: usize,
) -> Result<(usize, ElbowReport), ClusterError> {
    let (_, report) = elbow_fit(points, k_min, k_max, seed, restarts, DEFAULT_MAX_ITER)?;
    Ok((report.chosen_k, report))
}
