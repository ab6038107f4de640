//! Lloyd's k-means with k-means++ seeding, and the silhouette coefficient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    /// `[k, D]`.
    pub centroids: Tensor<f64>,
    pub inertia: f64,
    /// Clusters with no points at termination.
    pub empty_clusters: Vec<usize>,
    /// Restart that produced this result.
    pub restart: usize,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn points_of(points: &Tensor<f64>) -> Result<(usize, usize)> {
    match points.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::invalid("kmeans", format!("expected [n, D] points, got {s:?}"))),
    }
}

fn plus_plus_seed(points: &Tensor<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.shape()[0];
    let mut centroids = vec![points.row(rng.gen_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = points.row(pick).to_vec();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Assign each point to its nearest centroid (ties to the lowest index);
/// returns the inertia.
fn assign(points: &Tensor<f64>, centroids: &[Vec<f64>], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, (label, dist)) in labels.iter_mut().zip(dists.iter_mut()).enumerate() {
        let p = points.row(i);
        let mut best = (f64::INFINITY, 0);
        for (j, c) in centroids.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best.0 {
                best = (d, j);
            }
        }
        *label = best.1;
        *dist = best.0;
        inertia += best.0;
    }
    inertia
}

struct Run {
    labels: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
    history: Vec<f64>,
}

fn lloyd(points: &Tensor<f64>, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> Run {
    let (n, d) = (points.shape()[0], points.shape()[1]);
    let mut centroids = plus_plus_seed(points, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut history: Vec<f64> = Vec::new();
    let mut previous = labels.clone();
    for _ in 0..max_iter.max(1) {
        let inertia = assign(points, &centroids, &mut labels, &mut dists);
        if let Some(&last) = history.last() {
            assert!(
                inertia <= last + 1e-9 * last.abs().max(1.0),
                "k-means inertia increased from {last} to {inertia}"
            );
        }
        history.push(inertia);
        if labels == previous {
            break;
        }
        previous.clone_from(&labels);

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut taken: Vec<usize> = Vec::new();
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .fold(None::<(f64, usize)>, |best, i| match best {
                        Some((bd, _)) if dists[i] <= bd => best,
                        _ => Some((dists[i], i)),
                    });
                if let Some((_, i)) = far {
                    taken.push(i);
                    centroids[j] = points.row(i).to_vec();
                }
            }
        }
    }
    let inertia = *history.last().expect("at least one iteration");
    Run {
        labels,
        centroids,
        inertia,
        history,
    }
}

/// Best of `config.restarts` k-means runs by inertia; ties keep the lowest restart.
pub fn kmeans(points: &Tensor<f64>, k: usize, seed: u64, config: KMeansConfig) -> Result<ClusterAssignment> {
    let (n, d) = points_of(points)?;
    if k == 0 || k > n {
        return Err(Error::invalid("kmeans", format!("need 1 <= k <= n, got k={k}, n={n}")));
    }
    if config.restarts == 0 {
        return Err(Error::invalid("kmeans", "restarts must be positive"));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("kmeans points".into()));
    }
    let mut best: Option<(usize, Run)> = None;
    for r in 0..config.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let run = lloyd(points, k, config.max_iter, &mut rng);
        if best.as_ref().map_or(true, |(_, b)| run.inertia < b.inertia) {
            best = Some((r, run));
        }
    }
    let (restart, run) = best.expect("restarts > 0");
    let mut counts = vec![0usize; k];
    for &l in &run.labels {
        counts[l] += 1;
    }
    Ok(ClusterAssignment {
        k,
        centroids: Tensor::new(&[k, d], run.centroids.concat())?,
        labels: run.labels,
        inertia: run.inertia,
        empty_clusters: (0..k).filter(|&j| counts[j] == 0).collect(),
        restart,
        inertia_history: run.history,
    })
}

/// Mean silhouette `(b - a) / max(a, b)` with Euclidean distances.
///
/// Points in singleton clusters score 0, as do points with `a = b = 0`.
/// Fewer than two non-empty clusters is an error.
pub fn silhouette(points: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let (n, _) = points_of(points)?;
    if labels.len() != n {
        return Err(Error::shape("silhouette", points.shape(), &[labels.len()]));
    }
    if n < 2 {
        return Err(Error::invalid("silhouette", "need at least 2 points"));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let clusters: Vec<usize> = (0..k).filter(|&c| sizes[c] > 0).collect();
    if clusters.len() < 2 {
        return Err(Error::invalid("silhouette", "undefined for a single non-empty cluster"));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += sq_dist(points.row(i), points.row(j)).sqrt();
            }
        }
        let own = labels[i];
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = clusters
            .iter()
            .filter(|&&c| c != own)
            .map(|&c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}
