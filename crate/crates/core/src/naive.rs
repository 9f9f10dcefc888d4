//! Baseline: k-means clusters of the raw instrument, nuisances refitted on
//! the cluster labels, then discrete-instrument bounds over the labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{discrete_instrument_bounds, BoundRow, BoundSet};
use crate::data::{DatasetSplit, LabeledSample, OutcomeRange};
use crate::nn::{TrainLog, XzNet};
use crate::nuisance::{fit_mu, fit_pi, NuisanceConfig};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;
pub const KMEANS_RESTARTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter().enumerate() {
        let d = sq_dist(centre, p);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest centroid; ties go to the lowest index.
    pub fn assign(&self, z: &[f64]) -> usize {
        nearest(&self.centroids, z).0
    }
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansModel {
    let k = centroids.len();
    let dim = points[0].len();
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        let mut dists = Vec::with_capacity(points.len());
        for p in points {
            let (c, d) = nearest(&centroids, p);
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
            dists.push(d);
        }
        trace.push(dists.iter().sum());
        let mut next: Vec<Vec<f64>> = (0..k)
            .map(|c| {
                if counts[c] == 0 {
                    centroids[c].clone()
                } else {
                    sums[c].iter().map(|s| s / counts[c] as f64).collect()
                }
            })
            .collect();
        // an emptied cluster takes over the point farthest from its centre
        for c in 0..k {
            if counts[c] == 0 {
                let far = dists
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, d)| if *d > dists[b] { i } else { b });
                next[c] = points[far].clone();
                dists[far] = 0.0;
            }
        }
        let moved = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if moved < KMEANS_TOL || iterations >= KMEANS_MAX_ITER {
            break;
        }
    }
    let inertia = points.iter().map(|p| nearest(&centroids, p).1).sum();
    KMeansModel {
        centroids,
        inertia,
        iterations,
        inertia_trace: trace,
    }
}

/// k-means++ seeding followed by Lloyd iterations, best of
/// [`KMEANS_RESTARTS`] restarts by inertia.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansModel> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let mut distinct: Vec<&Vec<f64>> = points.iter().collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::InvalidInput(format!(
            "{} distinct points cannot form {k} clusters",
            distinct.len()
        )));
    }
    let mut best: Option<KMeansModel> = None;
    for r in 0..KMEANS_RESTARTS {
        let mut rng = substream(seed, Stream::KMeans, r as u64);
        let model = lloyd(points, seed_plus_plus(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn encode(samples: &[LabeledSample], km: &KMeansModel) -> Vec<LabeledSample> {
    samples
        .iter()
        .map(|s| {
            let mut z = vec![0.0; km.k()];
            z[km.assign(&s.z)] = 1.0;
            LabeledSample { z, ..s.clone() }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct NaiveFit {
    pub kmeans: KMeansModel,
    pub mu: XzNet,
    pub pi: XzNet,
    pub mu_log: TrainLog,
    pub pi_log: TrainLog,
    /// Training units per (cluster, arm).
    pub counts: Vec<[usize; 2]>,
}

pub fn fit_naive(split: &DatasetSplit, k: usize, cfg: &NuisanceConfig) -> Result<NaiveFit> {
    let points: Vec<Vec<f64>> = split.train.iter().map(|s| s.z.clone()).collect();
    let kmeans = kmeans_fit(&points, k, split.seed)?;
    let train = encode(&split.train, &kmeans);
    let val = encode(&split.val, &kmeans);
    let mut counts = vec![[0usize; 2]; k];
    for s in &split.train {
        counts[kmeans.assign(&s.z)][s.a as usize] += 1;
    }
    let (mu, mu_log) = fit_mu(&train, &val, cfg, split.seed)?;
    let (pi, pi_log) = fit_pi(&train, &val, cfg, split.seed)?;
    Ok(NaiveFit {
        kmeans,
        mu,
        pi,
        mu_log,
        pi_log,
        counts,
    })
}

impl NaiveFit {
    /// Discrete-instrument bounds over the cluster labels at each `x`.
    pub fn bounds(&self, x: &[f64], range: OutcomeRange) -> Result<BoundSet> {
        for (cell, c) in self.counts.iter().enumerate() {
            for arm in 0..2 {
                if c[arm] == 0 {
                    return Err(Error::EmptyCellArm {
                        cell,
                        arm: arm as u8,
                    });
                }
            }
        }
        let k = self.kmeans.k();
        let mut labels = catebounds_autodiff::Tensor::zeros(&[k, k]);
        for c in 0..k {
            labels.data_mut()[c * k + c] = 1.0;
        }
        let mu = self.mu.cross(x, &labels)?;
        let pi = self.pi.cross(x, &labels)?.remove(0);
        let rows = x
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                let row = |t: &catebounds_autodiff::Tensor| t.row_slice(i).to_vec();
                Ok(BoundRow {
                    x: xi,
                    bound: discrete_instrument_bounds(
                        &row(&pi),
                        &row(&mu[1]),
                        &row(&mu[0]),
                        range,
                    )?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BoundSet { rows })
    }

    pub fn cell_masses(&self) -> Vec<f64> {
        let total: usize = self.counts.iter().map(|c| c[0] + c[1]).sum();
        self.counts
            .iter()
            .map(|c| (c[0] + c[1]) as f64 / total as f64)
            .collect()
    }
}
