//! Density-initialized k-means under a per-dimension weighted Euclidean
//! distance.
//!
//! Dimension weights come from normalized forest importances. Initial
//! centers are chosen greedily: the densest remaining row (most neighbours
//! closer than the global mean pairwise distance) becomes a center, and every
//! row closer than that mean distance to it is removed from the candidate set.
//! Lloyd iterations then alternate nearest-center assignment and mean update.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::ImportanceVector;
use crate::num::{compensated_sum, Scalar};

/// Non-negative per-dimension weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector<T> {
    pub w: Vec<T>,
}

impl<T: Scalar> WeightVector<T> {
    pub fn uniform(n: usize) -> Self {
        WeightVector {
            w: vec![T::one() / T::of_usize(n.max(1)); n],
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// `w_i = v_i / Σ v`. Negative importances are treated as zero; if nothing
/// is positive the weights fall back to uniform.
pub fn normalize_weights<T: Scalar>(importances: &ImportanceVector<T>) -> WeightVector<T> {
    let clipped = importances.clipped();
    let total = compensated_sum(clipped.values.iter().copied());
    if total <= T::zero() {
        warn!("all feature importances are zero; using uniform dimension weights");
        return WeightVector::uniform(clipped.len());
    }
    WeightVector {
        w: clipped.values.iter().map(|&v| v / total).collect(),
    }
}

#[inline]
pub(crate) fn wdist<T: Scalar>(a: &[T], b: &[T], w: &[T]) -> T {
    let mut s = T::zero();
    for i in 0..w.len() {
        let d = a[i] - b[i];
        s = s + w[i] * d * d;
    }
    s.sqrt()
}

/// `sqrt(Σ_i w_i (a_i − b_i)²)`.
pub fn weighted_distance<T: Scalar>(a: &[T], b: &[T], w: &WeightVector<T>) -> Result<T> {
    for v in [a.len(), b.len()] {
        if v != w.len() {
            return Err(Error::DimensionMismatch {
                expected: w.len(),
                got: v,
            });
        }
    }
    Ok(wdist(a, b, &w.w))
}

fn check_rows<T: Scalar>(rows: &[Vec<T>], w: &WeightVector<T>) -> Result<()> {
    match rows.iter().find(|r| r.len() != w.len()) {
        Some(r) => Err(Error::DimensionMismatch {
            expected: w.len(),
            got: r.len(),
        }),
        None => Ok(()),
    }
}

/// Condensed upper-triangular matrix of pairwise weighted distances.
#[derive(Debug, Clone)]
pub struct PairwiseDistances<T> {
    m: usize,
    d: Vec<T>,
}

impl<T: Scalar> PairwiseDistances<T> {
    pub fn compute(rows: &[Vec<T>], w: &WeightVector<T>) -> Result<Self> {
        check_rows(rows, w)?;
        let m = rows.len();
        let d: Vec<T> = (0..m)
            .into_par_iter()
            .flat_map_iter(|p| (p + 1..m).map(move |q| wdist(&rows[p], &rows[q], &w.w)))
            .collect();
        Ok(PairwiseDistances { m, d })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn get(&self, p: usize, q: usize) -> T {
        if p == q {
            return T::zero();
        }
        let (i, j) = if p < q { (p, q) } else { (q, p) };
        // offset of row i in the condensed layout
        let base = i * (2 * self.m - i - 1) / 2;
        self.d[base + (j - i - 1)]
    }

    /// Mean over all `m(m−1)/2` pairs.
    pub fn average(&self) -> Result<T> {
        if self.m < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: self.m });
        }
        Ok(compensated_sum(self.d.iter().copied()) / T::of_usize(self.d.len()))
    }

    /// Number of rows `q` (including `p` itself) with `avg − d(p, q) > 0`.
    pub fn density(&self, p: usize, avg: T) -> usize {
        (0..self.m).filter(|&q| avg - self.get(p, q) > T::zero()).count()
    }
}

pub fn average_distance<T: Scalar>(rows: &[Vec<T>], w: &WeightVector<T>) -> Result<T> {
    PairwiseDistances::compute(rows, w)?.average()
}

pub fn density<T: Scalar>(rows: &[Vec<T>], p: usize, avg: T, w: &WeightVector<T>) -> usize {
    rows.iter()
        .filter(|q| avg - wdist(&rows[p], q, &w.w) > T::zero())
        .count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityInit {
    /// Row indices chosen as initial centers, in pick order.
    pub rows: Vec<usize>,
    /// How many of them came from the farthest-point fallback.
    pub fallback: usize,
}

/// Picks `k` initial center rows.
pub fn density_init<T: Scalar>(dist: &PairwiseDistances<T>, k: usize) -> Result<DensityInit> {
    let m = dist.len();
    if k == 0 || k > m {
        return Err(Error::Config(format!("cannot pick {k} centers from {m} rows")));
    }
    if m == 1 {
        return Ok(DensityInit { rows: vec![0], fallback: 0 });
    }
    let avg = dist.average()?;
    let dens: Vec<usize> = (0..m).into_par_iter().map(|p| dist.density(p, avg)).collect();
    let mut remaining = vec![true; m];
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let best = (0..m)
            .filter(|&p| remaining[p])
            .fold(None, |best: Option<usize>, p| match best {
                Some(b) if dens[p] <= dens[b] => Some(b),
                _ => Some(p),
            });
        let Some(c) = best else { break };
        picked.push(c);
        remaining[c] = false;
        for q in 0..m {
            if remaining[q] && dist.get(c, q) < avg {
                remaining[q] = false;
            }
        }
    }
    let fallback = k - picked.len();
    if fallback > 0 {
        info!("density initialization exhausted after {} centers; adding {fallback} farthest-point centers", picked.len());
        let mut is_center = vec![false; m];
        picked.iter().for_each(|&c| is_center[c] = true);
        while picked.len() < k {
            let mut best: Option<(usize, T)> = None;
            for p in (0..m).filter(|&p| !is_center[p]) {
                let near = picked.iter().map(|&c| dist.get(c, p)).fold(T::infinity(), T::min);
                match best {
                    Some((_, b)) if near <= b => {}
                    _ => best = Some((p, near)),
                }
            }
            let (p, _) = best.expect("k <= m leaves a non-center row");
            is_center[p] = true;
            picked.push(p);
        }
    }
    Ok(DensityInit { rows: picked, fallback })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel<T> {
    pub k: usize,
    pub centers: Vec<Vec<T>>,
    pub assignments: Vec<usize>,
    pub weights: WeightVector<T>,
    /// Number of center updates performed.
    pub iterations_run: usize,
    /// Weighted within-cluster sum of squares after every assignment step.
    pub sse_history: Vec<T>,
    pub init: DensityInit,
    /// Clusters that went empty and were re-seeded.
    pub reseeds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Nearest center and its distance; ties go to the lowest center index.
pub fn nearest<T: Scalar>(x: &[T], centers: &[Vec<T>], w: &[T]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centers.iter().enumerate() {
        let d = wdist(x, c, w);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign<T: Scalar>(rows: &[Vec<T>], centers: &[Vec<T>], w: &[T]) -> (Vec<usize>, Vec<T>) {
    rows.par_iter().map(|r| nearest(r, centers, w)).unzip()
}

fn sse<T: Scalar>(d: &[T]) -> T {
    compensated_sum(d.iter().map(|&x| x * x))
}

pub fn kmeans<T: Scalar>(rows: &[Vec<T>], k: usize, weights: &WeightVector<T>, params: KMeansParams) -> Result<ClusterModel<T>> {
    let dist = PairwiseDistances::compute(rows, weights)?;
    kmeans_with(rows, &dist, k, weights, params)
}

/// As [`kmeans`] with precomputed pairwise distances.
pub fn kmeans_with<T: Scalar>(
    rows: &[Vec<T>],
    dist: &PairwiseDistances<T>,
    k: usize,
    weights: &WeightVector<T>,
    params: KMeansParams,
) -> Result<ClusterModel<T>> {
    check_rows(rows, weights)?;
    let init = density_init(dist, k)?;
    let dim = weights.len();
    let w = &weights.w;
    let tol = T::of(params.tol);
    let mut centers: Vec<Vec<T>> = init.rows.iter().map(|&r| rows[r].clone()).collect();
    let (mut assignments, mut dists) = assign(rows, &centers, w);
    let mut sse_history = vec![sse(&dists)];
    let mut iterations_run = 0;
    let mut reseeds = 0;
    while iterations_run < params.max_iter {
        let mut sums = vec![vec![T::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &a) in rows.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(r) {
                *s = *s + v;
            }
        }
        let mut taken = vec![false; rows.len()];
        let mut new_centers = Vec::with_capacity(k);
        for j in 0..k {
            if counts[j] > 0 {
                let n = T::of_usize(counts[j]);
                new_centers.push(sums[j].iter().map(|&s| s / n).collect::<Vec<T>>());
            } else {
                // re-seed at the row farthest from its own center
                let mut far: Option<(usize, T)> = None;
                for (i, &d) in dists.iter().enumerate() {
                    if taken[i] {
                        continue;
                    }
                    match far {
                        Some((_, b)) if d <= b => {}
                        _ => far = Some((i, d)),
                    }
                }
                let (i, _) = far.expect("more rows than empty clusters");
                warn!("cluster {j} became empty; re-seeding at row {i}");
                taken[i] = true;
                reseeds += 1;
                new_centers.push(rows[i].clone());
            }
        }
        let shift = centers
            .iter()
            .zip(&new_centers)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (*x - *y).abs()))
            .fold(T::zero(), T::max);
        centers = new_centers;
        iterations_run += 1;
        let (next, next_d) = assign(rows, &centers, w);
        let stable = next == assignments;
        assignments = next;
        dists = next_d;
        sse_history.push(sse(&dists));
        if stable || shift <= tol {
            break;
        }
    }
    Ok(ClusterModel {
        k,
        centers,
        assignments,
        weights: weights.clone(),
        iterations_run,
        sse_history,
        init,
        reseeds,
    })
}

impl<T: Scalar> ClusterModel<T> {
    pub fn nearest(&self, x: &[T]) -> (usize, T) {
        nearest(x, &self.centers, &self.weights.w)
    }

    pub fn members(&self, j: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == j).collect()
    }

    /// `sample_id,cluster,weighted_distance_to_center` rows.
    pub fn report_csv(&self, rows: &[Vec<T>], ids: &[String]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample_id", "cluster", "weighted_distance_to_center"])?;
        for ((id, r), &a) in ids.iter().zip(rows).zip(&self.assignments) {
            let d = wdist(r, &self.centers[a], &self.weights.w);
            w.write_record([id.as_str(), &a.to_string(), &format!("{d}")])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Mean silhouette coefficient under the weighted distance. Rows in
/// singleton clusters score 0.
pub fn silhouette<T: Scalar>(dist: &PairwiseDistances<T>, assignments: &[usize], k: usize) -> T {
    let m = dist.len();
    if m < 2 || k < 2 {
        return T::zero();
    }
    let mut sizes = vec![0usize; k];
    assignments.iter().for_each(|&a| sizes[a] += 1);
    let scores: Vec<T> = (0..m)
        .into_par_iter()
        .map(|p| {
            let own = assignments[p];
            if sizes[own] < 2 {
                return T::zero();
            }
            let mut sums = vec![T::zero(); k];
            for q in 0..m {
                if q != p {
                    sums[assignments[q]] = sums[assignments[q]] + dist.get(p, q);
                }
            }
            let a = sums[own] / T::of_usize(sizes[own] - 1);
            let b = (0..k)
                .filter(|&j| j != own && sizes[j] > 0)
                .map(|j| sums[j] / T::of_usize(sizes[j]))
                .fold(T::infinity(), T::min);
            if !b.is_finite() {
                return T::zero();
            }
            let denom = a.max(b);
            if denom > T::zero() {
                (b - a) / denom
            } else {
                T::zero()
            }
        })
        .collect();
    compensated_sum(scores) / T::of_usize(m)
}

/// Fits every `k` in `ks` and keeps the one with the best mean silhouette
/// (ties: smallest k).
pub fn kmeans_auto<T: Scalar>(
    rows: &[Vec<T>],
    ks: std::ops::RangeInclusive<usize>,
    weights: &WeightVector<T>,
    params: KMeansParams,
) -> Result<ClusterModel<T>> {
    let dist = PairwiseDistances::compute(rows, weights)?;
    let mut best: Option<(T, ClusterModel<T>)> = None;
    for k in ks.filter(|&k| k <= rows.len()) {
        let model = kmeans_with(rows, &dist, k, weights, params)?;
        let s = silhouette(&dist, &model.assignments, k);
        match &best {
            Some((b, _)) if s <= *b => {}
            _ => best = Some((s, model)),
        }
    }
    best.map(|(_, m)| m)
        .ok_or_else(|| Error::TooFewSamples { needed: 2, got: rows.len() })
}
