//! Seeded k-means and partition-agreement metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Largest centroid move, in Euclidean distance, that counts as converged.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            seed,
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringResult {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    pub seed: u64,
    pub k: usize,
    /// Index of the restart that won.
    pub restart: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for every row; ties go to the lower centroid index.
fn assign(z: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    (0..z.rows())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for c in 0..centroids.rows() {
                let dist = sq_dist(z.row(i), centroids.row(c));
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            best
        })
        .unzip()
}

fn plus_plus_init(z: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = z.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), z.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // never land on a zero-weight point through rounding
            if nearest[pick] == 0.0 {
                pick = nearest.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, slot) in nearest.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(z.row(i), z.row(next)));
        }
    }
    z.select_rows(&chosen)
}

fn lloyd(z: &Matrix, mut centroids: Matrix, max_iter: usize, tol: f64) -> Matrix {
    let (n, d) = z.shape();
    let k = centroids.rows();
    for _ in 0..max_iter {
        let (labels, dists) = assign(z, &centroids);
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums.row_mut(labels[i]).iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        let mut next = sums;
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for v in next.row_mut(c) {
                    *v *= inv;
                }
            } else {
                // reseed an empty cluster at the point worst served by its centroid
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a free point");
                taken[far] = true;
                next.row_mut(c).copy_from_slice(z.row(far));
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations, best of several restarts.
///
/// Restart `r` draws from the ChaCha8 stream `r` of `seed`, and the winner is
/// the lowest `(inertia, r)`, so running restarts in parallel cannot change
/// the result.
pub fn kmeans(z: &Matrix, config: &KMeansConfig) -> Result<ClusteringResult> {
    let n = z.rows();
    if config.k == 0 || config.k > n {
        return Err(Error::InvalidArgument(format!("k = {} with {n} points", config.k)));
    }
    if config.restarts == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one restart".into()));
    }
    if !z.is_finite() {
        return Err(Error::NonFinite { op: "kmeans" });
    }
    let runs: Vec<(f64, usize, Vec<usize>, Matrix)> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(r as u64);
            let init = plus_plus_init(z, config.k, &mut rng);
            let centroids = lloyd(z, init, config.max_iter, config.tol);
            let (labels, dists) = assign(z, &centroids);
            (dists.iter().sum(), r, labels, centroids)
        })
        .collect();
    let (inertia, restart, labels, centroids) = runs
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("at least one restart");
    Ok(ClusteringResult {
        labels,
        centroids,
        inertia,
        seed: config.seed,
        k: config.k,
        restart,
    })
}

/// Dense ids in order of first sorted appearance.
fn encode<L: Ord>(labels: &[L]) -> (Vec<usize>, usize) {
    let mut ids: BTreeMap<&L, usize> = BTreeMap::new();
    for l in labels {
        ids.entry(l).or_insert(0);
    }
    for (i, v) in ids.values_mut().enumerate() {
        *v = i;
    }
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

/// Truth-by-prediction count table.
#[derive(Clone, Debug)]
struct Contingency {
    counts: Vec<Vec<usize>>,
    n: usize,
}

impl Contingency {
    fn new<A: Ord, B: Ord>(truth: &[A], pred: &[B]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::InvalidArgument(format!(
                "{} truth labels and {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::InvalidArgument("no labels to compare".into()));
        }
        let (t, kt) = encode(truth);
        let (p, kp) = encode(pred);
        let mut counts = vec![vec![0usize; kp]; kt];
        for (&a, &b) in t.iter().zip(&p) {
            counts[a][b] += 1;
        }
        Ok(Contingency { counts, n: truth.len() })
    }

    /// Both labelings describe the same set partition.
    fn is_bijective(&self) -> bool {
        self.counts.len() == self.counts[0].len()
            && self.counts.iter().all(|r| r.iter().filter(|&&m| m > 0).count() == 1)
    }

    fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<usize> {
        let mut out = vec![0; self.counts[0].len()];
        for r in &self.counts {
            for (o, &c) in out.iter_mut().zip(r) {
                *o += c;
            }
        }
        out
    }
}

fn pairs(m: usize) -> f64 {
    (m as f64) * (m as f64 - 1.0) / 2.0
}

/// Adjusted Rand index. Returns 1.0 when the adjustment is degenerate.
pub fn ari<A: Ord, B: Ord>(truth: &[A], pred: &[B]) -> Result<f64> {
    let c = Contingency::new(truth, pred)?;
    let index: f64 = c.counts.iter().flatten().map(|&m| pairs(m)).sum();
    let a: f64 = c.row_sums().into_iter().map(pairs).sum();
    let b: f64 = c.col_sums().into_iter().map(pairs).sum();
    let total = pairs(c.n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = a * b / total;
    let max = (a + b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two entropies.
pub fn nmi<A: Ord, B: Ord>(truth: &[A], pred: &[B]) -> Result<f64> {
    let c = Contingency::new(truth, pred)?;
    if c.is_bijective() {
        return Ok(1.0);
    }
    let n = c.n as f64;
    let rows = c.row_sums();
    let cols = c.col_sums();
    let mut mi = 0.0;
    for (i, row) in c.counts.iter().enumerate() {
        for (j, &m) in row.iter().enumerate() {
            if m > 0 {
                let m = m as f64;
                mi += m / n * (n * m / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    let (ht, hp) = (entropy(&rows, c.n), entropy(&cols, c.n));
    if ht == 0.0 && hp == 0.0 {
        return Ok(1.0);
    }
    Ok((mi / ((ht + hp) / 2.0)).clamp(0.0, 1.0))
}

/// Minimum-cost perfect matching on a square matrix; `result[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return vec![];
    }
    // potentials and matching with 1-based sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}

/// Cluster-to-class matching that maximizes agreement. Entry `c` is the
/// truth class for predicted cluster `c`, or `None` when the cluster was
/// matched to padding.
fn best_matching(c: &Contingency) -> Vec<Option<usize>> {
    let kt = c.counts.len();
    let kp = c.counts[0].len();
    let s = kt.max(kp);
    let cost: Vec<Vec<f64>> = (0..s)
        .map(|p| {
            (0..s)
                .map(|t| if p < kp && t < kt { -(c.counts[t][p] as f64) } else { 0.0 })
                .collect()
        })
        .collect();
    let m = hungarian(&cost);
    (0..kp).map(|p| Some(m[p]).filter(|&t| t < kt)).collect()
}

fn matched_total(c: &Contingency, matching: &[Option<usize>]) -> usize {
    matching
        .iter()
        .enumerate()
        .filter_map(|(p, t)| t.map(|t| c.counts[t][p]))
        .sum()
}

/// Fraction of spots agreeing after the best one-to-one cluster-to-class matching.
pub fn acc<A: Ord, B: Ord>(truth: &[A], pred: &[B]) -> Result<f64> {
    let c = Contingency::new(truth, pred)?;
    let m = best_matching(&c);
    Ok(matched_total(&c, &m) as f64 / c.n as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F1Average {
    /// Per-class F1 weighted by class support.
    #[default]
    Weighted,
    Macro,
    Micro,
}

impl std::str::FromStr for F1Average {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(F1Average::Weighted),
            "macro" => Ok(F1Average::Macro),
            "micro" => Ok(F1Average::Micro),
            other => Err(Error::Config(format!("unknown F1 average `{other}`"))),
        }
    }
}

fn f1_for_matching(c: &Contingency, matching: &[Option<usize>], average: F1Average) -> f64 {
    let kt = c.counts.len();
    let support = c.row_sums();
    let cols = c.col_sums();
    let mut tp = vec![0usize; kt];
    let mut predicted = vec![0usize; kt];
    for (p, t) in matching.iter().enumerate() {
        if let Some(t) = *t {
            tp[t] += c.counts[t][p];
            predicted[t] += cols[p];
        }
    }
    let f1 = |tp: usize, predicted: usize, support: usize| {
        if tp == 0 {
            0.0
        } else {
            let precision = tp as f64 / predicted as f64;
            let recall = tp as f64 / support as f64;
            2.0 * precision * recall / (precision + recall)
        }
    };
    match average {
        F1Average::Weighted => (0..kt).map(|t| f1(tp[t], predicted[t], support[t]) * support[t] as f64).sum::<f64>() / c.n as f64,
        F1Average::Macro => (0..kt).map(|t| f1(tp[t], predicted[t], support[t])).sum::<f64>() / kt as f64,
        F1Average::Micro => f1(tp.iter().sum(), predicted.iter().sum(), c.n),
    }
}

/// F1 after relabeling predictions by the matching that maximizes [`acc`].
pub fn f1<A: Ord, B: Ord>(truth: &[A], pred: &[B], average: F1Average) -> Result<f64> {
    let c = Contingency::new(truth, pred)?;
    let m = best_matching(&c);
    Ok(f1_for_matching(&c, &m, average))
}

/// Agreement metrics as fractions; [`MetricReport::scaled`] gives the ×100 form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ari: f64,
    pub nmi: f64,
    pub acc: f64,
    pub f1: f64,
}

impl MetricReport {
    pub fn scaled(&self) -> [f64; 4] {
        [self.ari, self.nmi, self.acc, self.f1].map(|v| 100.0 * v)
    }
}

pub fn evaluate<A: Ord, B: Ord>(truth: &[A], pred: &[B], average: F1Average) -> Result<MetricReport> {
    Ok(MetricReport {
        ari: ari(truth, pred)?,
        nmi: nmi(truth, pred)?,
        acc: acc(truth, pred)?,
        f1: f1(truth, pred, average)?,
    })
}

/// One header row and one value row, each metric ×100.
pub fn write_metrics(path: &Path, report: &MetricReport) -> Result<()> {
    let mut w = crate::ingest::create_file(path)?;
    let [a, n, c, f] = report.scaled();
    writeln!(w, "ari,nmi,acc,f1\n{a:.4},{n:.4},{c:.4},{f:.4}")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
