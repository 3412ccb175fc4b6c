//! Training objectives: ZINB reconstruction, cross-view correlation
//! reduction, and the spatial neighbourhood term.
//!
//! Each objective has a plain evaluation on matrices and a recorded version
//! on a [`Tape`] for training. Both are sums, not means.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, softplus, zinb_entry, Matrix, Tape, Var};

/// Bound applied to cosine scores before the log-sigmoid.
pub const SCORE_CLAMP: f64 = 30.0;

/// Lower bound on the number of sampled negatives per spot.
pub const MIN_NEGATIVES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub zinb: f64,
    pub cr: f64,
    pub spatial: f64,
    pub total: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.zinb, self.cr, self.spatial, self.total].iter().all(|v| v.is_finite())
    }
}

pub fn total_loss(zinb: f64, cr: f64, spatial: f64, gamma: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        zinb,
        cr,
        spatial,
        total: zinb + gamma * cr + lambda * spatial,
        gamma,
        lambda,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// `max(|R_i|, 5)` non-neighbours per spot, redrawn every epoch.
    #[default]
    Sampled,
    /// Every non-neighbour of every spot.
    Exhaustive,
}

impl std::str::FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(NegativeMode::Sampled),
            "exhaustive" => Ok(NegativeMode::Exhaustive),
            other => Err(Error::Config(format!("unknown negative mode `{other}`"))),
        }
    }
}

/// Summed negative log-likelihood of `target` under elementwise ZINB parameters.
pub fn zinb_nll(target: &Matrix, mu: &Matrix, theta: &Matrix, pi: &Matrix) -> Result<f64> {
    for (name, m) in [("mu", mu), ("theta", theta), ("pi", pi)] {
        if m.shape() != target.shape() {
            return Err(Error::InvalidArgument(format!(
                "zinb_nll: {name} is {:?}, target is {:?}",
                m.shape(),
                target.shape()
            )));
        }
    }
    let cols = target.cols();
    let mut total = 0.0;
    for (idx, &x) in target.data().iter().enumerate() {
        let lp = zinb_entry(x, mu.data()[idx], theta.data()[idx], pi.data()[idx]).log_prob;
        if !lp.is_finite() {
            return Err(Error::NonFiniteEntry {
                op: "zinb_nll",
                row: idx / cols,
                col: idx % cols,
            });
        }
        total -= lp;
    }
    Ok(total)
}

fn unit_columns(name: &str, h: &Matrix) -> Result<Matrix> {
    let mut t = h.transpose();
    for j in 0..t.rows() {
        let norm = dot(t.row(j), t.row(j)).sqrt();
        if norm == 0.0 {
            return Err(Error::Domain {
                op: "correlation_reduction",
                detail: format!("column {j} of {name} has zero norm"),
            });
        }
        for v in t.row_mut(j) {
            *v /= norm;
        }
    }
    Ok(t)
}

/// `(1/p²) Σ (C − I)²` where `C` holds cosines between the columns of the two views.
pub fn correlation_reduction(h_spa: &Matrix, h_fea: &Matrix) -> Result<f64> {
    if h_spa.shape() != h_fea.shape() {
        return Err(Error::shape("correlation_reduction", h_spa.shape(), h_fea.shape()));
    }
    let p = h_spa.cols();
    let a = unit_columns("H_spa", h_spa)?;
    let b = unit_columns("H_fea", h_fea)?;
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..p {
            let c = dot(a.row(i), b.row(j));
            let target = if i == j { 1.0 } else { 0.0 };
            total += (c - target).powi(2);
        }
    }
    Ok(total / (p * p) as f64)
}

fn row_norms(z: &Matrix) -> Result<Vec<f64>> {
    (0..z.rows())
        .map(|i| {
            let n = dot(z.row(i), z.row(i)).sqrt();
            if n == 0.0 {
                Err(Error::Domain {
                    op: "spatial_reg",
                    detail: format!("latent row {i} has zero norm"),
                })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// `Σ_i [Σ_{j∈R_i} softplus(−ψ_ij) + Σ_{k∈negatives_i} softplus(ψ_ik)]`, with ψ the row cosine.
pub fn spatial_reg(z: &Matrix, neighbors: &[Vec<usize>], negatives: &[Vec<usize>]) -> Result<f64> {
    if neighbors.len() != z.rows() || negatives.len() != z.rows() {
        return Err(Error::InvalidArgument(format!(
            "spatial_reg: {} latent rows, {} neighbour sets, {} negative sets",
            z.rows(),
            neighbors.len(),
            negatives.len()
        )));
    }
    let norms = row_norms(z)?;
    let psi = |i: usize, j: usize| (dot(z.row(i), z.row(j)) / (norms[i] * norms[j])).clamp(-SCORE_CLAMP, SCORE_CLAMP);
    let mut total = 0.0;
    for i in 0..z.rows() {
        for &j in &neighbors[i] {
            total += softplus(-psi(i, j));
        }
        for &k in &negatives[i] {
            total += softplus(psi(i, k));
        }
    }
    Ok(total)
}

pub fn zinb_nll_var(tape: &mut Tape, mu: Var, theta: Var, pi: Var, target: &Arc<Matrix>) -> Result<Var> {
    tape.zinb_nll(mu, theta, pi, target)
}

pub fn correlation_reduction_var(tape: &mut Tape, h_spa: Var, h_fea: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(h_spa), tape.shape(h_fea));
    if sa != sb {
        return Err(Error::shape("correlation_reduction", sa, sb));
    }
    let p = sa.1;
    let a = tape.transpose(h_spa)?;
    let a = tape.row_l2_normalize(a)?;
    let b = tape.transpose(h_fea)?;
    let b = tape.row_l2_normalize(b)?;
    let bt = tape.transpose(b)?;
    let c = tape.matmul(a, bt)?;
    let eye = tape.constant(Matrix::identity(p));
    let diff = tape.sub(c, eye)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / (p * p) as f64)
}

/// Directed `(i, j)` pairs for every entry of `sets[i]`.
pub fn pairs_from_sets(sets: &[Vec<usize>]) -> Arc<Vec<(usize, usize)>> {
    Arc::new(
        sets.iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |&j| (i, j)))
            .collect(),
    )
}

pub fn spatial_reg_var(
    tape: &mut Tape,
    z: Var,
    positives: &Arc<Vec<(usize, usize)>>,
    negatives: &Arc<Vec<(usize, usize)>>,
) -> Result<Var> {
    let unit = tape.row_l2_normalize(z)?;
    let pos = tape.pair_dots(unit, positives)?;
    let pos = tape.clamp(pos, -SCORE_CLAMP, SCORE_CLAMP)?;
    let pos = tape.scale(pos, -1.0)?;
    let pos = tape.softplus(pos)?;
    let pos = tape.sum(pos)?;
    let neg = tape.pair_dots(unit, negatives)?;
    let neg = tape.clamp(neg, -SCORE_CLAMP, SCORE_CLAMP)?;
    let neg = tape.softplus(neg)?;
    let neg = tape.sum(neg)?;
    tape.add(pos, neg)
}

/// Every spot other than `i` and its neighbours, ascending.
pub fn all_negatives(neighbors: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = neighbors.len();
    neighbors
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let excluded: HashSet<usize> = r.iter().copied().chain([i]).collect();
            (0..n).filter(|k| !excluded.contains(k)).collect()
        })
        .collect()
}

/// Uniform draws without replacement of `max(|R_i|, 5)` non-neighbours per
/// spot, capped at the number available. Deterministic in `(seed, epoch)`.
pub fn sample_negatives(neighbors: &[Vec<usize>], seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let n = neighbors.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    neighbors
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let excluded: HashSet<usize> = r.iter().copied().chain([i]).collect();
            let available = n - excluded.len();
            let want = r.len().max(MIN_NEGATIVES).min(available);
            if want * 2 >= available {
                let pool: Vec<usize> = (0..n).filter(|k| !excluded.contains(k)).collect();
                let mut picked: Vec<usize> = index::sample(&mut rng, available, want).into_iter().map(|k| pool[k]).collect();
                picked.sort_unstable();
                return picked;
            }
            let mut picked = HashSet::with_capacity(want);
            while picked.len() < want {
                let k = rng.random_range(0..n);
                if !excluded.contains(&k) {
                    picked.insert(k);
                }
            }
            let mut picked: Vec<usize> = picked.into_iter().collect();
            picked.sort_unstable();
            picked
        })
        .collect()
}

pub fn negatives_for_epoch(mode: NegativeMode, neighbors: &[Vec<usize>], seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    match mode {
        NegativeMode::Sampled => sample_negatives(neighbors, seed, epoch),
        NegativeMode::Exhaustive => all_negatives(neighbors),
    }
}

/// Writes `epoch,zinb,cr,spatial,total` rows.
pub fn write_loss_log(path: &Path, rows: &[(usize, LossBreakdown)]) -> Result<()> {
    let mut w = crate::ingest::create_file(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "epoch,zinb,cr,spatial,total")?;
        for (epoch, b) in rows {
            writeln!(w, "{epoch},{},{},{},{}", b.zinb, b.cr, b.spatial, b.total)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<(usize, [f64; 4])>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let field = |c: usize| -> Result<&str> {
            rec.get(c).ok_or_else(|| Error::Parse {
                file: path.to_path_buf(),
                row: r + 2,
                col: c + 1,
                message: "missing field".into(),
            })
        };
        let parse = |c: usize| -> Result<f64> {
            field(c)?.parse().map_err(|_| Error::Parse {
                file: path.to_path_buf(),
                row: r + 2,
                col: c + 1,
                message: "not a number".into(),
            })
        };
        let epoch = parse(0)? as usize;
        out.push((epoch, [parse(1)?, parse(2)?, parse(3)?, parse(4)?]));
    }
    Ok(out)
}
