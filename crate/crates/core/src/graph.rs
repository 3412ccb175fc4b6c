//! Spatial-radius and expression-KNN graphs, and their symmetric normalization.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{dot, Csr, Matrix};

/// Above this many spots the spatial graph uses a grid bucket index.
pub const GRID_THRESHOLD: usize = 5000;

const SIMILARITY_BLOCK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphKind {
    Spatial,
    Feature,
    Normalized,
}

/// Sparse `n × n` graph stored as a sorted edge list.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAdjacency {
    n: usize,
    edges: Vec<(usize, usize)>,
    values: Option<Vec<f64>>,
    kind: GraphKind,
}

impl SparseAdjacency {
    /// Binary graph from an edge list; edges are sorted and deduplicated.
    pub fn from_edges(n: usize, mut edges: Vec<(usize, usize)>, kind: GraphKind) -> Result<Self> {
        if kind == GraphKind::Normalized {
            return Err(Error::InvalidArgument("normalized graphs carry weights".into()));
        }
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= n || j >= n || i == j) {
            return Err(Error::InvalidArgument(format!(
                "edge ({i}, {j}) is a self-loop or outside {n} nodes"
            )));
        }
        edges.sort_unstable();
        edges.dedup();
        let graph = SparseAdjacency {
            n,
            edges,
            values: None,
            kind,
        };
        if kind == GraphKind::Spatial && !graph.is_symmetric() {
            return Err(Error::InvalidArgument("spatial graphs must be symmetric".into()));
        }
        Ok(graph)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn values(&self) -> Option<&[f64]> {
        self.values.as_deref()
    }

    pub fn is_symmetric(&self) -> bool {
        self.edges.iter().all(|&(i, j)| self.edges.binary_search(&(j, i)).is_ok())
    }

    pub fn to_csr(&self) -> Csr {
        let triplets: Vec<(usize, usize, f64)> = match &self.values {
            Some(v) => self.edges.iter().zip(v).map(|(&(i, j), &w)| (i, j, w)).collect(),
            None => self.edges.iter().map(|&(i, j)| (i, j, 1.0)).collect(),
        };
        Csr::from_triplets(self.n, self.n, &triplets).expect("edges are in range")
    }

    pub fn to_dense(&self) -> Matrix {
        self.to_csr().to_dense()
    }

    /// Debug dump of `row col value` lines.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut w = crate::ingest::create_file(path)?;
        let res = (|| -> std::io::Result<()> {
            for (k, &(i, j)) in self.edges.iter().enumerate() {
                let v = self.values.as_ref().map_or(1.0, |v| v[k]);
                writeln!(w, "{i} {j} {v}")?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

#[inline]
fn within(coords: &Matrix, i: usize, j: usize, r: f64) -> bool {
    let dx = coords.get(i, 0) - coords.get(j, 0);
    let dy = coords.get(i, 1) - coords.get(j, 1);
    (dx * dx + dy * dy).sqrt() <= r
}

fn check_coords(coords: &Matrix, r: f64) -> Result<()> {
    if coords.cols() != 2 {
        return Err(Error::shape("build_spatial_graph", coords.shape(), (coords.rows(), 2)));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {r}")));
    }
    if let Some(i) = (0..coords.rows()).find(|&i| !coords.row(i).iter().all(|v| v.is_finite())) {
        return Err(Error::Data(format!("spot {i} has a non-finite coordinate")));
    }
    Ok(())
}

/// Edge `(i, j)`, `i ≠ j`, iff the Euclidean distance between spots is at most `r`.
pub fn build_spatial_graph(coords: &Matrix, r: f64) -> Result<SparseAdjacency> {
    if coords.rows() > GRID_THRESHOLD {
        spatial_graph_grid(coords, r)
    } else {
        spatial_graph_scan(coords, r)
    }
}

/// Exhaustive pairwise scan.
pub fn spatial_graph_scan(coords: &Matrix, r: f64) -> Result<SparseAdjacency> {
    check_coords(coords, r)?;
    let n = coords.rows();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && within(coords, i, j, r) {
                edges.push((i, j));
            }
        }
    }
    Ok(SparseAdjacency {
        n,
        edges,
        values: None,
        kind: GraphKind::Spatial,
    })
}

/// Uniform-grid bucketed search with cell side `r`; same edges as the scan.
pub fn spatial_graph_grid(coords: &Matrix, r: f64) -> Result<SparseAdjacency> {
    check_coords(coords, r)?;
    let n = coords.rows();
    let min_x = coords.column(0).into_iter().fold(f64::INFINITY, f64::min);
    let min_y = coords.column(1).into_iter().fold(f64::INFINITY, f64::min);
    let cell = |i: usize| -> (i64, i64) {
        (
            ((coords.get(i, 0) - min_x) / r).floor() as i64,
            ((coords.get(i, 1) - min_y) / r).floor() as i64,
        )
    };
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for i in 0..n {
        buckets.entry(cell(i)).or_default().push(i);
    }
    let mut edges: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let (cx, cy) = cell(i);
            let mut found = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(bucket) = buckets.get(&(cx + dx, cy + dy)) {
                        found.extend(bucket.iter().copied().filter(|&j| j != i && within(coords, i, j, r)).map(|j| (i, j)));
                    }
                }
            }
            found
        })
        .collect();
    edges.sort_unstable();
    Ok(SparseAdjacency {
        n,
        edges,
        values: None,
        kind: GraphKind::Spatial,
    })
}

/// Directed edge `i → j` for the `k_n` spots most cosine-similar to `i`.
///
/// Ties go to the lower spot index. The result may be asymmetric.
pub fn build_feature_graph(x: &Matrix, k_n: usize) -> Result<SparseAdjacency> {
    let n = x.rows();
    if k_n == 0 || k_n >= n {
        return Err(Error::InvalidArgument(format!(
            "k_n must lie in [1, {}), got {k_n}",
            n
        )));
    }
    let mut unit = x.clone();
    for i in 0..n {
        let norm = dot(x.row(i), x.row(i)).sqrt();
        if norm == 0.0 {
            return Err(Error::Data(format!(
                "spot {i} has an all-zero expression row; cosine similarity is undefined"
            )));
        }
        for v in unit.row_mut(i) {
            *v /= norm;
        }
    }
    let starts: Vec<usize> = (0..n).step_by(SIMILARITY_BLOCK).collect();
    let blocks: Vec<Vec<(usize, usize)>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + SIMILARITY_BLOCK).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let block = unit.select_rows(&rows);
            let mut sims = Matrix::zeros(end - start, n);
            crate::tensor::gemm(&block, false, &unit, true, &mut sims, 0.0);
            let mut edges = Vec::with_capacity((end - start) * k_n);
            for (local, i) in (start..end).enumerate() {
                let row = sims.row(local);
                let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
                cand.select_nth_unstable_by(k_n - 1, cmp);
                cand.truncate(k_n);
                cand.sort_unstable();
                edges.extend(cand.into_iter().map(|j| (i, j)));
            }
            edges
        })
        .collect();
    Ok(SparseAdjacency {
        n,
        edges: blocks.into_iter().flatten().collect(),
        values: None,
        kind: GraphKind::Feature,
    })
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `A` first symmetrized by union.
pub fn normalize_adjacency(a: &SparseAdjacency) -> Result<SparseAdjacency> {
    if a.values.is_some() || a.kind == GraphKind::Normalized {
        return Err(Error::InvalidArgument("normalize_adjacency expects a binary graph".into()));
    }
    let n = a.n;
    let mut set: BTreeSet<(usize, usize)> = BTreeSet::new();
    for &(i, j) in &a.edges {
        set.insert((i, j));
        set.insert((j, i));
    }
    for i in 0..n {
        set.insert((i, i));
    }
    let mut degree = vec![0.0f64; n];
    for &(i, _) in &set {
        degree[i] += 1.0;
    }
    let edges: Vec<(usize, usize)> = set.into_iter().collect();
    let values = edges
        .iter()
        .map(|&(i, j)| 1.0 / (degree[i] * degree[j]).sqrt())
        .collect();
    Ok(SparseAdjacency {
        n,
        edges,
        values: Some(values),
        kind: GraphKind::Normalized,
    })
}

/// Sorted neighbor list of every spot.
pub fn neighbor_sets(a: &SparseAdjacency) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); a.n];
    for &(i, j) in &a.edges {
        if i != j {
            sets[i].push(j);
        }
    }
    for s in &mut sets {
        s.sort_unstable();
    }
    sets
}
