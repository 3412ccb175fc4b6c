//! Loading, gene filtering and library-size normalization of spot-by-gene data.
//!
//! Two on-disk layouts are supported:
//!
//! * dense CSV: a mandatory header row (`spot_id,GENE1,GENE2,...`) followed by
//!   one row per spot whose first field is the spot id;
//! * Matrix Market coordinate files (1-based, rows are spots, columns genes)
//!   paired with a gene-symbol list and optionally a spot-id list, one token
//!   per line. Without a spot list the coordinate file's order is used.
//!
//! Coordinates are a CSV of `spot_id,x,y` and truth labels a CSV of
//! `spot_id,label`; both may carry a header row.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Per-spot library size after normalization.
pub const SCALE_FACTOR: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpressionFormat {
    DenseCsv,
    MatrixMarket,
}

impl std::str::FromStr for ExpressionFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense-csv" | "csv" => Ok(ExpressionFormat::DenseCsv),
            "matrix-market" | "mtx" => Ok(ExpressionFormat::MatrixMarket),
            other => Err(Error::Config(format!("unknown expression format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub expression: PathBuf,
    pub coords: PathBuf,
    /// Gene symbols, one per line. Required for Matrix Market input.
    pub genes: Option<PathBuf>,
    /// Spot ids, one per line, for Matrix Market input.
    pub spots: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub format: ExpressionFormat,
}

/// Spots × genes expression with spatial coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SpotDataset {
    /// Raw counts, `N × M`.
    pub counts: Matrix,
    /// Normalized expression, set by [`normalize_counts`].
    pub x: Option<Matrix>,
    /// Spot positions, `N × 2`.
    pub coords: Matrix,
    pub gene_symbols: Vec<String>,
    pub spot_ids: Vec<String>,
    pub truth_labels: Option<Vec<String>>,
}

impl SpotDataset {
    pub fn n_spots(&self) -> usize {
        self.counts.rows()
    }

    pub fn n_genes(&self) -> usize {
        self.counts.cols()
    }

    /// The normalized matrix, or an error if normalization has not run.
    pub fn normalized(&self) -> Result<&Matrix> {
        self.x
            .as_ref()
            .ok_or_else(|| Error::Data("expression has not been normalized".into()))
    }

    /// Checks the structural invariants shared by every constructor.
    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.counts.shape();
        if n < 2 || m < 2 {
            return Err(Error::Data(format!("need at least 2 spots and 2 genes, got {n}x{m}")));
        }
        if self.coords.shape() != (n, 2) {
            return Err(Error::Data(format!(
                "coordinates are {:?}, expected ({n}, 2)",
                self.coords.shape()
            )));
        }
        if self.gene_symbols.len() != m || self.spot_ids.len() != n {
            return Err(Error::Data("gene or spot id list length disagrees with counts".into()));
        }
        if let Some(x) = &self.x {
            if x.shape() != (n, m) {
                return Err(Error::Data("normalized matrix shape disagrees with counts".into()));
            }
        }
        if let Some(labels) = &self.truth_labels {
            if labels.len() != n {
                return Err(Error::Data("truth label count disagrees with spot count".into()));
            }
        }
        Ok(())
    }
}

pub fn load_dataset(paths: &DatasetPaths) -> Result<SpotDataset> {
    let (spot_ids, mut gene_symbols, counts) = match paths.format {
        ExpressionFormat::DenseCsv => {
            let (spots, genes, counts) = read_dense_csv(&paths.expression)?;
            if let Some(genes_path) = &paths.genes {
                let listed = read_token_list(genes_path)?;
                if listed != genes {
                    return Err(Error::Dimension {
                        file: genes_path.clone(),
                        message: "gene list disagrees with the expression header".into(),
                    });
                }
            }
            (spots, genes, counts)
        }
        ExpressionFormat::MatrixMarket => {
            let genes_path = paths.genes.as_ref().ok_or_else(|| {
                Error::Config("matrix-market input needs a gene symbol list".into())
            })?;
            let genes = read_token_list(genes_path)?;
            let spots = match &paths.spots {
                Some(p) => read_token_list(p)?,
                None => read_coord_ids(&paths.coords)?,
            };
            let counts = read_matrix_market(&paths.expression, spots.len(), genes.len())?;
            (spots, genes, counts)
        }
    };
    check_unique_spots(&spot_ids)?;
    make_unique(&mut gene_symbols);
    if let Some(bad) = counts.data().iter().position(|&v| v < 0.0) {
        let cols = counts.cols();
        return Err(Error::Parse {
            file: paths.expression.clone(),
            row: bad / cols + 1,
            col: bad % cols + 1,
            message: "negative count".into(),
        });
    }

    let coords = read_coords(&paths.coords, &spot_ids)?;
    let truth_labels = match &paths.labels {
        Some(p) => Some(read_labels(p, &spot_ids)?),
        None => None,
    };

    let keep: Vec<usize> = (0..counts.rows())
        .filter(|&i| counts.row(i).iter().sum::<f64>() > 0.0)
        .collect();
    let dropped: Vec<&str> = (0..counts.rows())
        .filter(|i| keep.binary_search(i).is_err())
        .map(|i| spot_ids[i].as_str())
        .collect();
    if !dropped.is_empty() {
        log::warn!("dropped {} spots with zero total count: {}", dropped.len(), dropped.join(", "));
    }

    let ds = SpotDataset {
        counts: counts.select_rows(&keep),
        x: None,
        coords: coords.select_rows(&keep),
        gene_symbols,
        spot_ids: keep.iter().map(|&i| spot_ids[i].clone()).collect(),
        truth_labels: truth_labels.map(|l| keep.iter().map(|&i| l[i].clone()).collect()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Restricts the dataset to the `g` genes with the largest count variance.
///
/// Variance uses the population (1/N) estimator; ties go to the lower gene
/// index and the original gene order is kept. Any normalized matrix is
/// discarded, since selection precedes normalization.
pub fn select_hvg(ds: &SpotDataset, g: usize) -> Result<SpotDataset> {
    let m = ds.n_genes();
    if g == 0 || g > m {
        return Err(Error::InvalidArgument(format!(
            "cannot select {g} highly variable genes out of {m}"
        )));
    }
    let variances = gene_variances(&ds.counts);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]).then(a.cmp(&b)));
    let mut kept = order[..g].to_vec();
    kept.sort_unstable();
    Ok(SpotDataset {
        counts: ds.counts.select_cols(&kept),
        x: None,
        coords: ds.coords.clone(),
        gene_symbols: kept.iter().map(|&j| ds.gene_symbols[j].clone()).collect(),
        spot_ids: ds.spot_ids.clone(),
        truth_labels: ds.truth_labels.clone(),
    })
}

/// Population variance of every column.
pub fn gene_variances(counts: &Matrix) -> Vec<f64> {
    let (n, m) = counts.shape();
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for (acc, &v) in mean.iter_mut().zip(counts.row(i)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut var = vec![0.0; m];
    for i in 0..n {
        for ((acc, &v), &mu) in var.iter_mut().zip(counts.row(i)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }
    var
}

/// Sets `x[i][j] = counts[i][j] / Σ_j counts[i][j] · 10⁴`.
pub fn normalize_counts(ds: &SpotDataset) -> Result<SpotDataset> {
    let mut x = ds.counts.clone();
    for i in 0..x.rows() {
        let total: f64 = ds.counts.row(i).iter().sum();
        if total <= 0.0 {
            return Err(Error::Data(format!(
                "spot `{}` has zero total count and cannot be normalized",
                ds.spot_ids[i]
            )));
        }
        for v in x.row_mut(i) {
            *v = *v / total * SCALE_FACTOR;
        }
    }
    Ok(SpotDataset {
        x: Some(x),
        ..ds.clone()
    })
}

/// Optional `ln(1 + x)` of the normalized matrix.
pub fn log1p_transform(ds: &SpotDataset) -> Result<SpotDataset> {
    let x = ds.normalized()?.map(f64::ln_1p);
    Ok(SpotDataset {
        x: Some(x),
        ..ds.clone()
    })
}

fn check_unique_spots(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateSpot(id.clone()));
        }
    }
    Ok(())
}

/// Renames repeated symbols `A`, `A` to `A`, `A-1`.
fn make_unique(symbols: &mut [String]) {
    let mut seen: HashSet<String> = HashSet::with_capacity(symbols.len());
    let mut dupes = 0usize;
    for s in symbols.iter_mut() {
        if seen.contains(s.as_str()) {
            let mut k = 1;
            while seen.contains(&format!("{s}-{k}")) {
                k += 1;
            }
            *s = format!("{s}-{k}");
            dupes += 1;
        }
        seen.insert(s.clone());
    }
    if dupes > 0 {
        log::warn!("renamed {dupes} duplicate gene symbols");
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(open(path)?))
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    match err.position() {
        Some(pos) => Error::Parse {
            file: path.to_path_buf(),
            row: pos.line() as usize,
            col: 0,
            message: err.to_string(),
        },
        None => Error::Parse {
            file: path.to_path_buf(),
            row: 0,
            col: 0,
            message: err.to_string(),
        },
    }
}

fn parse_number(path: &Path, field: &str, row: usize, col: usize) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            file: path.to_path_buf(),
            row,
            col,
            message: format!("`{field}` is not a finite number"),
        }),
    }
}

/// Reads `spot_id,GENE...` rows. Reported rows and columns are 1-based file positions.
fn read_dense_csv(path: &Path) -> Result<(Vec<String>, Vec<String>, Matrix)> {
    let mut reader = csv_reader(path)?;
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(path, e))?,
        None => {
            return Err(Error::Dimension {
                file: path.to_path_buf(),
                message: "empty file, header row is mandatory".into(),
            })
        }
    };
    let genes: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let m = genes.len();
    let mut spots = Vec::new();
    let mut data = Vec::new();
    for (r, record) in records.enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = r + 2;
        if record.len() != m + 1 {
            return Err(Error::Dimension {
                file: path.to_path_buf(),
                message: format!("row {line} has {} fields, expected {}", record.len(), m + 1),
            });
        }
        spots.push(record[0].to_string());
        for (c, field) in record.iter().enumerate().skip(1) {
            data.push(parse_number(path, field, line, c + 1)?);
        }
    }
    let n = spots.len();
    Ok((spots, genes, Matrix::from_vec(n, m, data)?))
}

fn read_token_list(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let token = line.trim();
        if !token.is_empty() {
            out.push(token.to_string());
        }
    }
    Ok(out)
}

fn read_matrix_market(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let reader = BufReader::new(open(path)?);
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, col: usize, message: String| Error::Parse {
        file: path.to_path_buf(),
        row: line,
        col,
        message,
    };

    let (_, banner) = lines
        .next()
        .ok_or_else(|| parse_err(1, 1, "missing %%MatrixMarket banner".into()))?;
    let banner = banner.map_err(|e| Error::io(path, e))?.to_ascii_lowercase();
    let tokens: Vec<&str> = banner.split_whitespace().collect();
    if tokens.len() < 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" || tokens[2] != "coordinate" {
        return Err(parse_err(1, 1, "expected `%%MatrixMarket matrix coordinate ...`".into()));
    }
    let pattern = match tokens[3] {
        "real" | "integer" => false,
        "pattern" => true,
        other => return Err(parse_err(1, 4, format!("unsupported field type `{other}`"))),
    };
    if tokens[4] != "general" {
        return Err(parse_err(1, 5, format!("unsupported symmetry `{}`", tokens[4])));
    }

    let mut size: Option<(usize, usize, usize)> = None;
    let mut out = Matrix::zeros(rows, cols);
    let mut seen = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let int = |k: usize| -> Result<usize> {
            fields
                .get(k)
                .and_then(|f| f.parse::<usize>().ok())
                .ok_or_else(|| parse_err(line_no, k + 1, "expected a non-negative integer".into()))
        };
        match size {
            None => {
                let (r, c, nnz) = (int(0)?, int(1)?, int(2)?);
                if r != rows || c != cols {
                    return Err(Error::Dimension {
                        file: path.to_path_buf(),
                        message: format!("matrix is {r}x{c} but the id lists give {rows}x{cols}"),
                    });
                }
                size = Some((r, c, nnz));
            }
            Some(_) => {
                let (i, j) = (int(0)?, int(1)?);
                let v = if pattern {
                    1.0
                } else {
                    let field = fields
                        .get(2)
                        .ok_or_else(|| parse_err(line_no, 3, "missing value".into()))?;
                    parse_number(path, field, line_no, 3)?
                };
                if i == 0 || j == 0 || i > rows || j > cols {
                    return Err(Error::OutOfBounds {
                        file: path.to_path_buf(),
                        row: i,
                        col: j,
                        rows,
                        cols,
                    });
                }
                let cur = out.get(i - 1, j - 1);
                out.set(i - 1, j - 1, cur + v);
                seen += 1;
            }
        }
    }
    match size {
        Some((_, _, nnz)) if nnz != seen => Err(Error::Dimension {
            file: path.to_path_buf(),
            message: format!("header declares {nnz} entries, found {seen}"),
        }),
        Some(_) => Ok(out),
        None => Err(parse_err(1, 1, "missing size line".into())),
    }
}

/// Records of a two-or-more column CSV keyed by spot id, skipping a header
/// row whose first field is not a known spot id.
fn keyed_records(path: &Path, known: &HashMap<&str, usize>, width: usize) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut reader = csv_reader(path)?;
    let mut out = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if r == 0 && !known.contains_key(&record[0]) {
            continue;
        }
        if record.len() < width {
            return Err(Error::Dimension {
                file: path.to_path_buf(),
                message: format!("row {} has {} fields, expected {width}", r + 1, record.len()),
            });
        }
        out.push((r + 1, record));
    }
    Ok(out)
}

fn read_coord_ids(path: &Path) -> Result<Vec<String>> {
    let mut reader = csv_reader(path)?;
    let mut ids = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() < 3 {
            continue;
        }
        if r == 0 && record[1].parse::<f64>().is_err() {
            continue;
        }
        ids.push(record[0].to_string());
    }
    Ok(ids)
}

fn read_coords(path: &Path, spot_ids: &[String]) -> Result<Matrix> {
    let index: HashMap<&str, usize> = spot_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let records = keyed_records(path, &index, 3)?;
    if records.len() != spot_ids.len() {
        return Err(Error::Dimension {
            file: path.to_path_buf(),
            message: format!("{} coordinate rows for {} spots", records.len(), spot_ids.len()),
        });
    }
    let mut coords = Matrix::zeros(spot_ids.len(), 2);
    let mut filled = vec![false; spot_ids.len()];
    for (line, record) in records {
        let i = *index.get(&record[0]).ok_or_else(|| Error::Dimension {
            file: path.to_path_buf(),
            message: format!("row {line}: unknown spot id `{}`", &record[0]),
        })?;
        if filled[i] {
            return Err(Error::DuplicateSpot(record[0].to_string()));
        }
        filled[i] = true;
        coords.set(i, 0, parse_number(path, &record[1], line, 2)?);
        coords.set(i, 1, parse_number(path, &record[2], line, 3)?);
    }
    Ok(coords)
}

/// Truth labels aligned to `spot_ids`. Rows for unknown spots are ignored.
pub fn read_labels(path: &Path, spot_ids: &[String]) -> Result<Vec<String>> {
    let index: HashMap<&str, usize> = spot_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut labels: Vec<Option<String>> = vec![None; spot_ids.len()];
    for (_, record) in keyed_records(path, &index, 2)? {
        if let Some(&i) = index.get(&record[0]) {
            if labels[i].is_some() {
                return Err(Error::DuplicateSpot(record[0].to_string()));
            }
            labels[i] = Some(record[1].to_string());
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            l.ok_or_else(|| Error::Dimension {
                file: path.to_path_buf(),
                message: format!("no label for spot `{}`", spot_ids[i]),
            })
        })
        .collect()
}

/// Reads a `spot_id,value` CSV as ordered pairs (header row optional).
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let mut reader = csv_reader(path)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() < 2 {
            continue;
        }
        out.push((record[0].to_string(), record[1].to_string()));
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_all(path: &Path, mut w: BufWriter<File>, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Writes raw counts in the dense CSV layout.
pub fn write_dense_csv(ds: &SpotDataset, path: &Path) -> Result<()> {
    let w = create(path)?;
    write_all(path, w, |w| {
        write!(w, "spot_id")?;
        for g in &ds.gene_symbols {
            write!(w, ",{g}")?;
        }
        writeln!(w)?;
        for (i, id) in ds.spot_ids.iter().enumerate() {
            write!(w, "{id}")?;
            for v in ds.counts.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    })
}

/// Writes raw counts as Matrix Market plus gene and spot lists.
pub fn write_matrix_market(ds: &SpotDataset, matrix: &Path, genes: &Path, spots: &Path) -> Result<()> {
    let nnz = ds.counts.data().iter().filter(|&&v| v != 0.0).count();
    let w = create(matrix)?;
    write_all(matrix, w, |w| {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {nnz}", ds.n_spots(), ds.n_genes())?;
        for i in 0..ds.n_spots() {
            for (j, &v) in ds.counts.row(i).iter().enumerate() {
                if v != 0.0 {
                    writeln!(w, "{} {} {v}", i + 1, j + 1)?;
                }
            }
        }
        Ok(())
    })?;
    write_lines(genes, &ds.gene_symbols)?;
    write_lines(spots, &ds.spot_ids)
}

pub(crate) fn write_lines(path: &Path, items: &[String]) -> Result<()> {
    let w = create(path)?;
    write_all(path, w, |w| {
        for item in items {
            writeln!(w, "{item}")?;
        }
        Ok(())
    })
}

pub fn write_coords(ds: &SpotDataset, path: &Path) -> Result<()> {
    let w = create(path)?;
    write_all(path, w, |w| {
        writeln!(w, "spot_id,x,y")?;
        for (i, id) in ds.spot_ids.iter().enumerate() {
            writeln!(w, "{id},{},{}", ds.coords.get(i, 0), ds.coords.get(i, 1))?;
        }
        Ok(())
    })
}

/// Writes `spot_id,<column>` rows.
pub fn write_pairs<T: std::fmt::Display>(path: &Path, column: &str, ids: &[String], values: &[T]) -> Result<()> {
    let w = create(path)?;
    write_all(path, w, |w| {
        writeln!(w, "spot_id,{column}")?;
        for (id, v) in ids.iter().zip(values) {
            writeln!(w, "{id},{v}")?;
        }
        Ok(())
    })
}

pub fn write_labels(ds: &SpotDataset, path: &Path) -> Result<()> {
    let labels = ds
        .truth_labels
        .as_ref()
        .ok_or_else(|| Error::Data("dataset has no truth labels".into()))?;
    write_pairs(path, "label", &ds.spot_ids, labels)
}

pub(crate) fn create_file(path: &Path) -> Result<BufWriter<File>> {
    create(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn dense_paths(dir: &Path, expr: &str, coords: &str) -> DatasetPaths {
        DatasetPaths {
            expression: write(dir, "expr.csv", expr),
            coords: write(dir, "coords.csv", coords),
            genes: None,
            spots: None,
            labels: None,
            format: ExpressionFormat::DenseCsv,
        }
    }

    fn tiny(counts: &[&[f64]]) -> SpotDataset {
        let counts = Matrix::from_rows(counts).unwrap();
        let n = counts.rows();
        let m = counts.cols();
        SpotDataset {
            counts,
            x: None,
            coords: Matrix::from_fn(n, 2, |i, j| (i * 2 + j) as f64),
            gene_symbols: (0..m).map(|j| format!("G{j}")).collect(),
            spot_ids: (0..n).map(|i| format!("s{i}")).collect(),
            truth_labels: None,
        }
    }

    #[test]
    fn zero_sum_spot_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let paths = dense_paths(
            dir.path(),
            "spot_id,A,B\ns0,1,3\ns1,3,4\ns2,0,0\n",
            "spot_id,x,y\ns0,0,0\ns1,1,0\ns2,2,0\n",
        );
        let ds = load_dataset(&paths).unwrap();
        assert_eq!(ds.n_spots(), 2);
        assert_eq!(ds.spot_ids, vec!["s0", "s1"]);
        assert_eq!(ds.coords.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn matrix_market_out_of_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths {
            expression: write(dir.path(), "m.mtx", "%%MatrixMarket matrix coordinate real general\n4 2 1\n5 1 2.0\n"),
            coords: write(dir.path(), "c.csv", "a,0,0\nb,0,1\nc,1,0\nd,1,1\n"),
            genes: Some(write(dir.path(), "g.txt", "G1\nG2\n")),
            spots: None,
            labels: None,
            format: ExpressionFormat::MatrixMarket,
        };
        match load_dataset(&paths).unwrap_err() {
            Error::OutOfBounds { row, rows, .. } => assert_eq!((row, rows), (5, 4)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn loads_ten_by_six_fixture_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut expr = String::from("spot_id,G1,G2,G3,G4,G5,G6\n");
        let mut coords = String::from("spot_id,x,y\n");
        let mut labels = String::from("spot_id,layer\n");
        for i in 0..10 {
            expr.push_str(&format!("spot{i},{},{},0,{},1,2\n", i + 1, i % 3, 2 * i));
            coords.push_str(&format!("spot{i},{},{}\n", i as f64 * 0.5, 10 - i));
            labels.push_str(&format!("spot{i},L{}\n", i / 5));
        }
        let mut paths = dense_paths(dir.path(), &expr, &coords);
        paths.labels = Some(write(dir.path(), "labels.csv", &labels));
        let ds = load_dataset(&paths).unwrap();
        assert_eq!((ds.n_spots(), ds.n_genes()), (10, 6));
        assert_eq!(ds.truth_labels.as_ref().unwrap()[7], "L1");
        assert!(ds.x.is_none());
    }

    #[test]
    fn parse_errors_carry_position() {
        let dir = tempfile::tempdir().unwrap();
        let paths = dense_paths(dir.path(), "spot_id,A,B\ns0,1,x\ns1,1,1\n", "s0,0,0\ns1,1,1\n");
        match load_dataset(&paths).unwrap_err() {
            Error::Parse { row, col, .. } => assert_eq!((row, col), (2, 3)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_spot_and_dimension_errors() {
        let dir = tempfile::tempdir().unwrap();
        let paths = dense_paths(dir.path(), "spot_id,A,B\ns0,1,1\ns0,1,1\n", "s0,0,0\ns1,1,1\n");
        assert!(matches!(load_dataset(&paths).unwrap_err(), Error::DuplicateSpot(_)));

        let paths = dense_paths(dir.path(), "spot_id,A,B\ns0,1,1\ns1,1,1\n", "s0,0,0\ns1,1,1\ns2,2,2\n");
        match load_dataset(&paths).unwrap_err() {
            Error::Dimension { file, .. } => assert!(file.ends_with("coords.csv")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn hvg_ranking_uses_index_tie_break() {
        // column variances: 0, 5, 5, 2 (population estimator over two rows)
        let s5 = 5f64.sqrt();
        let s2 = 2f64.sqrt();
        let ds = tiny(&[&[1.0, 10.0 - s5, 20.0 + s5, 3.0 - s2], &[1.0, 10.0 + s5, 20.0 - s5, 3.0 + s2]]);
        let var = gene_variances(&ds.counts);
        assert!((var[1] - 5.0).abs() < 1e-12 && (var[3] - 2.0).abs() < 1e-12);
        let sel = select_hvg(&ds, 2).unwrap();
        assert_eq!(sel.gene_symbols, vec!["G1", "G2"]);

        let same = select_hvg(&ds, 4).unwrap();
        assert_eq!(same.counts, ds.counts);
        assert_eq!(same.gene_symbols, ds.gene_symbols);
        assert!(select_hvg(&ds, 0).is_err());
        assert!(select_hvg(&ds, 5).is_err());
    }

    #[test]
    fn hvg_matches_full_sort_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..50).map(|_| rng.random_range(0..30) as f64).collect())
            .collect();
        let ds = tiny(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>());
        // oracle: two-pass variance per column, stable sort of (−var, index)
        let mut scored: Vec<(f64, usize)> = (0..50)
            .map(|j| {
                let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                let mean = col.iter().sum::<f64>() / 20.0;
                (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0, j)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut expected: Vec<String> = scored[..10].iter().map(|&(_, j)| format!("G{j}")).collect();
        expected.sort_by_key(|g| g[1..].parse::<usize>().unwrap());
        assert_eq!(select_hvg(&ds, 10).unwrap().gene_symbols, expected);
    }

    #[test]
    fn normalization_examples() {
        let ds = normalize_counts(&tiny(&[&[1.0, 1.0, 2.0], &[0.0, 3.0, 1.0]])).unwrap();
        assert_eq!(ds.normalized().unwrap().row(0), &[2500.0, 2500.0, 5000.0]);
        assert_eq!(ds.counts.row(0), &[1.0, 1.0, 2.0]);

        let single = SpotDataset {
            counts: Matrix::from_rows(&[[10000.0]]).unwrap(),
            x: None,
            coords: Matrix::zeros(1, 2),
            gene_symbols: vec!["A".into()],
            spot_ids: vec!["s".into()],
            truth_labels: None,
        };
        assert_eq!(normalize_counts(&single).unwrap().x.unwrap().data(), &[10000.0]);

        let zero = tiny(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(normalize_counts(&zero).is_err());
    }

    #[test]
    fn round_trips_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny(&[&[1.0, 0.0, 2.5], &[0.1, 7.0, 0.0], &[1e-3, 3.0, 9.0]]);
        ds.coords = Matrix::from_rows(&[[0.1, 0.2], [1.0 / 3.0, 2.0], [5e10, -1.5]]).unwrap();

        let csv_paths = DatasetPaths {
            expression: dir.path().join("e.csv"),
            coords: dir.path().join("c.csv"),
            genes: None,
            spots: None,
            labels: None,
            format: ExpressionFormat::DenseCsv,
        };
        write_dense_csv(&ds, &csv_paths.expression).unwrap();
        write_coords(&ds, &csv_paths.coords).unwrap();
        let back = load_dataset(&csv_paths).unwrap();
        assert_eq!(back, ds);
        write_dense_csv(&back, &csv_paths.expression).unwrap();
        assert_eq!(load_dataset(&csv_paths).unwrap(), back);

        let mtx_paths = DatasetPaths {
            expression: dir.path().join("m.mtx"),
            coords: csv_paths.coords.clone(),
            genes: Some(dir.path().join("genes.txt")),
            spots: Some(dir.path().join("spots.txt")),
            labels: None,
            format: ExpressionFormat::MatrixMarket,
        };
        write_matrix_market(&ds, &mtx_paths.expression, mtx_paths.genes.as_ref().unwrap(), mtx_paths.spots.as_ref().unwrap()).unwrap();
        assert_eq!(load_dataset(&mtx_paths).unwrap(), ds);
    }

    proptest! {
        #[test]
        fn normalized_rows_sum_to_scale(rows in prop::collection::vec(prop::collection::vec(0u32..500, 4), 2..8)) {
            let rows: Vec<Vec<f64>> = rows
                .into_iter()
                .map(|r| {
                    let mut r: Vec<f64> = r.into_iter().map(f64::from).collect();
                    r[0] += 1.0;
                    r
                })
                .collect();
            let ds = tiny(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>());
            let hvg = select_hvg(&ds, 3).unwrap();
            prop_assume!((0..hvg.n_spots()).all(|i| hvg.counts.row(i).iter().sum::<f64>() > 0.0));
            let norm = normalize_counts(&hvg).unwrap();
            prop_assert_eq!(norm.n_spots(), ds.n_spots());
            for i in 0..norm.n_spots() {
                let total: f64 = norm.x.as_ref().unwrap().row(i).iter().sum();
                prop_assert!((total - SCALE_FACTOR).abs() <= 1e-6 * SCALE_FACTOR);
            }
        }
    }
}
