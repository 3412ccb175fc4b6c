//! Per-spot gene prompts and the semantic embeddings derived from them.
//!
//! Each spot is described by its most highly expressed genes. The resulting
//! prompt is handed to an [`EmbeddingProvider`], which may read precomputed
//! vectors from disk, call a remote embedding service, derive a deterministic
//! pseudo-embedding from the prompt text, or return zeros.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::SpotDataset;
use crate::tensor::Matrix;

/// System message shared by every spot prompt.
pub const SYSTEM_PROMPT: &str = "You are an expert in bioinformatics. Represent the biological state of a cell characterized by the following highly expressed genes. Focus on capturing the functional essence relevant for spatial domain identification.";

const USER_PREFIX: &str = "Highly expressed genes: ";

/// Variance of the hash provider's pseudo-embeddings.
pub const HASH_EMBEDDING_VARIANCE: f64 = 0.85;

/// Environment variable overriding the HTTP embedding cache directory.
pub const CACHE_ENV: &str = "SEMST_EMBED_CACHE";

const TEXT_MAGIC: &str = "semst-emb";
const BINARY_MAGIC: &[u8; 4] = b"SEMB";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpotPrompt {
    pub spot_id: String,
    pub gene_list: Vec<String>,
    pub system_text: String,
    pub user_text: String,
}

/// Spot-aligned embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbeddings {
    pub matrix: Matrix,
    pub spot_ids: Vec<String>,
    pub provider_tag: String,
}

impl SemanticEmbeddings {
    pub fn d_prime(&self) -> usize {
        self.matrix.cols()
    }

    /// Rows reordered to follow `spot_ids`.
    pub fn aligned_to(&self, spot_ids: &[String]) -> Result<SemanticEmbeddings> {
        let index: HashMap<&str, usize> = self.spot_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut rows = Vec::with_capacity(spot_ids.len());
        let mut missing = Vec::new();
        for id in spot_ids {
            match index.get(id.as_str()) {
                Some(&i) => rows.push(i),
                None => missing.push(id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Provider {
                message: "no embedding for some spots".into(),
                failed_spots: missing,
            });
        }
        Ok(SemanticEmbeddings {
            matrix: self.matrix.select_rows(&rows),
            spot_ids: spot_ids.to_vec(),
            provider_tag: self.provider_tag.clone(),
        })
    }
}

/// The `min(k_g, M)` symbols with the largest expression, descending.
/// Ties go to the lower gene index.
pub fn top_genes(expression: &[f64], symbols: &[String], k_g: usize) -> Result<Vec<String>> {
    if k_g == 0 {
        return Err(Error::InvalidArgument("k_g must be at least 1".into()));
    }
    if expression.len() != symbols.len() {
        return Err(Error::InvalidArgument(format!(
            "{} expression values for {} gene symbols",
            expression.len(),
            symbols.len()
        )));
    }
    let mut order: Vec<usize> = (0..expression.len()).collect();
    order.sort_by(|&a, &b| expression[b].total_cmp(&expression[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k_g)
        .map(|j| symbols[j].clone())
        .collect())
}

pub fn build_prompt(spot_id: &str, gene_list: Vec<String>) -> Result<SpotPrompt> {
    if gene_list.is_empty() {
        return Err(Error::InvalidArgument(format!("empty gene list for spot `{spot_id}`")));
    }
    let user_text = format!("{USER_PREFIX}{}.", gene_list.join(", "));
    Ok(SpotPrompt {
        spot_id: spot_id.to_string(),
        gene_list,
        system_text: SYSTEM_PROMPT.to_string(),
        user_text,
    })
}

/// Prompts for every spot, ranking genes by raw counts.
pub fn build_prompts(ds: &SpotDataset, k_g: usize) -> Result<Vec<SpotPrompt>> {
    (0..ds.n_spots())
        .map(|i| {
            let genes = top_genes(ds.counts.row(i), &ds.gene_symbols, k_g)?;
            build_prompt(&ds.spot_ids[i], genes)
        })
        .collect()
}

/// A source of per-spot semantic vectors.
pub trait EmbeddingProvider: Send + Sync {
    /// Identifies the provider and its configuration.
    fn tag(&self) -> String;

    /// One vector per prompt, in prompt order.
    fn embed(&self, prompts: &[SpotPrompt]) -> Result<Vec<Vec<f64>>>;

    /// Whether all-zero rows are legitimate output.
    fn allows_zero_rows(&self) -> bool {
        false
    }
}

pub fn embed_spots(provider: &dyn EmbeddingProvider, prompts: &[SpotPrompt]) -> Result<SemanticEmbeddings> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts to embed".into()));
    }
    let rows = provider.embed(prompts)?;
    if rows.len() != prompts.len() {
        return Err(Error::Provider {
            message: format!("{} embeddings returned for {} prompts", rows.len(), prompts.len()),
            failed_spots: vec![],
        });
    }
    let width = rows[0].len();
    let mut bad = Vec::new();
    for (row, prompt) in rows.iter().zip(prompts) {
        let broken = row.len() != width
            || row.iter().any(|v| !v.is_finite())
            || (!provider.allows_zero_rows() && row.iter().all(|&v| v == 0.0));
        if broken {
            bad.push(prompt.spot_id.clone());
        }
    }
    if width == 0 || !bad.is_empty() {
        return Err(Error::Provider {
            message: format!("embeddings must be finite, nonzero and {width} wide"),
            failed_spots: bad,
        });
    }
    Ok(SemanticEmbeddings {
        matrix: Matrix::from_vec(rows.len(), width, rows.into_iter().flatten().collect())?,
        spot_ids: prompts.iter().map(|p| p.spot_id.clone()).collect(),
        provider_tag: provider.tag(),
    })
}

/// Centers every column and scales it to unit variance across spots.
/// Constant columns become zero.
pub fn standardize_columns(m: &Matrix) -> Matrix {
    let (n, d) = m.shape();
    let mut out = m.clone();
    for j in 0..d {
        let col = m.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            let centered = m.get(i, j) - mean;
            out.set(i, j, if sd > 0.0 { centered / sd } else { 0.0 });
        }
    }
    out
}

/// Precomputed embeddings keyed by spot id.
pub struct FileEmbeddingProvider {
    path: PathBuf,
    table: SemanticEmbeddings,
    index: HashMap<String, usize>,
}

impl FileEmbeddingProvider {
    pub fn open(path: &Path) -> Result<Self> {
        let table = read_embeddings(path)?;
        let index = table.spot_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(FileEmbeddingProvider {
            path: path.to_path_buf(),
            table,
            index,
        })
    }

    /// Opens an id list paired with a separate matrix; see [`read_embedding_parts`].
    pub fn open_parts(ids: &Path, matrix: &Path) -> Result<Self> {
        let table = read_embedding_parts(ids, matrix)?;
        let index = table.spot_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(FileEmbeddingProvider {
            path: matrix.to_path_buf(),
            table,
            index,
        })
    }
}

impl EmbeddingProvider for FileEmbeddingProvider {
    fn tag(&self) -> String {
        format!("file:{}", self.path.display())
    }

    fn embed(&self, prompts: &[SpotPrompt]) -> Result<Vec<Vec<f64>>> {
        let missing: Vec<String> = prompts
            .iter()
            .filter(|p| !self.index.contains_key(&p.spot_id))
            .map(|p| p.spot_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Provider {
                message: format!("{} has no row for some spots", self.path.display()),
                failed_spots: missing,
            });
        }
        Ok(prompts
            .iter()
            .map(|p| self.table.matrix.row(self.index[&p.spot_id]).to_vec())
            .collect())
    }
}

/// Deterministic pseudo-embeddings seeded from a hash of the full prompt.
#[derive(Clone, Debug)]
pub struct HashEmbeddingProvider {
    pub d_prime: usize,
    pub seed: u64,
}

impl HashEmbeddingProvider {
    pub fn vector(&self, prompt: &SpotPrompt) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(prompt.system_text.as_bytes());
        hasher.update([0u8]);
        hasher.update(prompt.user_text.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        let sd = HASH_EMBEDDING_VARIANCE.sqrt();
        (0..self.d_prime)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sd * z
            })
            .collect()
    }
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn tag(&self) -> String {
        format!("hash:d={}:seed={}", self.d_prime, self.seed)
    }

    fn embed(&self, prompts: &[SpotPrompt]) -> Result<Vec<Vec<f64>>> {
        Ok(prompts.iter().map(|p| self.vector(p)).collect())
    }
}

/// All-zero embeddings, which remove the semantic input.
#[derive(Clone, Debug)]
pub struct NullProvider {
    pub d_prime: usize,
}

impl EmbeddingProvider for NullProvider {
    fn tag(&self) -> String {
        format!("null:d={}", self.d_prime)
    }

    fn embed(&self, prompts: &[SpotPrompt]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![0.0; self.d_prime]; prompts.len()])
    }

    fn allows_zero_rows(&self) -> bool {
        true
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    system: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedItem>,
}

#[derive(Deserialize)]
struct EmbedItem {
    embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL; requests go to `{endpoint}/embed`.
    pub endpoint: String,
    pub model: String,
    pub batch_size: usize,
    pub max_retries: u32,
    /// First retry delay; doubled on each further attempt.
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: "http://127.0.0.1:8080".into(),
            model: "embedding-model".into(),
            batch_size: 32,
            max_retries: 4,
            backoff_ms: 500,
            timeout_secs: 120,
        }
    }
}

/// Cache directory from `SEMST_EMBED_CACHE`, else `.semst-cache/embeddings`.
pub fn default_cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".semst-cache").join("embeddings"))
}

/// Remote embedding service with batching, retries and a content-addressed disk cache.
pub struct HttpEmbeddingProvider {
    config: HttpConfig,
    cache_dir: PathBuf,
    agent: ureq::Agent,
    memory: Mutex<HashMap<String, Vec<f64>>>,
    requests: AtomicUsize,
}

impl HttpEmbeddingProvider {
    pub fn new(config: HttpConfig, cache_dir: PathBuf) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("http batch size must be positive".into()));
        }
        let agent_config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build();
        Ok(HttpEmbeddingProvider {
            config,
            cache_dir,
            agent: ureq::Agent::new_with_config(agent_config),
            memory: Mutex::new(HashMap::new()),
            requests: AtomicUsize::new(0),
        })
    }

    /// Number of HTTP requests issued so far, retries included.
    pub fn requests_issued(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Content hash of `(model, system, user)`.
    pub fn cache_key(&self, prompt: &SpotPrompt) -> String {
        let mut hasher = Sha256::new();
        for part in [&self.config.model, &prompt.system_text, &prompt.user_text] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn cache_path(&self, key: &str) -> PathBuf {
        self.cache_dir.join(format!("{key}.json"))
    }

    fn load_cached(&self, key: &str) -> Option<Vec<f64>> {
        if let Some(v) = self.memory.lock().expect("cache lock").get(key) {
            return Some(v.clone());
        }
        let text = fs::read_to_string(self.cache_path(key)).ok()?;
        let v: Vec<f64> = serde_json::from_str(&text).ok()?;
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), v.clone());
        Some(v)
    }

    /// Write-once-then-rename, so concurrent writers never expose partial files.
    fn store(&self, key: &str, v: &[f64]) -> Result<()> {
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), v.to_vec());
        fs::create_dir_all(&self.cache_dir).map_err(|e| Error::io(&self.cache_dir, e))?;
        let target = self.cache_path(key);
        if target.exists() {
            return Ok(());
        }
        let tmp = self.cache_dir.join(format!(
            "{key}.{}.{:?}.tmp",
            std::process::id(),
            std::thread::current().id()
        ));
        let body = serde_json::to_string(v).expect("f64 vectors serialize");
        fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))
    }

    fn request(&self, system: &str, inputs: &[&SpotPrompt]) -> Result<Vec<Vec<f64>>> {
        let url = format!("{}/embed", self.config.endpoint.trim_end_matches('/'));
        let body = EmbedRequest {
            model: &self.config.model,
            system,
            input: inputs.iter().map(|p| p.user_text.as_str()).collect(),
        };
        let failed = || inputs.iter().map(|p| p.spot_id.clone()).collect::<Vec<_>>();
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            self.requests.fetch_add(1, Ordering::SeqCst);
            let mut response = match self.agent.post(&url).send_json(&body) {
                Ok(r) => r,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = response.status().as_u16();
            if status == 429 || status >= 500 {
                last_error = format!("HTTP {status}");
                continue;
            }
            if status != 200 {
                return Err(Error::Provider {
                    message: format!("{url} answered HTTP {status}"),
                    failed_spots: failed(),
                });
            }
            let parsed: EmbedResponse = response.body_mut().read_json().map_err(|e| Error::Provider {
                message: format!("malformed response from {url}: {e}"),
                failed_spots: failed(),
            })?;
            if parsed.data.len() != inputs.len() {
                return Err(Error::Provider {
                    message: format!("{} embeddings returned for {} inputs", parsed.data.len(), inputs.len()),
                    failed_spots: failed(),
                });
            }
            return Ok(parsed.data.into_iter().map(|d| d.embedding).collect());
        }
        Err(Error::Provider {
            message: format!("{url} failed after {} retries: {last_error}", self.config.max_retries),
            failed_spots: failed(),
        })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn tag(&self) -> String {
        format!("http:{}:{}", self.config.endpoint, self.config.model)
    }

    fn embed(&self, prompts: &[SpotPrompt]) -> Result<Vec<Vec<f64>>> {
        let keys: Vec<String> = prompts.iter().map(|p| self.cache_key(p)).collect();
        let mut pending: Vec<usize> = Vec::new();
        let mut queued: HashMap<&str, ()> = HashMap::new();
        for (i, key) in keys.iter().enumerate() {
            if self.load_cached(key).is_none() && queued.insert(key.as_str(), ()).is_none() {
                pending.push(i);
            }
        }
        // group by system text so each request carries a single system string
        let mut by_system: Vec<(&str, Vec<usize>)> = Vec::new();
        for &i in &pending {
            let system = prompts[i].system_text.as_str();
            match by_system.iter_mut().find(|(s, _)| *s == system) {
                Some((_, group)) => group.push(i),
                None => by_system.push((system, vec![i])),
            }
        }
        let mut width: Option<usize> = None;
        for (system, group) in by_system {
            for chunk in group.chunks(self.config.batch_size) {
                let batch: Vec<&SpotPrompt> = chunk.iter().map(|&i| &prompts[i]).collect();
                let vectors = self.request(system, &batch)?;
                for (&i, v) in chunk.iter().zip(vectors) {
                    match width {
                        Some(w) if w != v.len() => {
                            return Err(Error::Provider {
                                message: format!("embedding width changed from {w} to {}", v.len()),
                                failed_spots: chunk.iter().map(|&k| prompts[k].spot_id.clone()).collect(),
                            })
                        }
                        _ => width = Some(v.len()),
                    }
                    self.store(&keys[i], &v)?;
                }
            }
        }
        keys.iter()
            .zip(prompts)
            .map(|(k, p)| {
                self.load_cached(k).ok_or_else(|| Error::Provider {
                    message: "embedding missing from cache".into(),
                    failed_spots: vec![p.spot_id.clone()],
                })
            })
            .collect()
    }
}

/// Reads either embedding file layout, detected from the leading bytes.
pub fn read_embeddings(path: &Path) -> Result<SemanticEmbeddings> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    let got = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    drop(file);
    if got == 4 && &magic == BINARY_MAGIC {
        read_embeddings_binary(path)
    } else {
        read_embeddings_text(path)
    }
}

/// Reads embeddings stored as a spot-id list (one id per line) and a matrix
/// with one row per id. A `.csv` or `.txt` matrix holds comma-separated rows;
/// anything else is raw little-endian `f64` in row-major order.
pub fn read_embedding_parts(ids_path: &Path, matrix_path: &Path) -> Result<SemanticEmbeddings> {
    let ids: Vec<String> = fs::read_to_string(ids_path)
        .map_err(|e| Error::io(ids_path, e))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let n = ids.len();
    let dim_error = |message: String| Error::Dimension {
        file: matrix_path.to_path_buf(),
        message,
    };
    let text = matches!(
        matrix_path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("csv" | "txt")
    );
    let matrix = if text {
        let content = fs::read_to_string(matrix_path).map_err(|e| Error::io(matrix_path, e))?;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (r, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
            match parsed {
                Ok(v) => rows.push(v),
                // a non-numeric first line is a header
                Err(_) if r == 0 => continue,
                Err(e) => return Err(parse_error(matrix_path, r + 1, 0, e.to_string())),
            }
        }
        if rows.len() != n {
            return Err(dim_error(format!("{} rows for {} spot ids", rows.len(), n)));
        }
        let d = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|row| row.len() != d) {
            return Err(dim_error(format!("row {} has {} values, expected {d}", r + 1, rows[r].len())));
        }
        Matrix::from_vec(n, d, rows.concat())?
    } else {
        let bytes = fs::read(matrix_path).map_err(|e| Error::io(matrix_path, e))?;
        if n == 0 || bytes.len() % (8 * n) != 0 {
            return Err(dim_error(format!("{} bytes do not split into {} rows of f64", bytes.len(), n)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(n, bytes.len() / (8 * n), data)?
    };
    Ok(SemanticEmbeddings {
        matrix,
        spot_ids: ids,
        provider_tag: format!("file:{}", matrix_path.display()),
    })
}

fn parse_error(path: &Path, row: usize, col: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: path.to_path_buf(),
        row,
        col,
        message: message.into(),
    }
}

fn read_embeddings_text(path: &Path) -> Result<SemanticEmbeddings> {
    let reader = BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_error(path, 1, 1, "missing header"))?
        .map_err(|e| Error::io(path, e))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != TEXT_MAGIC || fields[1] != "v1" {
        return Err(parse_error(path, 1, 1, "expected `semst-emb v1 N d`"));
    }
    let n: usize = fields[2].parse().map_err(|_| parse_error(path, 1, 3, "bad row count"))?;
    let d: usize = fields[3].parse().map_err(|_| parse_error(path, 1, 4, "bad width"))?;
    let mut ids = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for (r, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = r + 2;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != d + 1 {
            return Err(Error::Dimension {
                file: path.to_path_buf(),
                message: format!("line {row} has {} values, expected {d}", tokens.len().saturating_sub(1)),
            });
        }
        ids.push(tokens[0].to_string());
        for (c, t) in tokens[1..].iter().enumerate() {
            let v: f64 = t
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| parse_error(path, row, c + 2, format!("`{t}` is not a finite number")))?;
            data.push(v);
        }
    }
    if ids.len() != n {
        return Err(Error::Dimension {
            file: path.to_path_buf(),
            message: format!("header declares {n} rows, found {}", ids.len()),
        });
    }
    Ok(SemanticEmbeddings {
        matrix: Matrix::from_vec(n, d, data)?,
        spot_ids: ids,
        provider_tag: format!("file:{}", path.display()),
    })
}

fn read_embeddings_binary(path: &Path) -> Result<SemanticEmbeddings> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = || Error::Dimension {
        file: path.to_path_buf(),
        message: "truncated binary embedding file".into(),
    };
    let mut pos = 4usize;
    let mut take = |len: usize| -> Result<&[u8]> {
        let slice = bytes.get(pos..pos + len).ok_or_else(truncated)?;
        pos += len;
        Ok(slice)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let n = u32_at(take(4)?);
    let d = u32_at(take(4)?);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
    }
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u32_at(take(4)?);
        let id = std::str::from_utf8(take(len)?).map_err(|_| parse_error(path, 0, 0, "spot id is not UTF-8"))?;
        ids.push(id.to_string());
    }
    Ok(SemanticEmbeddings {
        matrix: Matrix::from_vec(n, d, data)?,
        spot_ids: ids,
        provider_tag: format!("file:{}", path.display()),
    })
}

fn check_ids(emb: &SemanticEmbeddings) -> Result<()> {
    if emb.spot_ids.len() != emb.matrix.rows() {
        return Err(Error::Data("embedding spot ids disagree with row count".into()));
    }
    if let Some(bad) = emb.spot_ids.iter().find(|s| s.is_empty() || s.chars().any(char::is_whitespace)) {
        return Err(Error::Data(format!("spot id `{bad}` cannot be stored in an embedding file")));
    }
    Ok(())
}

pub fn write_embeddings_text(emb: &SemanticEmbeddings, path: &Path) -> Result<()> {
    check_ids(emb)?;
    let mut w = crate::ingest::create_file(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "{TEXT_MAGIC} v1 {} {}", emb.matrix.rows(), emb.matrix.cols())?;
        for (i, id) in emb.spot_ids.iter().enumerate() {
            write!(w, "{id}")?;
            for v in emb.matrix.row(i) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn write_embeddings_binary(emb: &SemanticEmbeddings, path: &Path) -> Result<()> {
    check_ids(emb)?;
    let mut buf = Vec::with_capacity(12 + emb.matrix.data().len() * 8);
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&(emb.matrix.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(emb.matrix.cols() as u32).to_le_bytes());
    for v in emb.matrix.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for id in &emb.spot_ids {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    let mut w = crate::ingest::create_file(path)?;
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Writes the binary layout for `.semb` paths and the text layout otherwise.
pub fn write_embeddings(emb: &SemanticEmbeddings, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "semb") {
        write_embeddings_binary(emb, path)
    } else {
        write_embeddings_text(emb, path)
    }
}
