//! Synthetic spatial datasets with known domains.
//!
//! Spots sit on a unit lattice and belong to the Voronoi cell of one of `k`
//! random lattice centres. Each domain switches on its own contiguous block of
//! marker genes, counts follow a zero-inflated negative binomial, and every
//! spot carries a noisy copy of its domain's embedding prototype.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_coords, write_dense_csv, write_labels, DatasetPaths, ExpressionFormat, SpotDataset};
use crate::semantics::{write_embeddings, SemanticEmbeddings};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Lattice `(rows, cols)`.
    pub grid: (usize, usize),
    pub k_domains: usize,
    pub genes: usize,
    /// Marker genes per domain; 0 picks `genes / (2·k_domains)`.
    pub markers_per_domain: usize,
    /// Log-scale lift of a domain's markers.
    pub program_strength: f64,
    /// Per-gene log-mean baselines are uniform on this interval.
    pub baseline: (f64, f64),
    pub dropout_rate: f64,
    pub dispersion: f64,
    pub emb_dim: usize,
    pub emb_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: (30, 30),
            k_domains: 4,
            genes: 200,
            markers_per_domain: 0,
            program_strength: 2.0,
            baseline: (0.0, 1.5),
            dropout_rate: 0.1,
            dispersion: 5.0,
            emb_dim: 32,
            emb_noise: 0.5,
            seed: 100,
        }
    }
}

impl SynthConfig {
    pub fn n_spots(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn markers(&self) -> usize {
        if self.markers_per_domain > 0 {
            self.markers_per_domain
        } else {
            (self.genes / (2 * self.k_domains.max(1))).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_spots() < 2 {
            return bad(format!("grid {:?} has fewer than 2 spots", self.grid));
        }
        if self.k_domains == 0 || self.k_domains > self.n_spots() {
            return bad(format!("{} domains on {} spots", self.k_domains, self.n_spots()));
        }
        if self.genes < 2 || self.markers() * self.k_domains > self.genes {
            return bad(format!(
                "{} genes cannot hold {} marker blocks of {}",
                self.genes,
                self.k_domains,
                self.markers()
            ));
        }
        if !(self.program_strength >= 0.0 && self.program_strength.is_finite()) {
            return bad("program_strength must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)".into());
        }
        if !(self.dispersion > 0.0 && self.dispersion.is_finite()) {
            return bad("dispersion must be positive".into());
        }
        if !(self.baseline.0 <= self.baseline.1 && self.baseline.1.is_finite() && self.baseline.0.is_finite()) {
            return bad("baseline interval is empty".into());
        }
        if self.emb_dim == 0 || !(self.emb_noise >= 0.0 && self.emb_noise.is_finite()) {
            return bad("emb_dim must be positive and emb_noise non-negative".into());
        }
        Ok(())
    }
}

/// A generated dataset with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub dataset: SpotDataset,
    pub embeddings: SemanticEmbeddings,
    pub domains: Vec<usize>,
    /// Per-domain, per-gene NB mean before dropout, `k × M`.
    pub means: Matrix,
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One zero-inflated negative binomial draw via the gamma-Poisson mixture.
pub fn sample_zinb(rng: &mut ChaCha8Rng, mu: f64, theta: f64, pi: f64) -> f64 {
    if rng.random::<f64>() < pi {
        return 0.0;
    }
    let rate = Gamma::new(theta, mu / theta).expect("positive gamma parameters").sample(rng);
    if rate <= 0.0 {
        return 0.0;
    }
    Poisson::new(rate).expect("finite poisson rate").sample(rng)
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let cols = config.grid.1;
    let n = config.n_spots();
    let k = config.k_domains;
    let m = config.genes;
    let mut master = substream(config.seed, 0);

    let coords = Matrix::from_fn(n, 2, |i, j| if j == 0 { (i % cols) as f64 } else { (i / cols) as f64 });
    let centers = rand::seq::index::sample(&mut master, n, k).into_vec();
    let domains: Vec<usize> = (0..n)
        .map(|i| {
            let dist = |c: usize| {
                let dx = coords.get(i, 0) - coords.get(c, 0);
                let dy = coords.get(i, 1) - coords.get(c, 1);
                dx * dx + dy * dy
            };
            (0..k)
                .min_by(|&a, &b| dist(centers[a]).total_cmp(&dist(centers[b])).then(a.cmp(&b)))
                .expect("k >= 1")
        })
        .collect();

    let baselines: Vec<f64> = (0..m)
        .map(|_| {
            if config.baseline.0 == config.baseline.1 {
                config.baseline.0
            } else {
                master.random_range(config.baseline.0..config.baseline.1)
            }
        })
        .collect();
    let block = config.markers();
    let means = Matrix::from_fn(k, m, |d, g| {
        let marker = g >= d * block && g < (d + 1) * block;
        (baselines[g] + if marker { config.program_strength } else { 0.0 }).exp()
    });
    let prototypes = Matrix::from_fn(k, config.emb_dim, |_, _| StandardNormal.sample(&mut master));

    let spot_rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = domains[i];
            let mut rng = substream(config.seed, 1 + 2 * i as u64);
            let mut counts: Vec<f64> = (0..m)
                .map(|g| sample_zinb(&mut rng, means.get(d, g), config.dispersion, config.dropout_rate))
                .collect();
            if counts.iter().all(|&c| c == 0.0) {
                let top = (0..m)
                    .max_by(|&a, &b| means.get(d, a).total_cmp(&means.get(d, b)).then(b.cmp(&a)))
                    .expect("m >= 2");
                counts[top] = 1.0;
            }
            let mut rng = substream(config.seed, 2 + 2 * i as u64);
            let emb = (0..config.emb_dim)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    prototypes.get(d, j) + config.emb_noise * z
                })
                .collect();
            (counts, emb)
        })
        .collect();

    let width = (n.max(2) - 1).to_string().len();
    let spot_ids: Vec<String> = (0..n).map(|i| format!("spot{:0width$}", i)).collect();
    let gene_symbols: Vec<String> = (0..m)
        .map(|g| match g / block {
            d if d < k => format!("D{d}M{}", g % block),
            _ => format!("BG{g}"),
        })
        .collect();
    let (count_rows, emb_rows): (Vec<Vec<f64>>, Vec<Vec<f64>>) = spot_rows.into_iter().unzip();
    let dataset = SpotDataset {
        counts: Matrix::from_vec(n, m, count_rows.concat())?,
        x: None,
        coords,
        gene_symbols,
        spot_ids: spot_ids.clone(),
        truth_labels: Some(domains.iter().map(|d| format!("domain{d}")).collect()),
    };
    dataset.validate()?;
    Ok(SynthData {
        dataset,
        embeddings: SemanticEmbeddings {
            matrix: Matrix::from_vec(n, config.emb_dim, emb_rows.concat())?,
            spot_ids,
            provider_tag: "synthetic".into(),
        },
        domains,
        means,
    })
}

/// File locations of a dataset written by [`write_synth`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFiles {
    pub paths: DatasetPaths,
    pub embeddings: PathBuf,
    pub config: PathBuf,
}

/// Writes `counts.csv`, `coords.csv`, `labels.csv`, `embeddings.txt` and `synth.json`.
pub fn write_synth(data: &SynthData, config: &SynthConfig, dir: &Path) -> Result<SynthFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths {
        expression: dir.join("counts.csv"),
        coords: dir.join("coords.csv"),
        genes: None,
        spots: None,
        labels: Some(dir.join("labels.csv")),
        format: ExpressionFormat::DenseCsv,
    };
    write_dense_csv(&data.dataset, &paths.expression)?;
    write_coords(&data.dataset, &paths.coords)?;
    write_labels(&data.dataset, paths.labels.as_ref().expect("set above"))?;
    let embeddings = dir.join("embeddings.txt");
    write_embeddings(&data.embeddings, &embeddings)?;
    let config_path = dir.join("synth.json");
    let json = serde_json::to_string_pretty(config).expect("config serializes");
    std::fs::write(&config_path, json).map_err(|e| Error::io(&config_path, e))?;
    Ok(SynthFiles {
        paths,
        embeddings,
        config: config_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ari, kmeans, KMeansConfig};

    #[test]
    fn noiseless_prototypes_are_recovered_exactly() {
        let config = SynthConfig {
            grid: (12, 12),
            genes: 40,
            program_strength: 0.0,
            emb_noise: 0.0,
            ..SynthConfig::default()
        };
        let data = generate(&config).unwrap();
        let res = kmeans(&data.embeddings.matrix, &KMeansConfig::new(config.k_domains, 100)).unwrap();
        assert_eq!(ari(&data.domains, &res.labels).unwrap(), 1.0);
        let mut seen = data.domains.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), config.k_domains);
    }

    #[test]
    fn poisson_limit_zero_fraction() {
        let mut rng = substream(7, 0);
        let mu = 1.3;
        let draws = 100_000;
        let zeros = (0..draws).filter(|_| sample_zinb(&mut rng, mu, 1e7, 0.0) == 0.0).count();
        let frac = zeros as f64 / draws as f64;
        assert!((frac - (-mu as f64).exp()).abs() < 0.02, "{frac}");
    }

    #[test]
    fn seeded_generation_is_identical() {
        let config = SynthConfig {
            grid: (8, 9),
            genes: 30,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&config).unwrap(), generate(&config).unwrap());
        let other = SynthConfig { seed: 101, ..config.clone() };
        assert_ne!(generate(&config).unwrap().dataset.counts, generate(&other).unwrap().dataset.counts);
    }

    #[test]
    fn domain_gene_means_match_the_zinb_mean() {
        let config = SynthConfig {
            grid: (100, 100),
            k_domains: 2,
            genes: 8,
            markers_per_domain: 2,
            program_strength: 1.0,
            dropout_rate: 0.2,
            dispersion: 3.0,
            emb_dim: 2,
            ..SynthConfig::default()
        };
        let data = generate(&config).unwrap();
        let theta = config.dispersion;
        let pi = config.dropout_rate;
        for d in 0..2 {
            let members: Vec<usize> = (0..config.n_spots()).filter(|&i| data.domains[i] == d).collect();
            for g in 0..config.genes {
                let mu = data.means.get(d, g);
                let mean_expected = (1.0 - pi) * mu;
                // ZINB variance: (1−π)μ(1 + μ/θ + πμ)
                let var = (1.0 - pi) * mu * (1.0 + mu / theta + pi * mu);
                let values: Vec<f64> = members.iter().map(|&i| data.dataset.counts.get(i, g)).collect();
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let se = (var / values.len() as f64).sqrt();
                assert!((mean - mean_expected).abs() < 3.0 * se + 1e-3, "domain {d} gene {g}: {mean} vs {mean_expected}");
            }
        }
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            grid: (6, 7),
            genes: 24,
            ..SynthConfig::default()
        };
        let data = generate(&config).unwrap();
        let files = write_synth(&data, &config, dir.path()).unwrap();
        let loaded = crate::ingest::load_dataset(&files.paths).unwrap();
        assert_eq!(loaded.counts, data.dataset.counts);
        assert_eq!(loaded.truth_labels, data.dataset.truth_labels);
        let emb = crate::semantics::read_embeddings(&files.embeddings).unwrap();
        assert_eq!(emb.matrix, data.embeddings.matrix);
        assert!(generate(&SynthConfig { k_domains: 0, ..config.clone() }).is_err());
        assert!(generate(&SynthConfig { dropout_rate: 1.0, ..config }).is_err());
    }
}
