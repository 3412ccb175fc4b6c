//! Spatial radius graph, cosine KNN graph and their symmetric normalization.

use semst::graph::{build_feature_graph, build_spatial_graph, neighbor_sets, normalize_adjacency};
use semst::ingest::{log1p_transform, normalize_counts};
use semst::synth::{generate, SynthConfig};

fn main() -> semst::Result<()> {
    let data = generate(&SynthConfig {
        grid: (12, 12),
        ..SynthConfig::default()
    })?;
    let ds = log1p_transform(&normalize_counts(&data.dataset)?)?;

    for r in [1.0, 1.5, 2.0] {
        let g = build_spatial_graph(&ds.coords, r)?;
        let sizes: Vec<usize> = neighbor_sets(&g).iter().map(Vec::len).collect();
        println!(
            "r = {r}: {} directed edges, neighbours per spot {}..{}",
            g.edges().len(),
            sizes.iter().min().unwrap(),
            sizes.iter().max().unwrap()
        );
    }

    let knn = build_feature_graph(ds.normalized()?, 8)?;
    let same_domain = knn
        .edges()
        .iter()
        .filter(|&&(i, j)| data.domains[i] == data.domains[j])
        .count();
    println!(
        "KNN k=8: {} edges, symmetric: {}, {:.1}% within a domain",
        knn.edges().len(),
        knn.is_symmetric(),
        100.0 * same_domain as f64 / knn.edges().len() as f64
    );

    let a_hat = normalize_adjacency(&knn)?;
    let dense = a_hat.to_dense();
    let row0: f64 = dense.row(0).iter().sum();
    println!(
        "normalized: {} stored entries (self-loops included), row 0 sums to {row0:.4}",
        a_hat.edges().len()
    );
    Ok(())
}
