//! Drive the training loop directly, watch the loss terms, then save and
//! reload the parameters.

use std::sync::Arc;

use semst::graph::{build_feature_graph, build_spatial_graph, neighbor_sets, normalize_adjacency};
use semst::ingest::{log1p_transform, normalize_counts};
use semst::model::{forward, ModelInputs, ModelParams, ModelShape};
use semst::semantics::standardize_columns;
use semst::synth::{generate, SynthConfig};
use semst::train::{train, TrainConfig};

fn main() -> semst::Result<()> {
    let data = generate(&SynthConfig {
        grid: (15, 15),
        genes: 80,
        ..SynthConfig::default()
    })?;
    let ds = log1p_transform(&normalize_counts(&data.dataset)?)?;
    let x = ds.normalized()?;
    let spatial = build_spatial_graph(&ds.coords, 1.5)?;
    let feature = build_feature_graph(x, 8)?;
    let inputs = ModelInputs::new(
        x,
        Arc::new(normalize_adjacency(&spatial)?.to_csr()),
        Arc::new(normalize_adjacency(&feature)?.to_csr()),
        standardize_columns(&data.embeddings.matrix),
    )?;
    let shape = ModelShape::new(ds.n_genes(), data.embeddings.d_prime());
    let params = ModelParams::init(shape, 100)?;
    let target = Arc::new(ds.counts.clone());
    let config = TrainConfig {
        epochs: 60,
        ..TrainConfig::default()
    };
    let outcome = train(&inputs, &target, &neighbor_sets(&spatial), params, &config, |epoch, b| {
        if epoch % 15 == 0 || epoch == 1 {
            println!("epoch {epoch:>3}: zinb {:.1}  cr {:.4}  spatial {:.2}  total {:.1}", b.zinb, b.cr, b.spatial, b.total);
        }
    });
    if let Some(e) = outcome.failure {
        return Err(e);
    }

    let path = std::env::temp_dir().join("semst-example.semp");
    outcome.params.save(&path)?;
    let loaded = ModelParams::load(&path, shape)?;
    let a = forward(&inputs, &outcome.params)?;
    let b = forward(&inputs, &loaded)?;
    println!("checkpoint {} reloads to identical outputs: {}", path.display(), a == b);
    Ok(())
}
