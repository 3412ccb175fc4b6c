//! Generate a lattice with four domains, run the full pipeline in memory and
//! score the recovered clusters.
//!
//! cargo run --example synthetic_domains -- [epochs]

use semst::pipeline::{prepare_dataset, run_prepared, RunConfig, ZinbTarget};
use semst::synth::{generate, SynthConfig};

fn main() -> semst::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let synth = SynthConfig {
        grid: (24, 24),
        ..SynthConfig::default()
    };
    let data = generate(&synth)?;
    println!(
        "{} spots, {} genes, {} domains",
        data.dataset.n_spots(),
        data.dataset.n_genes(),
        synth.k_domains
    );

    let config = RunConfig {
        r: 1.5,
        k_n: 10,
        log1p: true,
        zinb_target: ZinbTarget::Raw,
        epochs,
        ..RunConfig::default()
    };
    let prepared = prepare_dataset(&config, data.dataset)?;
    let out = std::env::temp_dir().join("semst-synthetic-domains");
    let outcome = run_prepared(&config, &prepared, &data.embeddings, &out)?;

    let first = outcome.losses.first().map(|(_, b)| b.total).unwrap_or(f64::NAN);
    let last = outcome.losses.last().map(|(_, b)| b.total).unwrap_or(f64::NAN);
    println!("loss {first:.1} -> {last:.1} over {epochs} epochs ({:.1}s)", outcome.seconds);
    if let Some(m) = outcome.metrics {
        let [ari, nmi, acc, f1] = m.scaled();
        println!("ARI {ari:.2}  NMI {nmi:.2}  ACC {acc:.2}  F1 {f1:.2}");
    }
    println!("run artifacts in {}", out.display());
    Ok(())
}
