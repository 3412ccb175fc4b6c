//! Weak expression signal with informative embeddings: compare the semantic
//! modulation against no semantics and the concat / add fusions.
//!
//! cargo run --release --example fusion_ablation -- [seeds] [epochs]

use semst::pipeline::{prepare_dataset, run_prepared, Ablation, RunConfig, ZinbTarget};
use semst::synth::{generate, SynthConfig};

fn main() -> semst::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let variants = [
        ("fsm", Ablation::None),
        ("w/o-llm", Ablation::WithoutLlm),
        ("concat", Ablation::Concat),
        ("add", Ablation::Add),
        ("cross-attention", Ablation::CrossAttention),
    ];
    let mut sums = vec![0.0; variants.len()];
    for seed in 100..100 + seeds {
        let synth = SynthConfig {
            grid: (20, 20),
            program_strength: 0.3,
            emb_noise: 0.5,
            seed,
            ..SynthConfig::default()
        };
        let data = generate(&synth)?;
        for (slot, (name, ablation)) in variants.iter().enumerate() {
            let config = RunConfig {
                r: 1.5,
                k_n: 10,
                log1p: true,
                zinb_target: ZinbTarget::Raw,
                gamma: 1.0,
                lambda: 1.0,
                epochs,
                seed,
                ablation: *ablation,
                ..RunConfig::default()
            };
            let prepared = prepare_dataset(&config, data.dataset.clone())?;
            let dir = std::env::temp_dir().join(format!("semst-ablation-{}", name.replace('/', "")));
            let outcome = run_prepared(&config, &prepared, &data.embeddings, &dir)?;
            let ari = outcome.metrics.map(|m| m.ari).unwrap_or(f64::NAN);
            sums[slot] += ari;
            println!("seed {seed} {name:<16} ARI {ari:.4}");
        }
    }
    println!("mean over {seeds} seed(s):");
    for ((name, _), sum) in variants.iter().zip(sums) {
        println!("  {name:<16} {:.4}", sum / seeds as f64);
    }
    Ok(())
}
