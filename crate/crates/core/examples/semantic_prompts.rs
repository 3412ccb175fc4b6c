//! Turn each spot's top genes into a prompt, embed it with the deterministic
//! hash provider and store the vectors in both embedding file formats.

use semst::ingest::normalize_counts;
use semst::semantics::{
    build_prompts, embed_spots, read_embeddings, standardize_columns, write_embeddings, HashEmbeddingProvider,
    SYSTEM_PROMPT,
};
use semst::synth::{generate, SynthConfig};

fn main() -> semst::Result<()> {
    let data = generate(&SynthConfig {
        grid: (10, 10),
        ..SynthConfig::default()
    })?;
    let ds = normalize_counts(&data.dataset)?;
    let prompts = build_prompts(&ds, 8)?;

    println!("system: {SYSTEM_PROMPT}");
    for (p, domain) in prompts.iter().zip(&data.domains).take(3) {
        println!("{} (domain {domain}): {}", p.spot_id, p.user_text);
    }

    let provider = HashEmbeddingProvider { d_prime: 64, seed: 100 };
    let emb = embed_spots(&provider, &prompts)?;
    let h = standardize_columns(&emb.matrix);
    println!("{} x {} embeddings from {}", h.rows(), h.cols(), emb.provider_tag);

    let dir = std::env::temp_dir().join("semst-prompts");
    for name in ["embeddings.txt", "embeddings.semb"] {
        let path = dir.join(name);
        write_embeddings(&emb, &path)?;
        let back = read_embeddings(&path)?;
        let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        println!("{}: {bytes} bytes, round trip exact: {}", path.display(), back.matrix == emb.matrix);
    }
    Ok(())
}
