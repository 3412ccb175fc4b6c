//! Apply the semantic modulation module to a latent matrix produced elsewhere.
//!
//! At initialization the module is the identity; once its output layer moves,
//! each spot gets its own scale and shift driven by its embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semst::model::{fsm_modulate, FsmParams};
use semst::tensor::Matrix;

fn main() -> semst::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d_z, d_prime) = (6, 4, 10);
    let latent = Matrix::from_fn(n, d_z, |_, _| rng.random_range(-1.0..1.0));
    let semantic = Matrix::from_fn(n, d_prime, |_, _| rng.random_range(-1.0..1.0));

    let mut fsm = FsmParams::init(d_z, d_prime, 32, false, &mut rng);
    fsm.w = Matrix::identity(d_z);
    let out = fsm_modulate(&latent, &semantic, &fsm)?;
    println!("identity at init: {}", out == latent);

    fsm.w2 = Matrix::from_fn(fsm.w2.rows(), fsm.w2.cols(), |_, _| rng.random_range(-0.3..0.3));
    let out = fsm_modulate(&latent, &semantic, &fsm)?;
    for i in 0..n {
        let before: Vec<String> = latent.row(i).iter().map(|v| format!("{v:+.3}")).collect();
        let after: Vec<String> = out.row(i).iter().map(|v| format!("{v:+.3}")).collect();
        println!("spot {i}: [{}] -> [{}]", before.join(" "), after.join(" "));
    }
    Ok(())
}
