//! Seeded k-means on well separated blobs, then the four agreement scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use semst::cluster::{evaluate, hungarian, kmeans, F1Average, KMeansConfig};
use semst::tensor::Matrix;

fn main() -> semst::Result<()> {
    let centers = [[0.0, 0.0], [6.0, 0.0], [0.0, 6.0], [6.0, 6.0]];
    let noise = Normal::new(0.0, 1.2).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..50 {
            rows.push([c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
            truth.push(format!("class{k}"));
        }
    }
    let z = Matrix::from_rows(&rows)?;
    let result = kmeans(&z, &KMeansConfig::new(4, 100))?;
    println!("inertia {:.2} from restart {}", result.inertia, result.restart);

    for avg in [F1Average::Weighted, F1Average::Macro] {
        let [ari, nmi, acc, f1] = evaluate(&truth, &result.labels, avg)?.scaled();
        println!("{avg:?}: ARI {ari:.2}  NMI {nmi:.2}  ACC {acc:.2}  F1 {f1:.2}");
    }

    let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
    println!("assignment for a 3x3 cost matrix: {:?}", hungarian(&cost));
    Ok(())
}
