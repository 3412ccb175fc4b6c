//! The three training objectives evaluated on small hand-made inputs.

use semst::losses::{all_negatives, correlation_reduction, sample_negatives, spatial_reg, total_loss, zinb_nll};
use semst::tensor::Matrix;

fn main() -> semst::Result<()> {
    let target = Matrix::from_rows(&[[0.0, 3.0, 1.0], [5.0, 0.0, 2.0]])?;
    let mu = Matrix::from_rows(&[[0.5, 2.5, 1.0], [4.0, 0.3, 2.0]])?;
    let theta = Matrix::filled(2, 3, 2.0);
    let pi = Matrix::filled(2, 3, 0.1);
    let zinb = zinb_nll(&target, &mu, &theta, &pi)?;
    println!("ZINB negative log-likelihood: {zinb:.6}");

    let h = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])?;
    let flipped = h.map(|v| -v);
    let cr_same = correlation_reduction(&h, &h)?;
    let cr_flip = correlation_reduction(&h, &flipped)?;
    println!("correlation reduction: same view {cr_same:.4}, negated view {cr_flip:.4}");

    let z = Matrix::from_rows(&[[1.0, 0.1], [0.9, 0.2], [-1.0, 0.3], [-0.8, -0.1], [0.2, 1.0], [0.1, 0.9]])?;
    let neighbors = vec![vec![1], vec![0], vec![3], vec![2], vec![5], vec![4]];
    let exhaustive = spatial_reg(&z, &neighbors, &all_negatives(&neighbors))?;
    let sampled = spatial_reg(&z, &neighbors, &sample_negatives(&neighbors, 100, 1))?;
    println!("spatial regularization: exhaustive {exhaustive:.4}, sampled {sampled:.4}");

    let b = total_loss(zinb, cr_flip, exhaustive, 0.1, 0.1);
    println!("total = {:.4} + 0.1 x {:.4} + 0.1 x {:.4} = {:.4}", b.zinb, b.cr, b.spatial, b.total);
    Ok(())
}
