//! Frame AUC with ties, group-level AUC and silhouette on hand-sized inputs.
//!
//! Run with `cargo run --example metrics`.

use gsd_core::linalg::DenseMatrix;
use gsd_core::metrics::{accuracy, group_auc, roc_auc, silhouette};

fn main() -> gsd_core::Result<()> {
    let scores = [0.9, 0.8, 0.8, 0.3, 0.6, 0.1, 0.8, 0.2];
    let labels = [1u8, 1, 0, 0, 1, 1, 0, 0];
    let groups = [0usize, 0, 1, 1, 2, 2, 3, 3];
    println!("frame AUC   {:.4}", roc_auc(&scores, &labels)?);
    println!("group AUC   {:.4}", group_auc(&scores, &labels, &groups)?);
    let logits: Vec<f64> = scores.iter().map(|s| (s / (1.0 - s)).ln()).collect();
    println!("accuracy    {:.4}", accuracy(&logits, &labels)?);

    let points = DenseMatrix::from_rows(&[[0.0], [0.1], [10.0], [10.1]])?;
    println!("silhouette  {:.5}", silhouette(&points, &[0, 0, 1, 1])?);
    Ok(())
}
