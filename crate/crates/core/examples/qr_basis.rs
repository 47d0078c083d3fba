//! Householder QR of a guide matrix and the semantic basis built from it.
//!
//! Run with `cargo run --example qr_basis`.

use gsd_core::basis::{basis_from_globals, center_and_stack, compute_anchor};
use gsd_core::linalg::{householder_qr, matmul, DenseMatrix, DEFAULT_RANK_TOL};
use gsd_core::rng;
use rand::Rng;

fn main() -> gsd_core::Result<()> {
    // six "global features" in 5 dimensions that mostly vary along two directions
    let mut r = rng::stream(7, &[]);
    let rows: Vec<Vec<f64>> = (0..6)
        .map(|_| {
            let (a, b) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
            vec![1.0 + a, 1.0 - a, b, 0.5 * b, 1e-3 * r.gen_range(-1.0..1.0)]
        })
        .collect();
    let globals = DenseMatrix::from_rows(&rows)?;

    let anchor = compute_anchor(&globals)?;
    let guide = center_and_stack(&globals, &anchor)?;
    println!("anchor = {anchor:.3?}");
    println!("guide matrix is {}x{} (dimensions x samples)", guide.rows(), guide.cols());

    let qr = householder_qr(&guide)?;
    let gram = matmul(&qr.q.transpose(), &qr.q)?;
    let back = matmul(&qr.q, &qr.r)?;
    println!("|QtQ - I| = {:.2e}", gram.sub(&DenseMatrix::identity(gram.rows()))?.max_abs());
    println!("|QR - G|  = {:.2e}", back.sub(&guide)?.max_abs());
    let diag: Vec<f64> = (0..qr.r.rows()).map(|i| qr.r.get(i, i).abs()).collect();
    println!("|diag R|  = {diag:.3?}");

    for k in [1, 2, 4, 8] {
        let basis = basis_from_globals(&globals, k, DEFAULT_RANK_TOL)?;
        println!("requested k = {k}: effective k = {}", basis.effective_k());
    }
    Ok(())
}
