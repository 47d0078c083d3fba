//! Projecting token features onto the semantic null space.
//!
//! Run with `cargo run --example decouple`.

use gsd_core::basis::basis_from_globals;
use gsd_core::gsd::{decouple, residual_orthogonality, semantic_component};
use gsd_core::linalg::{DenseMatrix, DEFAULT_RANK_TOL};
use gsd_core::rng;
use rand::Rng;

fn random(rows: usize, cols: usize, seed: u64) -> gsd_core::Result<DenseMatrix> {
    let mut r = rng::stream(seed, &[]);
    DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
}

fn energy(m: &DenseMatrix) -> f64 {
    m.data().iter().map(|v| v * v).sum()
}

fn main() -> gsd_core::Result<()> {
    let dim = 16;
    let globals = random(8, dim, 1)?;
    let tokens = random(4, dim, 2)?;
    for k in [0, 2, 4, 8] {
        let basis = basis_from_globals(&globals, k, DEFAULT_RANK_TOL)?;
        let kept = decouple(&tokens, &basis)?;
        let removed = semantic_component(&tokens, &basis)?;
        let again = decouple(&kept, &basis)?;
        println!(
            "k={k} (effective {}): kept {:5.1}% of energy, residual {:.1e}, idempotency {:.1e}, |F' + FUUt - F| {:.1e}",
            basis.effective_k(),
            100.0 * energy(&kept) / energy(&tokens),
            residual_orthogonality(&kept, &basis)?,
            again.sub(&kept)?.max_abs(),
            kept.add(&removed)?.sub(&tokens)?.max_abs(),
        );
    }
    Ok(())
}
