//! Parameter-free semantic decoupling: `F' = F (I − U Uᵀ)`.
//!
//! The projector is never materialised; rows are projected as `(F U) Uᵀ`.

use std::fmt;
use std::str::FromStr;

use crate::basis::SemanticBasis;
use crate::error::{GsdError, Result};
use crate::linalg::{self, DenseMatrix};

/// How the per-image global feature is pooled from the frozen stream's tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnchorMode {
    /// Mean of the patch tokens.
    Gap,
    /// The classification token.
    Cls,
}

/// Where the evaluation-time basis comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvalBasisMode {
    /// Re-estimate from each evaluation batch.
    PerBatch,
    /// Reuse the last basis seen during training.
    FrozenTrainBasis,
}

impl fmt::Display for AnchorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorMode::Gap => "GAP",
            AnchorMode::Cls => "CLS",
        })
    }
}

impl FromStr for AnchorMode {
    type Err = GsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GAP" => Ok(AnchorMode::Gap),
            "CLS" => Ok(AnchorMode::Cls),
            other => Err(GsdError::Config(format!("unknown anchor mode `{other}`"))),
        }
    }
}

impl fmt::Display for EvalBasisMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalBasisMode::PerBatch => "per_batch",
            EvalBasisMode::FrozenTrainBasis => "frozen_train_basis",
        })
    }
}

impl FromStr for EvalBasisMode {
    type Err = GsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "per_batch" => Ok(EvalBasisMode::PerBatch),
            "frozen_train_basis" => Ok(EvalBasisMode::FrozenTrainBasis),
            other => Err(GsdError::Config(format!("unknown eval basis mode `{other}`"))),
        }
    }
}

/// Placement and size of the decoupling inside the detector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GsdConfig {
    /// Number of final encoder blocks whose input patch tokens are projected.
    pub num_tail_layers: usize,
    pub requested_k: usize,
    pub anchor_mode: AnchorMode,
    pub eval_basis_mode: EvalBasisMode,
}

impl Default for GsdConfig {
    fn default() -> Self {
        Self {
            num_tail_layers: 2,
            requested_k: 8,
            anchor_mode: AnchorMode::Gap,
            eval_basis_mode: EvalBasisMode::PerBatch,
        }
    }
}

impl GsdConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.num_tail_layers > depth {
            return Err(GsdError::Config(format!(
                "num_tail_layers {} exceeds encoder depth {}",
                self.num_tail_layers, depth
            )));
        }
        Ok(())
    }

    /// True when the configuration can change the detector's output.
    pub fn is_active(&self) -> bool {
        self.num_tail_layers > 0 && self.requested_k > 0
    }

    /// Whether block `layer` (0-based) of a `depth`-block encoder receives the projection.
    pub fn applies_to(&self, layer: usize, depth: usize) -> bool {
        layer + self.num_tail_layers >= depth && layer < depth
    }
}

fn check_dims(f: &DenseMatrix, basis: &SemanticBasis) -> Result<()> {
    if f.cols() != basis.dim() {
        return Err(GsdError::Shape(format!(
            "features are {}x{} but the basis dimension is {}",
            f.rows(),
            f.cols(),
            basis.dim()
        )));
    }
    Ok(())
}

/// `F U Uᵀ`: the part of each row inside span(U).
pub fn semantic_component(f: &DenseMatrix, basis: &SemanticBasis) -> Result<DenseMatrix> {
    check_dims(f, basis)?;
    let mut out = DenseMatrix::zeros(f.rows(), f.cols());
    for i in 0..f.rows() {
        project_row(f.row(i), basis.u(), out.row_mut(i));
    }
    Ok(out)
}

/// `F − F U Uᵀ`: each row moved into the orthogonal complement of span(U).
pub fn decouple(f: &DenseMatrix, basis: &SemanticBasis) -> Result<DenseMatrix> {
    check_dims(f, basis)?;
    let mut out = f.clone();
    decouple_rows_in_place(out.data_mut(), f.cols(), basis.u());
    Ok(out)
}

/// Largest `|⟨row, u_k⟩|` over rows and basis columns.
pub fn residual_orthogonality(f_prime: &DenseMatrix, basis: &SemanticBasis) -> Result<f64> {
    check_dims(f_prime, basis)?;
    let u = basis.u();
    let k = u.cols();
    let mut coeffs = vec![0.0; k];
    let mut worst = 0.0_f64;
    for i in 0..f_prime.rows() {
        coeffs.iter_mut().for_each(|c| *c = 0.0);
        linalg::gemm_nn(f_prime.row(i), u.data(), &mut coeffs, 1, u.rows(), k);
        worst = coeffs.iter().fold(worst, |m, c| m.max(c.abs()));
    }
    Ok(worst)
}

/// `out = (row · U) Uᵀ`.
fn project_row(row: &[f64], u: &DenseMatrix, out: &mut [f64]) {
    let k = u.cols();
    if k == 0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut coeffs = vec![0.0; k];
    linalg::gemm_nn(row, u.data(), &mut coeffs, 1, u.rows(), k);
    out.iter_mut().for_each(|v| *v = 0.0);
    linalg::gemm_nt(&coeffs, u.data(), out, 1, k, u.rows());
}

/// Projects every `width`-long row of `rows` onto the complement of span(U), in place.
///
/// The map is symmetric, so the same call also back-propagates a gradient through it.
pub(crate) fn decouple_rows_in_place(rows: &mut [f64], width: usize, u: &DenseMatrix) {
    let k = u.cols();
    if k == 0 {
        return;
    }
    let mut coeffs = vec![0.0; k];
    for row in rows.chunks_exact_mut(width) {
        coeffs.iter_mut().for_each(|c| *c = 0.0);
        linalg::gemm_nn(row, u.data(), &mut coeffs, 1, width, k);
        for (j, r) in row.iter_mut().enumerate() {
            let urow = u.row(j);
            let mut s = 0.0;
            for (c, uv) in coeffs.iter().zip(urow) {
                s += c * uv;
            }
            *r -= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::basis_from_globals;
    use crate::linalg::{matmul, DEFAULT_RANK_TOL};
    use crate::rng;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut r = rng::stream(seed, &[]);
        DenseMatrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
    }

    fn basis(d: usize, k: usize, seed: u64) -> SemanticBasis {
        basis_from_globals(&random(k + 1, d, seed), k, DEFAULT_RANK_TOL).unwrap()
    }

    #[test]
    fn empty_basis_cases() {
        let f = random(5, 6, 1);
        let b = SemanticBasis::empty(6);
        assert_eq!(semantic_component(&f, &b).unwrap(), DenseMatrix::zeros(5, 6));
        assert_eq!(decouple(&f, &b).unwrap(), f);
    }

    #[test]
    fn basis_vector_is_fixed_point() {
        let b = basis(16, 3, 2);
        let u1 = DenseMatrix::from_vec(1, 16, b.u().column(0));
        let sc = semantic_component(&u1, &b).unwrap();
        assert!(sc.sub(&u1).unwrap().max_abs() < 1e-14);
        assert!(decouple(&u1, &b).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn matches_explicit_projector() {
        let b = basis(16, 3, 3);
        let f = random(7, 16, 4);
        let explicit = matmul(&f, &b.projector()).unwrap();
        let sc = semantic_component(&f, &b).unwrap();
        assert!(sc.sub(&explicit).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn complementarity_and_orthogonality() {
        let b = basis(16, 5, 5);
        let f = random(9, 16, 6);
        let sc = semantic_component(&f, &b).unwrap();
        let dc = decouple(&f, &b).unwrap();
        assert!(sc.add(&dc).unwrap().sub(&f).unwrap().max_abs() <= 1e-12);
        let worst = residual_orthogonality(&dc, &b).unwrap();
        let max_norm = (0..f.rows())
            .map(|i| linalg::norm2(f.row(i)))
            .fold(0.0, f64::max);
        assert!(worst <= 1e-8 * max_norm);
    }

    #[test]
    fn residual_of_basis_vector_is_one() {
        let b = basis(8, 2, 7);
        let mut rows = DenseMatrix::zeros(3, 8);
        for i in 0..3 {
            rows.row_mut(i).copy_from_slice(&b.u().column(0));
        }
        let r = residual_orthogonality(&rows, &b).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residual_matches_nested_loops() {
        let b = basis(12, 4, 8);
        let f = random(6, 12, 9);
        let mut brute = 0.0_f64;
        for i in 0..6 {
            for k in 0..b.effective_k() {
                let mut s = 0.0;
                for j in 0..12 {
                    s += f.get(i, j) * b.u().get(j, k);
                }
                brute = brute.max(s.abs());
            }
        }
        let got = residual_orthogonality(&f, &b).unwrap();
        assert!((got - brute).abs() <= 1e-15 * brute.max(1.0));
    }

    #[test]
    fn shape_errors() {
        let b = basis(8, 2, 1);
        assert!(matches!(
            decouple(&DenseMatrix::zeros(2, 7), &b),
            Err(GsdError::Shape(_))
        ));
        assert!(semantic_component(&DenseMatrix::zeros(2, 9), &b).is_err());
        assert!(residual_orthogonality(&DenseMatrix::zeros(2, 9), &b).is_err());
    }

    #[test]
    fn config_placement() {
        let g = GsdConfig {
            num_tail_layers: 2,
            ..GsdConfig::default()
        };
        let on: Vec<bool> = (0..6).map(|l| g.applies_to(l, 6)).collect();
        assert_eq!(on, [false, false, false, false, true, true]);
        assert!(g.validate(6).is_ok());
        assert!(GsdConfig {
            num_tail_layers: 7,
            ..g
        }
        .validate(6)
        .is_err());
        assert_eq!("gap".parse::<AnchorMode>().unwrap(), AnchorMode::Gap);
        assert!("mean".parse::<AnchorMode>().is_err());
    }
}
