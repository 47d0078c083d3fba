//! Batch semantic anchor and the dynamic semantic basis.
//!
//! The anchor is the mean of the frozen stream's global features over a batch. The
//! anchor-centred features are stacked as the columns of a D×B guide matrix whose
//! Householder QR yields an orthonormal basis for the batch's semantic variation.

use crate::error::{GsdError, Result};
use crate::linalg::{self, householder_qr, DenseMatrix, DEFAULT_RANK_TOL};

/// Orthonormal D×K' basis plus the anchor it was centred on.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticBasis {
    u: DenseMatrix,
    anchor: Vec<f64>,
    requested_k: usize,
}

impl SemanticBasis {
    /// Wraps an existing basis. Columns of `u` must be orthonormal (checked to 1e-8).
    pub fn from_parts(u: DenseMatrix, anchor: Vec<f64>, requested_k: usize) -> Result<Self> {
        if anchor.len() != u.rows() {
            return Err(GsdError::Shape(format!(
                "anchor length {} does not match basis dimension {}",
                anchor.len(),
                u.rows()
            )));
        }
        if u.cols() > requested_k {
            return Err(GsdError::Validation(format!(
                "basis has {} columns but only {} were requested",
                u.cols(),
                requested_k
            )));
        }
        let gram = linalg::matmul(&u.transpose(), &u)?;
        let err = gram.sub(&DenseMatrix::identity(u.cols()))?.max_abs();
        if err > 1e-8 {
            return Err(GsdError::Validation(format!(
                "basis columns are not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(Self {
            u,
            anchor,
            requested_k,
        })
    }

    /// A basis with no columns; decoupling against it is the identity.
    pub fn empty(dim: usize) -> Self {
        Self {
            u: DenseMatrix::zeros(dim, 0),
            anchor: vec![0.0; dim],
            requested_k: 0,
        }
    }

    pub fn u(&self) -> &DenseMatrix {
        &self.u
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    pub fn requested_k(&self) -> usize {
        self.requested_k
    }

    pub fn effective_k(&self) -> usize {
        self.u.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.u.cols() == 0
    }

    /// Explicit D×D projector `U Uᵀ`. Only for diagnostics and tests.
    pub fn projector(&self) -> DenseMatrix {
        linalg::matmul(&self.u, &self.u.transpose()).expect("U·Uᵀ shapes always agree")
    }
}

/// Arithmetic mean of the rows of a B×D feature matrix.
pub fn compute_anchor(globals: &DenseMatrix) -> Result<Vec<f64>> {
    if globals.rows() == 0 {
        return Err(GsdError::Validation("anchor of an empty batch".into()));
    }
    let b = globals.rows() as f64;
    let mut c = vec![0.0; globals.cols()];
    for i in 0..globals.rows() {
        for (acc, v) in c.iter_mut().zip(globals.row(i)) {
            *acc += v;
        }
    }
    for v in c.iter_mut() {
        *v /= b;
    }
    Ok(c)
}

/// Guide matrix: column `i` is `globals[i] - anchor`, giving a D×B matrix.
pub fn center_and_stack(globals: &DenseMatrix, anchor: &[f64]) -> Result<DenseMatrix> {
    let (b, d) = globals.shape();
    if anchor.len() != d {
        return Err(GsdError::Shape(format!(
            "anchor length {} does not match feature width {}",
            anchor.len(),
            d
        )));
    }
    let mut out = DenseMatrix::zeros(d, b);
    for i in 0..b {
        for (j, (&g, &c)) in globals.row(i).iter().zip(anchor).enumerate() {
            out.set(j, i, g - c);
        }
    }
    Ok(out)
}

/// Builds the semantic basis from a D×B guide matrix.
///
/// The requested size is clamped to the numerical rank of the triangular factor. Columns
/// of Q are taken in order, skipping those whose reflection step found a (numerically)
/// dependent column, so the first `effective_k` independent directions are returned.
pub fn build_semantic_basis(
    guide: &DenseMatrix,
    anchor: Vec<f64>,
    requested_k: usize,
    rank_tol: f64,
) -> Result<SemanticBasis> {
    if anchor.len() != guide.rows() {
        return Err(GsdError::Shape(format!(
            "anchor length {} does not match guide rows {}",
            anchor.len(),
            guide.rows()
        )));
    }
    if requested_k == 0 || guide.cols() == 0 {
        let mut b = SemanticBasis::empty(guide.rows());
        b.anchor = anchor;
        b.requested_k = requested_k;
        return Ok(b);
    }
    let qr = householder_qr(guide)?;
    let significant = linalg::significant_diagonal(&qr.r, rank_tol)?;
    let keep: Vec<usize> = significant.into_iter().take(requested_k).collect();
    Ok(SemanticBasis {
        u: qr.q.select_columns(&keep),
        anchor,
        requested_k,
    })
}

/// Anchor, guide matrix and basis from a batch of frozen global features (B×D).
pub fn basis_from_globals(
    globals: &DenseMatrix,
    requested_k: usize,
    rank_tol: f64,
) -> Result<SemanticBasis> {
    let anchor = compute_anchor(globals)?;
    let guide = center_and_stack(globals, &anchor)?;
    build_semantic_basis(&guide, anchor, requested_k, rank_tol)
}

pub fn default_basis_from_globals(globals: &DenseMatrix, requested_k: usize) -> Result<SemanticBasis> {
    basis_from_globals(globals, requested_k, DEFAULT_RANK_TOL)
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine_to_anchor(g: &[f64], anchor: &[f64]) -> Result<f64> {
    if g.len() != anchor.len() {
        return Err(GsdError::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            g.len(),
            anchor.len()
        )));
    }
    let ng = linalg::norm2(g);
    let na = linalg::norm2(anchor);
    if ng == 0.0 || na == 0.0 {
        return Ok(0.0);
    }
    Ok((linalg::dot(g, anchor) / (ng * na)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut r = rng::stream(seed, &[]);
        DenseMatrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn anchor_examples() {
        let g = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(compute_anchor(&g).unwrap(), vec![2.0, 3.0]);
        let one = DenseMatrix::from_rows(&[[5.0, 6.0, 7.0]]).unwrap();
        assert_eq!(compute_anchor(&one).unwrap(), vec![5.0, 6.0, 7.0]);
        let sym = DenseMatrix::from_rows(&[[1.0, -2.0], [-1.0, 2.0]]).unwrap();
        assert_eq!(compute_anchor(&sym).unwrap(), vec![0.0, 0.0]);
        assert!(compute_anchor(&DenseMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn centering_examples() {
        let g = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let guide = center_and_stack(&g, &[2.0, 3.0]).unwrap();
        assert_eq!(guide.data(), &[-1.0, 1.0, -1.0, 1.0]);

        let dup = DenseMatrix::from_rows(&[[0.5, 1.5, 2.5]; 4]).unwrap();
        let guide = center_and_stack(&dup, &[0.5, 1.5, 2.5]).unwrap();
        assert_eq!(guide, DenseMatrix::zeros(3, 4));

        let r = random_matrix(6, 5, 3);
        let c = compute_anchor(&r).unwrap();
        let guide = center_and_stack(&r, &c).unwrap();
        for j in 0..guide.rows() {
            let s: f64 = guide.row(j).iter().sum();
            assert!(s.abs() < 1e-14);
        }
        assert!(matches!(
            center_and_stack(&r, &[0.0; 4]),
            Err(GsdError::Shape(_))
        ));
    }

    #[test]
    fn zero_guide_gives_empty_basis() {
        let b = build_semantic_basis(&DenseMatrix::zeros(8, 5), vec![0.0; 8], 4, DEFAULT_RANK_TOL)
            .unwrap();
        assert_eq!(b.effective_k(), 0);
        assert_eq!(b.requested_k(), 4);
    }

    #[test]
    fn single_column_basis() {
        let guide = DenseMatrix::from_rows(&[[3.0], [4.0]]).unwrap();
        let b = build_semantic_basis(&guide, vec![0.0; 2], 1, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(b.effective_k(), 1);
        assert!((b.u().get(0, 0) + 0.6).abs() < 1e-15);
        assert!((b.u().get(1, 0) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn rank_two_guide_clamps() {
        let x = random_matrix(64, 1, 11);
        let y = random_matrix(64, 1, 12);
        let coef = random_matrix(2, 8, 13);
        let mut guide = DenseMatrix::zeros(64, 8);
        for i in 0..64 {
            for j in 0..8 {
                guide.set(i, j, x.get(i, 0) * coef.get(0, j) + y.get(i, 0) * coef.get(1, j));
            }
        }
        let b = build_semantic_basis(&guide, vec![0.0; 64], 5, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(b.effective_k(), 2);
        // span(U) contains both generators
        let p = b.projector();
        for v in [&x, &y] {
            let pv = linalg::matmul(&p, v).unwrap();
            assert!(pv.sub(v).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn zero_request_is_empty() {
        let g = random_matrix(10, 4, 1);
        let b = basis_from_globals(&g, 0, DEFAULT_RANK_TOL).unwrap();
        assert!(b.is_empty());
        assert_eq!(b.dim(), 4);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_to_anchor(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_to_anchor(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        let c = cosine_to_anchor(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine_to_anchor(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn from_parts_checks_orthonormality() {
        let u = DenseMatrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert!(SemanticBasis::from_parts(u, vec![0.0; 2], 2).is_err());
        let u = DenseMatrix::identity(2);
        assert!(SemanticBasis::from_parts(u, vec![0.0; 2], 2).is_ok());
    }
}
