//! Error contrasts `L = [L₁, L₂]` with `L₁ᵀX = I_p` and `L₂ᵀX = 0`.
//!
//! These are reference constructions: they cost `O(n³)` and exist to check the
//! production likelihood and projector paths, which never form `L₂`.

use crate::error::{RemlError, Result};
use crate::linalg::{orthonormal_complement, spd_inverse, symmetrize, DenseMatrix};

#[derive(Debug, Clone)]
pub struct ErrorContrast {
    pub l1: DenseMatrix,
    pub l2: DenseMatrix,
}

impl ErrorContrast {
    pub fn n(&self) -> usize {
        self.l1.nrows()
    }

    pub fn p(&self) -> usize {
        self.l1.ncols()
    }
}

/// `Lᵀ = [X, K₂]⁻¹` with `K₂` an orthonormal basis of `ker Xᵀ`.
pub fn build_contrast(x: &DenseMatrix) -> Result<ErrorContrast> {
    let q = x.nrows().saturating_sub(x.ncols());
    build_contrast_with(x, &DenseMatrix::identity(q, q))
}

/// `Lᵀ = [X, K₂Bᵀ]⁻¹` for a nonsingular `B` of order `n − p`.
pub fn build_contrast_with(x: &DenseMatrix, b: &DenseMatrix) -> Result<ErrorContrast> {
    let (n, p) = x.shape();
    let k2 = orthonormal_complement(x)?;
    if b.shape() != (n - p, n - p) {
        return Err(RemlError::DimensionMismatch(format!(
            "B must be {0}x{0}, got {1}x{2}",
            n - p,
            b.nrows(),
            b.ncols()
        )));
    }
    let mut basis = DenseMatrix::zeros(n, n);
    basis.view_mut((0, 0), (n, p)).copy_from(x);
    basis.view_mut((0, p), (n, n - p)).copy_from(&(k2 * b.transpose()));
    let lt = basis
        .try_inverse()
        .ok_or_else(|| RemlError::RankDeficient("[X, K₂Bᵀ] is singular".into()))?;
    let l = lt.transpose();
    Ok(ErrorContrast {
        l1: l.columns(0, p).into_owned(),
        l2: l.columns(p, n - p).into_owned(),
    })
}

/// `L₂(L₂ᵀL₂)⁻¹L₂ᵀ`, equal to `I − P_X` for any full-rank contrast.
pub fn residual_projector_via_l2(l2: &DenseMatrix) -> Result<DenseMatrix> {
    let gram = l2.transpose() * l2;
    let inv = spd_inverse(&gram).map_err(|_| RemlError::RankDeficient("L₂ᵀL₂ is singular".into()))?;
    Ok(symmetrize(&(l2 * inv * l2.transpose())))
}

/// `P = L₂(L₂ᵀVL₂)⁻¹L₂ᵀ` alongside its discrepancy from
/// `V⁻¹ − V⁻¹X(XᵀV⁻¹X)⁻¹XᵀV⁻¹`.
#[derive(Debug, Clone)]
pub struct WeightedProjector {
    pub p: DenseMatrix,
    pub discrepancy: f64,
}

pub fn weighted_projector(
    v: &DenseMatrix,
    x: &DenseMatrix,
    l2: &DenseMatrix,
) -> Result<WeightedProjector> {
    let inner = symmetrize(&(l2.transpose() * v * l2));
    let p_contrast = symmetrize(&(l2 * spd_inverse(&inner)? * l2.transpose()));
    let p_direct = projector_from_inverse(v, x)?;
    let discrepancy = (&p_contrast - p_direct).amax();
    Ok(WeightedProjector {
        p: p_contrast,
        discrepancy,
    })
}

/// `V⁻¹ − V⁻¹X(XᵀV⁻¹X)⁻¹XᵀV⁻¹` by dense inversion.
pub fn projector_from_inverse(v: &DenseMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    let v_inv = spd_inverse(v)?;
    let vx = &v_inv * x;
    let xvx_inv = spd_inverse(&symmetrize(&(x.transpose() * &vx)))?;
    Ok(symmetrize(&(&v_inv - &vx * xvx_inv * vx.transpose())))
}

/// `L₁ᵀVL₁ − L₁ᵀVL₂(L₂ᵀVL₂)⁻¹L₂ᵀVL₁`, which equals `(XᵀV⁻¹X)⁻¹`.
pub fn xvx_inverse_via_contrast(v: &DenseMatrix, c: &ErrorContrast) -> Result<DenseMatrix> {
    let vl1 = v * &c.l1;
    let vl2 = v * &c.l2;
    let inner = spd_inverse(&symmetrize(&(c.l2.transpose() * &vl2)))?;
    let cross = c.l1.transpose() * &vl2;
    Ok(symmetrize(
        &(c.l1.transpose() * vl1 - &cross * inner * cross.transpose()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, projector};

    #[test]
    fn orthonormal_x_gives_identity_like_contrast() {
        let x = DenseMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let c = build_contrast(&x).unwrap();
        assert!(max_abs(&(&c.l1 - &x)) < 1e-14);
        assert!(c.l2.row(0).amax() < 1e-14);
        assert!(max_abs(&(c.l2.transpose() * &c.l2 - DenseMatrix::identity(2, 2))) < 1e-14);
    }

    #[test]
    fn two_by_two_by_hand() {
        let x = DenseMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let c = build_contrast(&x).unwrap();
        assert!(((c.l1.transpose() * &x)[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((c.l2.transpose() * &x)[(0, 0)].abs() < 1e-15);
        // [X, K₂]⁻¹ has first row (1/2, 1/2).
        assert!((c.l1[(0, 0)] - 0.5).abs() < 1e-15 && (c.l1[(1, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scale_invariance_of_residual_projector() {
        let x = DenseMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 3.0, 1.0, -1.0]);
        let c = build_contrast(&x).unwrap();
        let a = residual_projector_via_l2(&c.l2).unwrap();
        let b = residual_projector_via_l2(&(&c.l2 * 7.0)).unwrap();
        assert!(max_abs(&(&a - b)) < 1e-13);
        let resid = DenseMatrix::identity(4, 4) - projector(&x).unwrap();
        assert!(max_abs(&(a - resid)) < 1e-10);
    }

    #[test]
    fn weighted_projector_homogeneity() {
        let x = DenseMatrix::from_row_slice(4, 1, &[1.0, 1.0, 1.0, 1.0]);
        let c = build_contrast(&x).unwrap();
        let i = DenseMatrix::identity(4, 4);
        let p1 = weighted_projector(&i, &x, &c.l2).unwrap();
        assert!(max_abs(&(&p1.p - residual_projector_via_l2(&c.l2).unwrap())) < 1e-13);
        let p3 = weighted_projector(&(&i * 3.0), &x, &c.l2).unwrap();
        assert!(max_abs(&(p3.p * 3.0 - p1.p)) < 1e-13);
    }

    #[test]
    fn non_pd_v_is_rejected() {
        let x = DenseMatrix::from_element(3, 1, 1.0);
        let c = build_contrast(&x).unwrap();
        let v = -DenseMatrix::identity(3, 3);
        assert!(matches!(
            weighted_projector(&v, &x, &c.l2),
            Err(RemlError::NotPositiveDefinite(_))
        ));
    }
}
