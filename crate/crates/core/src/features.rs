//! External saliency features used as an extra pseudo-diffusion block.
//!
//! Feature columns play the role of eigenvectors with unit eigenvalues, so
//! the block's operator is `[1, g1, ..., gZ] [1, g1, ..., gZ]^T`. The constant
//! column is held back for the same affine normalization the spectral
//! blocks use; no eigengap or variance filtering applies here.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ingest::FeatureBank;
use crate::refine::{normalize_for_seed, RefinedDiffusion};

#[derive(Debug, Clone)]
pub struct FeatureDiffusion {
    u_matrix: DMatrix<f64>,
    lambda: DVector<f64>,
    block: RefinedDiffusion,
}

impl FeatureDiffusion {
    /// `features` is N×Z with entries in [0, 1].
    pub fn new(features: &DMatrix<f64>) -> Result<Self> {
        let (n, z) = features.shape();
        if n == 0 || z == 0 {
            return Err(Error::ShapeMismatch(
                "feature block needs at least one node and one feature".into(),
            ));
        }
        if features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter("feature values must lie in [0, 1]".into()));
        }
        let mut u_matrix = DMatrix::from_element(n, z + 1, 1.0);
        u_matrix.view_mut((0, 1), (n, z)).copy_from(features);
        let block = RefinedDiffusion::from_parts(features.clone(), DVector::from_element(z, 1.0))?;
        Ok(Self {
            u_matrix,
            lambda: DVector::from_element(z + 1, 1.0),
            block,
        })
    }

    pub fn from_bank(bank: &FeatureBank) -> Result<Self> {
        Self::new(&bank.node_features)
    }

    /// `[1, g1, ..., gZ]`.
    pub fn u_matrix(&self) -> &DMatrix<f64> {
        &self.u_matrix
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn n(&self) -> usize {
        self.u_matrix.nrows()
    }
}

/// `sum_z g^z (g^z . s)`, normalized to [0, 1].
pub fn feature_diffusion_apply(fd: &FeatureDiffusion, seed: &DVector<f64>) -> Result<DVector<f64>> {
    normalize_for_seed(&fd.block, seed).map(|(_, y)| y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indicator_feature_reproduces_itself() {
        let g = DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 1.0, 0.0, 1.0]);
        let fd = FeatureDiffusion::new(&g).unwrap();
        let y = feature_diffusion_apply(&fd, &DVector::from_element(5, 0.2)).unwrap();
        assert_eq!(y.as_slice(), g.column(0).as_slice());
        assert_eq!(fd.u_matrix().column(0).as_slice(), &[1.0; 5]);
        assert_eq!(fd.lambda().len(), 2);
    }

    #[test]
    fn zero_seed_is_rejected() {
        let fd = FeatureDiffusion::new(&DMatrix::from_element(3, 2, 0.5)).unwrap();
        assert!(matches!(
            feature_diffusion_apply(&fd, &DVector::zeros(3)),
            Err(Error::EmptySeed)
        ));
    }

    #[test]
    fn out_of_range_features_are_rejected() {
        assert!(FeatureDiffusion::new(&DMatrix::from_element(3, 1, 1.5)).is_err());
    }

    #[test]
    fn identical_rows_get_identical_saliency() {
        let g = DMatrix::from_row_slice(4, 2, &[0.1, 0.9, 0.4, 0.3, 0.1, 0.9, 0.8, 0.0]);
        let fd = FeatureDiffusion::new(&g).unwrap();
        let y = feature_diffusion_apply(&fd, &DVector::from_vec(vec![0.3, 1.0, 0.0, 0.5])).unwrap();
        assert_eq!(y[0], y[2]);
    }
}
