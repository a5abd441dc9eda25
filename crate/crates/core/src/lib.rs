//! Bayesian fusion of a low-spatial-resolution hyperspectral image with a
//! high-spatial-resolution multispectral image.
//!
//! The fused scene is represented in a PCA subspace, given a Gaussian prior
//! with an inverse-Wishart covariance, and sampled by a Gibbs sampler whose
//! image block is updated with Hamiltonian Monte Carlo. The MMSE estimate is
//! the average of the post-burn-in samples.

pub mod cube;
pub mod error;
pub mod forward;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod subspace;
pub mod synth;

pub use cube::{backproject, devectorize_bip, project, vectorize_bip, BipVector, ImageCube, SubspaceBasis};
pub use error::{FusionError, Result};

#[cfg(test)]
pub(crate) mod testutil {
    use nalgebra::DMatrix;
    use rand::Rng;

    pub(crate) fn random_orthonormal(reduced: usize, full: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(full, reduced, |_, _| rng.random_range(-1.0..1.0));
        let q = m.qr().q();
        q.columns(0, reduced).transpose()
    }
}
