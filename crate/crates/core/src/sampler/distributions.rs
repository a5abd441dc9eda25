use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};

use crate::error::{param_err, FusionError, Result};

pub fn sample_std_gaussian_vec<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// One draw from `IG(shape, rate)`, density proportional to `x^{-a-1} e^{-b/x}`.
///
/// A zero rate has no proper posterior; `floor` is returned instead, and it
/// also bounds every draw from below.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, floor: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) {
        return param_err(format!("inverse-gamma shape must be positive, got {shape}"));
    }
    if !(rate >= 0.0 && rate.is_finite()) {
        return param_err(format!("inverse-gamma rate must be non-negative, got {rate}"));
    }
    if rate == 0.0 {
        return Ok(floor);
    }
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| FusionError::Parameter(e.to_string()))?;
    Ok((1.0 / g.sample(rng)).max(floor))
}

/// One draw from `IW(scale, dof)` by the Bartlett construction.
///
/// If `W ~ Wishart(scale^{-1}, dof)` then `W^{-1} ~ IW(scale, dof)`. With
/// `L L^T = scale^{-1}` and `A` the Bartlett factor, `W = (L A)(L A)^T`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(scale: &DMatrix<f64>, dof: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if d == 0 || scale.ncols() != d {
        return param_err("inverse-Wishart scale must be square and non-empty");
    }
    if !(dof > d as f64 - 1.0) {
        return param_err(format!("inverse-Wishart dof {dof} must exceed dim - 1 = {}", d - 1));
    }
    let sym = 0.5 * (scale + scale.transpose());
    let chol = Cholesky::new(sym).ok_or_else(|| FusionError::Parameter("inverse-Wishart scale is not positive definite".into()))?;
    let inv = chol.inverse();
    let l = Cholesky::new(0.5 * (&inv + inv.transpose()))
        .ok_or_else(|| FusionError::Numerical("inverse of the Wishart scale lost definiteness".into()))?
        .unpack();

    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(dof - i as f64).map_err(|e| FusionError::Parameter(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let t = l * a;
    // (T T^T)^{-1} = T^{-T} T^{-1}
    let t_inv = t
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| FusionError::Numerical("singular Bartlett factor".into()))?;
    let sigma = t_inv.transpose() * t_inv;
    Ok(0.5 * (&sigma + sigma.transpose()))
}
