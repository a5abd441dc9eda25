//! Subspace identification by PCA on the observed hyperspectral pixels, and
//! the interpolated prior mean expressed in that subspace.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cube::{project, vectorize_bip, BipVector, ImageCube, SubspaceBasis};
use crate::error::{param_err, shape_err, FusionError, Result};

/// Whether spectra are mean-centered before the covariance is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Centering {
    /// Sample covariance; the mean spectrum becomes the basis offset.
    #[default]
    Centered,
    /// Raw second-moment matrix, zero offset.
    Uncentered,
}

#[derive(Debug, Clone)]
pub struct PcaResult {
    /// All eigenvalues, non-increasing, clamped at zero.
    pub eigenvalues: Vec<f64>,
    pub basis: SubspaceBasis,
    pub energy_fraction: f64,
    pub mean_spectrum: Vec<f64>,
    /// The matrix that was diagonalized.
    pub covariance: DMatrix<f64>,
    /// Set when the covariance is (numerically) zero; one component is kept.
    pub degenerate: bool,
}

impl PcaResult {
    pub fn reduced_dim(&self) -> usize {
        self.basis.reduced_dim()
    }
}

/// Learns the projection basis from hyperspectral pixel spectra.
///
/// The reduced dimension is the smallest count of leading eigenvalues whose
/// share of the total reaches `threshold`.
pub fn learn_pca(hs: &BipVector, threshold: f64, centering: Centering) -> Result<PcaResult> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return param_err(format!("energy threshold {threshold} outside (0, 1]"));
    }
    let (n, m) = (hs.n_pixels(), hs.n_bands());
    if n < m {
        return param_err(format!("PCA needs at least {m} pixels, got {n}"));
    }

    let mut mean = DVector::zeros(m);
    if centering == Centering::Centered {
        for px in hs.pixels() {
            mean += DVector::from_column_slice(px);
        }
        mean /= n as f64;
    }
    let mut cov = DMatrix::zeros(m, m);
    let mut centered = DVector::zeros(m);
    for px in hs.pixels() {
        for k in 0..m {
            centered[k] = px[k] - mean[k];
        }
        cov.syger(1.0, &centered, &centered, 1.0);
    }
    cov.fill_upper_triangle_with_lower_triangle();
    let denom = match centering {
        Centering::Centered if n > 1 => (n - 1) as f64,
        _ => n as f64,
    };
    cov /= denom;

    let eig = SymmetricEigen::new(cov.clone());
    let dominant_band = |j: usize| eig.eigenvectors.column(j).iamax();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(dominant_band(a).cmp(&dominant_band(b)))
    });

    let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let floor = 1e-12 * top;
    let eigenvalues: Vec<f64> =
        order.iter().map(|&j| eig.eigenvalues[j]).map(|d| if d > floor { d } else { 0.0 }).collect();
    let total: f64 = eigenvalues.iter().sum();

    let degenerate = !(total > 0.0);
    let (reduced, energy_fraction) = if degenerate {
        warn!("PCA input has zero spread; keeping a single component");
        (1, 1.0)
    } else {
        let mut cum = 0.0;
        let mut pick = (m, 1.0);
        for (i, d) in eigenvalues.iter().enumerate() {
            cum += d;
            if cum / total >= threshold - 1e-12 {
                pick = (i + 1, cum / total);
                break;
            }
        }
        pick
    };

    let mut rows = DMatrix::zeros(reduced, m);
    for (r, &j) in order.iter().take(reduced).enumerate() {
        let mut v = eig.eigenvectors.column(j).into_owned();
        // sign convention: largest-magnitude entry positive
        if v[v.iamax()] < 0.0 {
            v = -v;
        }
        rows.row_mut(r).copy_from(&v.transpose());
    }
    let basis = SubspaceBasis::with_offset(rows, mean.clone())?;
    Ok(PcaResult {
        eigenvalues,
        basis,
        energy_fraction,
        mean_spectrum: mean.as_slice().to_vec(),
        covariance: cov,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Bicubic,
}

fn cubic_weight(t: f64) -> f64 {
    // Keys kernel, a = -0.5
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Taps `(index, weight)` sampling a length-`n` axis at target position `t`
/// when the axis is upsampled by `factor`. Source sample `i` sits at the
/// center of target block `i`.
fn axis_taps(t: usize, n: usize, factor: usize, kind: Interpolation) -> Vec<(usize, f64)> {
    let s = ((t as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = s.floor() as isize;
    let frac = s - i0 as f64;
    let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
    match kind {
        Interpolation::Bilinear => vec![(clamp(i0), 1.0 - frac), (clamp(i0 + 1), frac)],
        Interpolation::Bicubic => (-1..=2).map(|o| (clamp(i0 + o), cubic_weight(frac - o as f64))).collect(),
    }
}

/// Spatially upsamples every band by integer factors.
pub fn upsample(cube: &ImageCube, factor_rows: usize, factor_cols: usize, kind: Interpolation) -> Result<ImageCube> {
    if factor_rows == 0 || factor_cols == 0 {
        return param_err("upsampling factors must be positive");
    }
    let (rows, cols, bands) = (cube.rows() * factor_rows, cube.cols() * factor_cols, cube.bands());
    let row_taps: Vec<_> = (0..rows).map(|r| axis_taps(r, cube.rows(), factor_rows, kind)).collect();
    let col_taps: Vec<_> = (0..cols).map(|c| axis_taps(c, cube.cols(), factor_cols, kind)).collect();
    let src = cube.as_slice();
    let mut data = vec![0.0; rows * cols * bands];
    for (r, rt) in row_taps.iter().enumerate() {
        for (c, ct) in col_taps.iter().enumerate() {
            let dst = &mut data[(r * cols + c) * bands..(r * cols + c + 1) * bands];
            for &(sr, wr) in rt {
                for &(sc, wc) in ct {
                    let w = wr * wc;
                    let base = (sr * cube.cols() + sc) * bands;
                    for (d, s) in dst.iter_mut().zip(&src[base..base + bands]) {
                        *d += w * s;
                    }
                }
            }
        }
    }
    ImageCube::new(rows, cols, bands, data)
}

/// The prior mean `mu_u`: the hyperspectral image interpolated to the target
/// grid and projected pixel by pixel onto the basis.
pub fn interpolated_prior_mean(
    hs: &ImageCube,
    target_rows: usize,
    target_cols: usize,
    basis: &SubspaceBasis,
    kind: Interpolation,
) -> Result<BipVector> {
    if target_rows % hs.rows() != 0 || target_cols % hs.cols() != 0 {
        return Err(FusionError::Parameter(format!(
            "target {target_rows}x{target_cols} is not an integer multiple of {}x{}",
            hs.rows(),
            hs.cols()
        )));
    }
    if hs.bands() != basis.full_dim() {
        return shape_err(format!("cube has {} bands, basis expects {}", hs.bands(), basis.full_dim()));
    }
    let up = upsample(hs, target_rows / hs.rows(), target_cols / hs.cols(), kind)?;
    project(&vectorize_bip(&up), basis)
}
