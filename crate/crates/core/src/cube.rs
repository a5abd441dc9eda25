//! Image containers, band-interleaved-by-pixel (BIP) vectors, and the
//! per-pixel subspace embedding shared by every other module.
//!
//! Spatial pixel order is row-major everywhere: pixel `i` sits at row
//! `i / cols`, column `i % cols`, and all bands of a pixel are contiguous.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, FusionError, Result};

/// A `rows x cols x bands` radiance cube, stored in BIP order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCube {
    rows: usize,
    cols: usize,
    bands: usize,
    data: Vec<f64>,
}

impl ImageCube {
    /// Builds a cube from BIP-ordered data.
    pub fn new(rows: usize, cols: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || bands == 0 {
            return shape_err(format!("cube dims must be positive, got {rows}x{cols}x{bands}"));
        }
        if data.len() != rows * cols * bands {
            return shape_err(format!(
                "cube {rows}x{cols}x{bands} needs {} values, got {}",
                rows * cols * bands,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(FusionError::Parameter(format!("non-finite value at index {pos}")));
        }
        Ok(Self { rows, cols, bands, data })
    }

    pub fn zeros(rows: usize, cols: usize, bands: usize) -> Self {
        Self { rows, cols, bands, data: vec![0.0; rows * cols * bands] }
    }

    /// Builds a cube by evaluating `f(row, col, band)`.
    pub fn from_fn(rows: usize, cols: usize, bands: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols * bands);
        for r in 0..rows {
            for c in 0..cols {
                for k in 0..bands {
                    data.push(f(r, c, k));
                }
            }
        }
        Self { rows, cols, bands, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data[(row * self.cols + col) * self.bands + band]
    }

    /// The raw BIP-ordered values.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// All values of one band, in row-major spatial order.
    pub fn band(&self, band: usize) -> Vec<f64> {
        self.data.iter().skip(band).step_by(self.bands).copied().collect()
    }
}

/// A flat vector in BIP order: all bands of pixel 0, then pixel 1, and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BipVector {
    n_pixels: usize,
    n_bands: usize,
    data: Vec<f64>,
}

impl BipVector {
    pub fn new(n_pixels: usize, n_bands: usize, data: Vec<f64>) -> Result<Self> {
        if n_pixels == 0 || n_bands == 0 {
            return shape_err("BIP vector needs at least one pixel and one band");
        }
        if data.len() != n_pixels * n_bands {
            return shape_err(format!(
                "BIP vector of {n_pixels} pixels x {n_bands} bands needs {} values, got {}",
                n_pixels * n_bands,
                data.len()
            ));
        }
        Ok(Self { n_pixels, n_bands, data })
    }

    pub fn zeros(n_pixels: usize, n_bands: usize) -> Self {
        Self { n_pixels, n_bands, data: vec![0.0; n_pixels * n_bands] }
    }

    pub fn n_pixels(&self) -> usize {
        self.n_pixels
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The `n_bands` contiguous values of pixel `i`.
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_bands..(i + 1) * self.n_bands]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.n_bands)
    }

    /// Same layout, different values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.n_pixels, self.n_bands, data)
    }

    pub fn same_shape(&self, other: &BipVector) -> bool {
        self.n_pixels == other.n_pixels && self.n_bands == other.n_bands
    }

    pub fn dot(&self, other: &BipVector) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_squared(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Flattens a cube into BIP order.
pub fn vectorize_bip(cube: &ImageCube) -> BipVector {
    BipVector { n_pixels: cube.n_pixels(), n_bands: cube.bands, data: cube.data.clone() }
}

/// Inverse of [`vectorize_bip`].
pub fn devectorize_bip(v: &BipVector, rows: usize, cols: usize) -> Result<ImageCube> {
    if rows * cols != v.n_pixels {
        return shape_err(format!("{rows}x{cols} grid does not hold {} pixels", v.n_pixels));
    }
    ImageCube::new(rows, cols, v.n_bands, v.data.clone())
}

/// The projection basis `V` (rows orthonormal) plus the spectral offset
/// subtracted before projecting. With a zero offset the embedding is the
/// plain linear map `u_i = V x_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceBasis {
    basis: DMatrix<f64>,
    offset: DVector<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-10;

impl SubspaceBasis {
    /// Wraps a `reduced x full` matrix with orthonormal rows and no offset.
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let full = basis.ncols();
        Self::with_offset(basis, DVector::zeros(full))
    }

    pub fn with_offset(basis: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let (reduced, full) = basis.shape();
        if reduced == 0 || full == 0 {
            return shape_err("basis must be non-empty");
        }
        if reduced > full {
            return shape_err(format!("reduced dim {reduced} exceeds full dim {full}"));
        }
        if offset.len() != full {
            return shape_err(format!("offset has {} entries, expected {full}", offset.len()));
        }
        let gram = &basis * basis.transpose();
        let dev = (gram - DMatrix::identity(reduced, reduced)).abs().max();
        if !(dev <= ORTHONORMAL_TOL) {
            return param_err(format!("basis rows not orthonormal (max deviation {dev:.3e})"));
        }
        if offset.iter().any(|v| !v.is_finite()) {
            return param_err("offset must be finite");
        }
        Ok(Self { basis, offset })
    }

    pub fn identity(dim: usize) -> Self {
        Self { basis: DMatrix::identity(dim, dim), offset: DVector::zeros(dim) }
    }

    pub fn full_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn reduced_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub(crate) fn lift_map(&self) -> PixelMap {
        PixelMap::new(&self.basis.transpose(), Some(self.offset.as_slice()))
    }
}

/// `u_i = V (x_i - offset)` for every pixel.
pub fn project(v: &BipVector, basis: &SubspaceBasis) -> Result<BipVector> {
    if v.n_bands != basis.full_dim() {
        return shape_err(format!("vector has {} bands, basis expects {}", v.n_bands, basis.full_dim()));
    }
    let map = PixelMap::new(basis.matrix(), None);
    let off = basis.offset.as_slice();
    let mut centered = Vec::with_capacity(v.n_bands);
    let mut out = vec![0.0; v.n_pixels * basis.reduced_dim()];
    for (x, u) in v.pixels().zip(out.chunks_exact_mut(basis.reduced_dim())) {
        centered.clear();
        centered.extend(x.iter().zip(off).map(|(a, b)| a - b));
        map.apply_pixel(&centered, u);
    }
    BipVector::new(v.n_pixels, basis.reduced_dim(), out)
}

/// `x_i = V^T u_i + offset` for every pixel.
pub fn backproject(u: &BipVector, basis: &SubspaceBasis) -> Result<BipVector> {
    if u.n_bands != basis.reduced_dim() {
        return shape_err(format!("vector has {} bands, basis reduces to {}", u.n_bands, basis.reduced_dim()));
    }
    let out = basis.lift_map().apply(u.as_slice());
    BipVector::new(u.n_pixels, basis.full_dim(), out)
}

/// A per-pixel affine map `y_i = A x_i + b` with `A` stored row-major.
#[derive(Debug, Clone)]
pub(crate) struct PixelMap {
    rows: usize,
    cols: usize,
    a: Vec<f64>,
    b: Option<Vec<f64>>,
}

impl PixelMap {
    pub(crate) fn new(a: &DMatrix<f64>, b: Option<&[f64]>) -> Self {
        let (rows, cols) = a.shape();
        let mut flat = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                flat.push(a[(r, c)]);
            }
        }
        Self { rows, cols, a: flat, b: b.map(|s| s.to_vec()) }
    }

    pub(crate) fn out_dim(&self) -> usize {
        self.rows
    }

    pub(crate) fn in_dim(&self) -> usize {
        self.cols
    }

    #[inline]
    pub(crate) fn apply_pixel(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &self.a[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b.as_ref().map_or(0.0, |b| b[r]);
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *yr = acc;
        }
    }

    pub(crate) fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() / self.cols;
        let mut out = vec![0.0; n * self.rows];
        for (xi, yi) in x.chunks_exact(self.cols).zip(out.chunks_exact_mut(self.rows)) {
            self.apply_pixel(xi, yi);
        }
        out
    }

    /// Applies the transpose of the linear part only; the offset has no adjoint.
    pub(crate) fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let n = y.len() / self.rows;
        let mut out = vec![0.0; n * self.cols];
        for (yi, xi) in y.chunks_exact(self.rows).zip(out.chunks_exact_mut(self.cols)) {
            for (r, &yr) in yi.iter().enumerate() {
                let row = &self.a[r * self.cols..(r + 1) * self.cols];
                for (acc, w) in xi.iter_mut().zip(row) {
                    *acc += w * yr;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_orthonormal;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_pixel_vectorizes_to_its_spectrum() {
        let cube = ImageCube::new(1, 1, 3, vec![0.5, 1.5, 2.5]).unwrap();
        assert_eq!(vectorize_bip(&cube).as_slice(), &[0.5, 1.5, 2.5]);
    }

    #[test]
    fn two_pixel_ordering_is_pixel_major() {
        let cube = ImageCube::from_fn(2, 1, 2, |r, _, k| (2 * r + k + 1) as f64);
        assert_eq!(vectorize_bip(&cube).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn devectorize_builds_expected_cubes() {
        let v = BipVector::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cube = devectorize_bip(&v, 2, 1).unwrap();
        assert_eq!((cube.get(0, 0, 1), cube.get(1, 0, 0)), (2.0, 3.0));

        let single = BipVector::new(6, 1, (0..6).map(f64::from).collect()).unwrap();
        let img = devectorize_bip(&single, 2, 3).unwrap();
        assert_eq!(img.bands(), 1);
        assert_eq!(img.get(1, 2, 0), 5.0);

        assert!(matches!(devectorize_bip(&v, 3, 1), Err(FusionError::Shape(_))));
    }

    #[test]
    fn cube_rejects_bad_input() {
        assert!(ImageCube::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageCube::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(ImageCube::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn identity_and_selection_bases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = BipVector::new(5, 3, (0..15).map(|_| rng.random()).collect()).unwrap();
        let id = SubspaceBasis::identity(3);
        assert_eq!(project(&v, &id).unwrap(), v);
        assert_eq!(backproject(&v, &id).unwrap(), v);

        let sel = SubspaceBasis::new(DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0])).unwrap();
        let u = project(&v, &sel).unwrap();
        for i in 0..5 {
            assert_eq!(u.pixel(i)[0], v.pixel(i)[0]);
        }
    }

    #[test]
    fn project_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vmat = random_orthonormal(3, 6, &mut rng);
        let basis = SubspaceBasis::new(vmat.clone()).unwrap();
        let x = BipVector::new(10, 6, (0..60).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let u = project(&x, &basis).unwrap();
        for i in 0..10 {
            for r in 0..3 {
                let mut acc = 0.0;
                for c in 0..6 {
                    acc += vmat[(r, c)] * x.as_slice()[i * 6 + c];
                }
                assert!((u.pixel(i)[r] - acc).abs() < 1e-12);
            }
        }
        assert!(project(&u, &basis).is_err());
    }

    #[test]
    fn rejects_non_orthonormal_basis() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        assert!(matches!(SubspaceBasis::new(m), Err(FusionError::Parameter(_))));
    }

    fn shapes() -> impl Strategy<Value = (usize, usize, usize, u64)> {
        (1usize..=16, 1usize..=16, 1usize..=32, any::<u64>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn vectorize_round_trip((rows, cols, bands, seed) in shapes()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cube = ImageCube::from_fn(rows, cols, bands, |_, _, _| rng.random_range(-1e3..1e3));
            let v = vectorize_bip(&cube);
            prop_assert_eq!(devectorize_bip(&v, rows, cols).unwrap(), cube);
            let back = vectorize_bip(&devectorize_bip(&v, rows, cols).unwrap());
            prop_assert_eq!(back, v);
        }

        #[test]
        fn projector_identities(full in 1usize..12, frac in 0.0f64..1.0, with_offset: bool, seed: u64) {
            let reduced = 1 + ((full - 1) as f64 * frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vmat = random_orthonormal(reduced, full, &mut rng);
            let offset = if with_offset {
                DVector::from_fn(full, |_, _| rng.random_range(-1.0..1.0))
            } else {
                DVector::zeros(full)
            };
            let basis = SubspaceBasis::with_offset(vmat.clone(), offset.clone()).unwrap();

            let u = BipVector::new(4, reduced, (0..4 * reduced).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let uu = project(&backproject(&u, &basis).unwrap(), &basis).unwrap();
            for (a, b) in uu.as_slice().iter().zip(u.as_slice()) {
                prop_assert!((a - b).abs() < 1e-10);
            }

            let x = BipVector::new(4, full, (0..4 * full).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let px = backproject(&project(&x, &basis).unwrap(), &basis).unwrap();
            let ppx = backproject(&project(&px, &basis).unwrap(), &basis).unwrap();
            for (a, b) in ppx.as_slice().iter().zip(px.as_slice()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            // residual orthogonal to the row space
            for i in 0..4 {
                let r = DVector::from_iterator(full, x.pixel(i).iter().zip(px.pixel(i)).map(|(a, b)| a - b));
                let comp = &vmat * r;
                prop_assert!(comp.amax() < 1e-10);
            }
        }
    }
}
