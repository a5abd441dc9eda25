//! Per-sensor linear degradation operators and their adjoints.
//!
//! A sensor maps the full-resolution scene (BIP, `rows x cols x bands`) to its
//! observation grid. Spatial operators act band by band, the spectral response
//! acts pixel by pixel, so the two commute; forward application runs spectral,
//! then blur, then decimation, and the adjoint runs the reverse. Nothing is
//! ever materialized as a matrix.

use std::io::Read;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cube::{BipVector, PixelMap, SubspaceBasis};
use crate::error::{param_err, shape_err, FusionError, Result};

/// Non-overlapping `factor x factor` block averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialDecimation {
    pub factor: usize,
}

impl SpatialDecimation {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return param_err("decimation factor must be positive");
        }
        Ok(Self { factor })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Mirror including the edge sample (`-1 -> 0`, `n -> n-1`).
    #[default]
    Symmetric,
    Zero,
    Periodic,
}

impl Boundary {
    /// Maps a possibly out-of-range coordinate back onto `0..n`.
    fn resolve(self, i: isize, n: usize) -> Option<usize> {
        let n_i = n as isize;
        if (0..n_i).contains(&i) {
            return Some(i as usize);
        }
        match self {
            Boundary::Zero => None,
            Boundary::Periodic => Some(i.rem_euclid(n_i) as usize),
            Boundary::Symmetric => {
                let j = i.rem_euclid(2 * n_i);
                Some(if j < n_i { j } else { 2 * n_i - 1 - j } as usize)
            }
        }
    }
}

/// 2-D convolution with an odd-sized kernel summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BlurRepr", into = "BlurRepr")]
pub struct SpatialBlur {
    size: usize,
    kernel: Vec<f64>,
    boundary: Boundary,
}

#[derive(Serialize, Deserialize)]
struct BlurRepr {
    kernel: Vec<Vec<f64>>,
    #[serde(default)]
    boundary: Boundary,
}

impl TryFrom<BlurRepr> for SpatialBlur {
    type Error = FusionError;
    fn try_from(r: BlurRepr) -> Result<Self> {
        let size = r.kernel.len();
        if r.kernel.iter().any(|row| row.len() != size) {
            return shape_err("blur kernel must be square");
        }
        SpatialBlur::new(size, r.kernel.into_iter().flatten().collect(), r.boundary)
    }
}

impl From<SpatialBlur> for BlurRepr {
    fn from(b: SpatialBlur) -> Self {
        BlurRepr { kernel: b.kernel.chunks(b.size).map(<[f64]>::to_vec).collect(), boundary: b.boundary }
    }
}

impl SpatialBlur {
    /// `kernel` is `size x size`, row-major.
    pub fn new(size: usize, kernel: Vec<f64>, boundary: Boundary) -> Result<Self> {
        if size % 2 == 0 {
            return param_err(format!("blur kernel size must be odd, got {size}"));
        }
        if kernel.len() != size * size {
            return shape_err(format!("kernel of size {size} needs {} taps", size * size));
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return param_err("blur kernel has non-finite taps");
        }
        let sum: f64 = kernel.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return param_err(format!("blur kernel sums to {sum}, expected 1"));
        }
        Ok(Self { size, kernel, boundary })
    }

    /// A normalized isotropic Gaussian kernel truncated to `size x size`.
    pub fn gaussian(size: usize, sigma: f64, boundary: Boundary) -> Result<Self> {
        if !(sigma > 0.0) {
            return param_err("gaussian sigma must be positive");
        }
        let h = (size / 2) as f64;
        let mut k: Vec<f64> = (0..size * size)
            .map(|i| {
                let (a, b) = ((i / size) as f64 - h, (i % size) as f64 - h);
                (-(a * a + b * b) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        Self::new(size, k, boundary)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    fn taps(&self) -> impl Iterator<Item = (isize, isize, f64)> + '_ {
        let h = (self.size / 2) as isize;
        self.kernel.iter().enumerate().filter(|(_, w)| **w != 0.0).map(move |(i, &w)| {
            ((i / self.size) as isize - h, (i % self.size) as isize - h, w)
        })
    }

    /// `y[r, c] = sum_{a,b} k[a, b] x[r - a, c - b]`, kernel centered.
    fn apply(&self, x: &[f64], rows: usize, cols: usize, bands: usize, adjoint: bool) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        for (da, db, w) in self.taps() {
            for r in 0..rows {
                let Some(sr) = self.boundary.resolve(r as isize - da, rows) else { continue };
                for c in 0..cols {
                    let Some(sc) = self.boundary.resolve(c as isize - db, cols) else { continue };
                    let (dst, src) = ((r * cols + c) * bands, (sr * cols + sc) * bands);
                    if adjoint {
                        for k in 0..bands {
                            y[src + k] += w * x[dst + k];
                        }
                    } else {
                        for k in 0..bands {
                            y[dst + k] += w * x[src + k];
                        }
                    }
                }
            }
        }
        y
    }
}

/// Spectral response `f`: one normalized non-negative filter per output band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ResponseRepr", into = "ResponseRepr")]
pub struct SpectralResponse {
    matrix: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct ResponseRepr {
    weights: Vec<Vec<f64>>,
}

impl TryFrom<ResponseRepr> for SpectralResponse {
    type Error = FusionError;
    fn try_from(r: ResponseRepr) -> Result<Self> {
        let n = r.weights.len();
        let m = r.weights.first().map_or(0, Vec::len);
        if n == 0 || m == 0 || r.weights.iter().any(|row| row.len() != m) {
            return shape_err("spectral response weights must be a non-empty rectangular table");
        }
        // Stored responses may be deliberately perturbed, so only finiteness is enforced here.
        SpectralResponse::from_raw(DMatrix::from_row_iterator(n, m, r.weights.into_iter().flatten()))
    }
}

impl From<SpectralResponse> for ResponseRepr {
    fn from(s: SpectralResponse) -> Self {
        ResponseRepr { weights: s.matrix.row_iter().map(|r| r.iter().copied().collect()).collect() }
    }
}

impl SpectralResponse {
    /// Validates a `n_out x n_in` matrix of non-negative rows summing to one.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let s = Self::from_raw(matrix)?;
        for (i, row) in s.matrix.row_iter().enumerate() {
            if row.iter().any(|v| *v < 0.0) {
                return param_err(format!("response row {i} has negative weights"));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > 1e-9 {
                return param_err(format!("response row {i} sums to {sum}, expected 1"));
            }
        }
        Ok(s)
    }

    /// Rescales every row to sum to one.
    pub fn normalized(mut matrix: DMatrix<f64>) -> Result<Self> {
        for mut row in matrix.row_iter_mut() {
            let sum = row.sum();
            if !(sum > 0.0) {
                return param_err("response row has non-positive total weight");
            }
            row /= sum;
        }
        Self::new(matrix)
    }

    /// Accepts any finite matrix. Used for responses carrying injected errors.
    pub fn from_raw(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.is_empty() {
            return shape_err("empty spectral response");
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return param_err("spectral response has non-finite weights");
        }
        Ok(Self { matrix })
    }

    /// Single-band average of all input bands, the panchromatic case.
    pub fn uniform(n_in: usize) -> Self {
        Self { matrix: DMatrix::from_element(1, n_in, 1.0 / n_in as f64) }
    }

    pub fn identity(n: usize) -> Self {
        Self { matrix: DMatrix::identity(n, n) }
    }

    pub fn n_out(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Reads tabulated response curves.
    ///
    /// Expected layout: header `wavelength,band1,...,bandK`, then one row per
    /// source band. Each output band (column) is rescaled to sum to one.
    /// Returns the response together with the wavelength column.
    pub fn from_csv<R: Read>(reader: R) -> Result<(Self, Vec<f64>)> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| FusionError::Parse(e.to_string()))?.clone();
        if header.len() < 2 || !header[0].eq_ignore_ascii_case("wavelength") {
            return Err(FusionError::Parse("response CSV header must start with `wavelength`".into()));
        }
        let k = header.len() - 1;
        let mut wavelengths = Vec::new();
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); k];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| FusionError::Parse(e.to_string()))?;
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| FusionError::Parse(format!("row {}: {s:?}: {e}", line + 2)))
            };
            wavelengths.push(parse(&rec[0])?);
            for (j, col) in columns.iter_mut().enumerate() {
                col.push(parse(&rec[j + 1])?);
            }
        }
        if wavelengths.is_empty() {
            return Err(FusionError::Parse("response CSV has no rows".into()));
        }
        let m = wavelengths.len();
        let matrix = DMatrix::from_fn(k, m, |i, j| columns[i][j]);
        if matrix.iter().any(|v| *v < 0.0) {
            return param_err("response CSV has negative weights");
        }
        Ok((Self::normalized(matrix)?, wavelengths))
    }
}

/// One observing instrument: its degradation operator and band noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub name: String,
    /// Full-resolution input grid.
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    #[serde(default)]
    pub blur: Option<SpatialBlur>,
    #[serde(default)]
    pub decimation: Option<SpatialDecimation>,
    #[serde(default)]
    pub spectral: Option<SpectralResponse>,
    /// `s^2_{p,i}` per output band. All zeros means noiseless.
    pub noise_variances: Vec<f64>,
}

impl SensorModel {
    pub fn builder(name: impl Into<String>, rows: usize, cols: usize, bands: usize) -> SensorBuilder {
        SensorBuilder {
            sensor: SensorModel {
                name: name.into(),
                rows,
                cols,
                bands,
                blur: None,
                decimation: None,
                spectral: None,
                noise_variances: Vec::new(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.bands == 0 {
            return shape_err(format!("sensor {}: empty input grid", self.name));
        }
        if self.blur.is_none() && self.decimation.is_none() && self.spectral.is_none() {
            return param_err(format!("sensor {}: needs a spatial or spectral operator", self.name));
        }
        if let Some(dec) = self.decimation {
            if dec.factor == 0 || self.rows % dec.factor != 0 || self.cols % dec.factor != 0 {
                return param_err(format!(
                    "sensor {}: grid {}x{} not divisible by decimation factor {}",
                    self.name, self.rows, self.cols, dec.factor
                ));
            }
        }
        if let Some(s) = &self.spectral {
            if s.n_in() != self.bands {
                return shape_err(format!(
                    "sensor {}: response consumes {} bands, grid has {}",
                    self.name,
                    s.n_in(),
                    self.bands
                ));
            }
        }
        if self.noise_variances.len() != self.out_bands() {
            return shape_err(format!(
                "sensor {}: {} noise variances for {} output bands",
                self.name,
                self.noise_variances.len(),
                self.out_bands()
            ));
        }
        if self.noise_variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return param_err(format!("sensor {}: noise variances must be finite and non-negative", self.name));
        }
        Ok(())
    }

    fn factor(&self) -> usize {
        self.decimation.map_or(1, |d| d.factor)
    }

    pub fn out_rows(&self) -> usize {
        self.rows / self.factor()
    }

    pub fn out_cols(&self) -> usize {
        self.cols / self.factor()
    }

    pub fn out_bands(&self) -> usize {
        self.spectral.as_ref().map_or(self.bands, SpectralResponse::n_out)
    }

    pub fn out_pixels(&self) -> usize {
        self.out_rows() * self.out_cols()
    }

    fn check_input(&self, x: &BipVector, bands: usize) -> Result<()> {
        if x.n_pixels() != self.rows * self.cols || x.n_bands() != bands {
            return shape_err(format!(
                "sensor {} expects {} pixels x {bands} bands, got {} x {}",
                self.name,
                self.rows * self.cols,
                x.n_pixels(),
                x.n_bands()
            ));
        }
        Ok(())
    }

    fn check_output(&self, y: &BipVector) -> Result<()> {
        if y.n_pixels() != self.out_pixels() || y.n_bands() != self.out_bands() {
            return shape_err(format!(
                "sensor {} produces {} pixels x {} bands, got {} x {}",
                self.name,
                self.out_pixels(),
                self.out_bands(),
                y.n_pixels(),
                y.n_bands()
            ));
        }
        Ok(())
    }

    /// Blur then decimation on a full-grid buffer with `bands` values per pixel.
    pub(crate) fn spatial_forward(&self, x: Vec<f64>, bands: usize) -> Vec<f64> {
        let x = match &self.blur {
            Some(b) => b.apply(&x, self.rows, self.cols, bands, false),
            None => x,
        };
        let d = self.factor();
        if d == 1 {
            return x;
        }
        let (orows, ocols) = (self.rows / d, self.cols / d);
        let mut y = vec![0.0; orows * ocols * bands];
        let scale = 1.0 / (d * d) as f64;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let dst = ((r / d) * ocols + c / d) * bands;
                let src = (r * self.cols + c) * bands;
                for k in 0..bands {
                    y[dst + k] += scale * x[src + k];
                }
            }
        }
        y
    }

    pub(crate) fn spatial_adjoint(&self, y: &[f64], bands: usize) -> Vec<f64> {
        let d = self.factor();
        let x = if d == 1 {
            y.to_vec()
        } else {
            let ocols = self.cols / d;
            let scale = 1.0 / (d * d) as f64;
            let mut x = vec![0.0; self.rows * self.cols * bands];
            for r in 0..self.rows {
                for c in 0..self.cols {
                    let src = ((r / d) * ocols + c / d) * bands;
                    let dst = (r * self.cols + c) * bands;
                    for k in 0..bands {
                        x[dst + k] = scale * y[src + k];
                    }
                }
            }
            x
        };
        match &self.blur {
            Some(b) => b.apply(&x, self.rows, self.cols, bands, true),
            None => x,
        }
    }

    /// Noiseless observation `F x`.
    pub fn apply_forward(&self, x: &BipVector) -> Result<BipVector> {
        self.check_input(x, self.bands)?;
        let spectral = match &self.spectral {
            Some(s) => PixelMap::new(s.matrix(), None).apply(x.as_slice()),
            None => x.as_slice().to_vec(),
        };
        BipVector::new(self.out_pixels(), self.out_bands(), self.spatial_forward(spectral, self.out_bands()))
    }

    /// `F^T y`.
    pub fn apply_adjoint(&self, y: &BipVector) -> Result<BipVector> {
        self.check_output(y)?;
        let spatial = self.spatial_adjoint(y.as_slice(), self.out_bands());
        let x = match &self.spectral {
            Some(s) => PixelMap::new(s.matrix(), None).apply_transpose(&spatial),
            None => spatial,
        };
        BipVector::new(self.rows * self.cols, self.bands, x)
    }

    /// Precomposes the sensor with the subspace lift `x_i = V^T u_i + offset`.
    pub fn through_subspace(&self, basis: &SubspaceBasis) -> Result<ProjectedSensor> {
        self.validate()?;
        if basis.full_dim() != self.bands {
            return shape_err(format!(
                "sensor {} has {} bands, basis lifts to {}",
                self.name,
                self.bands,
                basis.full_dim()
            ));
        }
        let lift = basis.matrix().transpose();
        let (a, b) = match &self.spectral {
            Some(s) => (s.matrix() * &lift, s.matrix() * basis.offset()),
            None => (lift, basis.offset().clone()),
        };
        Ok(ProjectedSensor {
            sensor: self.clone(),
            reduced_dim: basis.reduced_dim(),
            map: PixelMap::new(&a, Some(b.as_slice())),
        })
    }

    /// Adds `N(0, s^2_k)` noise to band `k` of every pixel, reproducibly from `seed`.
    ///
    /// If every variance is exactly zero the input is returned unchanged.
    pub fn add_noise(&self, y: &BipVector, seed: u64) -> Result<BipVector> {
        self.check_output(y)?;
        if self.noise_variances.iter().all(|v| *v == 0.0) {
            return Ok(y.clone());
        }
        if let Some(v) = self.noise_variances.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return param_err(format!("sensor {}: noise variance {v} must be positive", self.name));
        }
        let sd: Vec<f64> = self.noise_variances.iter().map(|v| v.sqrt()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = y.clone();
        for px in out.as_mut_slice().chunks_exact_mut(sd.len()) {
            for (v, s) in px.iter_mut().zip(&sd) {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += s * n;
            }
        }
        Ok(out)
    }
}

pub struct SensorBuilder {
    sensor: SensorModel,
}

impl SensorBuilder {
    pub fn blur(mut self, blur: SpatialBlur) -> Self {
        self.sensor.blur = Some(blur);
        self
    }

    pub fn decimation(mut self, factor: usize) -> Self {
        self.sensor.decimation = Some(SpatialDecimation { factor });
        self
    }

    pub fn spectral(mut self, response: SpectralResponse) -> Self {
        self.sensor.spectral = Some(response);
        self
    }

    pub fn noise_variances(mut self, v: Vec<f64>) -> Self {
        self.sensor.noise_variances = v;
        self
    }

    /// Noiseless unless variances were given.
    pub fn build(mut self) -> Result<SensorModel> {
        if self.sensor.noise_variances.is_empty() {
            self.sensor.noise_variances = vec![0.0; self.sensor.out_bands()];
        }
        self.sensor.validate()?;
        Ok(self.sensor)
    }
}

/// A sensor fused with the subspace lift: `u -> F (V^T u_i + offset)`.
#[derive(Debug, Clone)]
pub struct ProjectedSensor {
    sensor: SensorModel,
    reduced_dim: usize,
    map: PixelMap,
}

impl ProjectedSensor {
    pub fn sensor(&self) -> &SensorModel {
        &self.sensor
    }

    pub fn reduced_dim(&self) -> usize {
        self.reduced_dim
    }

    pub(crate) fn forward_slice(&self, u: &[f64]) -> Vec<f64> {
        self.sensor.spatial_forward(self.map.apply(u), self.map.out_dim())
    }

    /// Linear part only: `V F^T y`.
    pub(crate) fn adjoint_slice(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.map.in_dim(), self.reduced_dim);
        self.map.apply_transpose(&self.sensor.spatial_adjoint(y, self.map.out_dim()))
    }

    pub fn forward(&self, u: &BipVector) -> Result<BipVector> {
        if u.n_pixels() != self.sensor.rows * self.sensor.cols || u.n_bands() != self.reduced_dim {
            return shape_err(format!(
                "projected sensor {} expects {} pixels x {} bands",
                self.sensor.name,
                self.sensor.rows * self.sensor.cols,
                self.reduced_dim
            ));
        }
        BipVector::new(self.sensor.out_pixels(), self.sensor.out_bands(), self.forward_slice(u.as_slice()))
    }

    pub fn adjoint(&self, y: &BipVector) -> Result<BipVector> {
        self.sensor.check_output(y)?;
        BipVector::new(self.sensor.rows * self.sensor.cols, self.reduced_dim, self.adjoint_slice(y.as_slice()))
    }
}

/// `F (V^T u + offset)` without materializing the full-band image.
pub fn apply_forward_through_subspace(
    sensor: &SensorModel,
    basis: &SubspaceBasis,
    u: &BipVector,
) -> Result<BipVector> {
    sensor.through_subspace(basis)?.forward(u)
}
