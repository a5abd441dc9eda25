//! Fusion quality measures and sensor SNR bookkeeping.

use serde::{Deserialize, Serialize};

use crate::cube::{vectorize_bip, BipVector, ImageCube};
use crate::error::{param_err, shape_err, FusionError, Result};
use crate::forward::SensorModel;

fn check_same(a: &BipVector, b: &BipVector) -> Result<()> {
    if !a.same_shape(b) {
        return shape_err(format!(
            "metric inputs differ: {}x{} vs {}x{}",
            a.n_pixels(),
            a.n_bands(),
            b.n_pixels(),
            b.n_bands()
        ));
    }
    Ok(())
}

fn check_cubes(a: &ImageCube, b: &ImageCube) -> Result<()> {
    if (a.rows(), a.cols(), a.bands()) != (b.rows(), b.cols(), b.bands()) {
        return shape_err(format!(
            "metric inputs differ: {}x{}x{} vs {}x{}x{}",
            a.rows(),
            a.cols(),
            a.bands(),
            b.rows(),
            b.cols(),
            b.bands()
        ));
    }
    Ok(())
}

/// `10 log10(||x||^2 / ||x - x^||^2)`; `+inf` for a perfect estimate.
pub fn rsnr(reference: &BipVector, estimate: &BipVector) -> Result<f64> {
    check_same(reference, estimate)?;
    let signal = reference.norm_squared();
    if signal == 0.0 {
        return Err(FusionError::Undefined("RSNR of an all-zero reference".into()));
    }
    let err: f64 = reference.as_slice().iter().zip(estimate.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / err).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamResult {
    /// Mean spectral angle over the usable pixels, in degrees.
    pub mean_deg: f64,
    /// Pixels skipped because one of the two spectra has zero norm.
    pub skipped: usize,
}

pub fn sam(reference: &BipVector, estimate: &BipVector) -> Result<SamResult> {
    check_same(reference, estimate)?;
    let mut total = 0.0;
    let mut used = 0usize;
    for (x, y) in reference.pixels().zip(estimate.pixels()) {
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            continue;
        }
        // 2 atan2(|x/|x| - y/|y||, |x/|x| + y/|y||) stays accurate near zero angle
        let (mut diff, mut sum) = (0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            let (a, b) = (a / nx, b / ny);
            diff += (a - b) * (a - b);
            sum += (a + b) * (a + b);
        }
        total += 2.0 * diff.sqrt().atan2(sum.sqrt());
        used += 1;
    }
    let skipped = reference.n_pixels() - used;
    if used == 0 {
        return Err(FusionError::Undefined("SAM: every pixel has a zero spectrum".into()));
    }
    Ok(SamResult { mean_deg: (total / used as f64).to_degrees(), skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UiqiWindow {
    /// One index per band over the whole image.
    #[default]
    Global,
    /// Mean over every `size x size` window position.
    Sliding { size: usize },
}

/// Index of one pair of equally long signals.
///
/// Both constant: 1 if equal, else 0. Both means zero: the luminance factor
/// is taken as 1.
fn uiqi_pair(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let const_a = a.iter().all(|v| *v == a[0]);
    let const_b = b.iter().all(|v| *v == b[0]);
    if const_a && const_b {
        return if a[0] == b[0] { 1.0 } else { 0.0 };
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
        cov += (x - ma) * (y - mb);
    }
    let structure = 2.0 * cov / (va + vb);
    let lum_den = ma * ma + mb * mb;
    let luminance = if lum_den == 0.0 { 1.0 } else { 2.0 * ma * mb / lum_den };
    structure * luminance
}

/// Band-averaged universal image quality index.
pub fn uiqi(reference: &ImageCube, estimate: &ImageCube, window: UiqiWindow) -> Result<f64> {
    check_cubes(reference, estimate)?;
    let (rows, cols) = (reference.rows(), reference.cols());
    let mut total = 0.0;
    for k in 0..reference.bands() {
        let a = reference.band(k);
        let b = estimate.band(k);
        total += match window {
            UiqiWindow::Global => uiqi_pair(&a, &b),
            UiqiWindow::Sliding { size } => {
                if size == 0 || size > rows || size > cols {
                    return param_err(format!("UIQI window {size} does not fit a {rows}x{cols} image"));
                }
                let mut sum = 0.0;
                let mut count = 0usize;
                let mut wa = Vec::with_capacity(size * size);
                let mut wb = Vec::with_capacity(size * size);
                for r0 in 0..=rows - size {
                    for c0 in 0..=cols - size {
                        wa.clear();
                        wb.clear();
                        for r in r0..r0 + size {
                            wa.extend_from_slice(&a[r * cols + c0..r * cols + c0 + size]);
                            wb.extend_from_slice(&b[r * cols + c0..r * cols + c0 + size]);
                        }
                        sum += uiqi_pair(&wa, &wb);
                        count += 1;
                    }
                }
                sum / count as f64
            }
        };
    }
    Ok(total / reference.bands() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErgasForm {
    /// `sqrt(mean((RMSE_i / mu_i)^2))`.
    #[default]
    Squared,
    /// `sqrt(mean(RMSE_i / mu_i))`, without squaring the ratio.
    Printed,
}

/// `100 / d^2 * sqrt(mean_i (RMSE_i / mu_i)^2)`, where `d` is the resolution
/// factor between the two input grids and `mu_i` the reference band mean.
pub fn ergas(reference: &ImageCube, estimate: &ImageCube, resolution_factor: f64, form: ErgasForm) -> Result<f64> {
    check_cubes(reference, estimate)?;
    if !(resolution_factor > 0.0 && resolution_factor.is_finite()) {
        return param_err("ERGAS resolution factor must be positive");
    }
    let n = reference.n_pixels() as f64;
    let bands = reference.bands();
    let mut acc = 0.0;
    for k in 0..bands {
        let a = reference.band(k);
        let b = estimate.band(k);
        let mu = a.iter().sum::<f64>() / n;
        if mu == 0.0 {
            return Err(FusionError::Undefined(format!("ERGAS: band {k} has zero mean")));
        }
        let rmse = (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt();
        acc += match form {
            ErgasForm::Squared => (rmse / mu).powi(2),
            ErgasForm::Printed => rmse / mu,
        };
    }
    Ok(100.0 / (resolution_factor * resolution_factor) * (acc / bands as f64).sqrt())
}

/// Mean absolute deviation over every pixel and band.
pub fn dd(reference: &ImageCube, estimate: &ImageCube) -> Result<f64> {
    check_cubes(reference, estimate)?;
    let a = reference.as_slice();
    Ok(a.iter().zip(estimate.as_slice()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

fn band_signal_energy(sensor: &SensorModel, x: &BipVector) -> Result<Vec<f64>> {
    let y = sensor.apply_forward(x)?;
    let mut e = vec![0.0; y.n_bands()];
    for px in y.pixels() {
        for (acc, v) in e.iter_mut().zip(px) {
            *acc += v * v;
        }
    }
    Ok(e)
}

/// `10 log10(||(F x)_i||^2 / (N s^2_i))` per output band; `+inf` where `s^2 = 0`.
pub fn snr_db(sensor: &SensorModel, x_true: &BipVector) -> Result<Vec<f64>> {
    let n = sensor.out_pixels() as f64;
    let e = band_signal_energy(sensor, x_true)?;
    if sensor.noise_variances.len() != e.len() {
        return shape_err("sensor variances do not match its band count");
    }
    Ok(e.iter()
        .zip(&sensor.noise_variances)
        .map(|(e, s2)| if *s2 == 0.0 { f64::INFINITY } else { 10.0 * (e / (n * s2)).log10() })
        .collect())
}

/// Per-band noise variances that give the requested SNRs on `x_true`.
pub fn solve_variance_for_snr(sensor: &SensorModel, x_true: &BipVector, snr_db: &[f64]) -> Result<Vec<f64>> {
    let n = sensor.out_pixels() as f64;
    let e = band_signal_energy(sensor, x_true)?;
    if snr_db.len() != e.len() {
        return shape_err(format!("{} SNR targets for {} bands", snr_db.len(), e.len()));
    }
    if snr_db.iter().any(|s| !s.is_finite()) {
        return param_err("SNR targets must be finite");
    }
    let v: Vec<f64> = e.iter().zip(snr_db).map(|(e, s)| e / (n * 10f64.powf(s / 10.0))).collect();
    if v.iter().any(|s| !(*s > 0.0)) {
        return Err(FusionError::Undefined("a band carries no signal; its SNR cannot be set".into()));
    }
    Ok(v)
}

/// The five headline measures for one fused cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    #[serde(rename = "rsnr_db")]
    pub rsnr: f64,
    pub sam_deg: f64,
    pub uiqi: f64,
    pub ergas: f64,
    pub dd: f64,
}

impl QualityReport {
    pub const CSV_HEADER: &'static str = "rsnr_db,sam_deg,uiqi,ergas,dd";

    pub fn compute(reference: &ImageCube, estimate: &ImageCube, resolution_factor: f64) -> Result<Self> {
        let (r, e) = (vectorize_bip(reference), vectorize_bip(estimate));
        Ok(Self {
            rsnr: rsnr(&r, &e)?,
            sam_deg: sam(&r, &e)?.mean_deg,
            uiqi: uiqi(reference, estimate, UiqiWindow::Global)?,
            ergas: ergas(reference, estimate, resolution_factor, ErgasForm::Squared)?,
            dd: dd(reference, estimate)?,
        })
    }

    /// Header line followed by one data row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(self).map_err(|e| FusionError::Parse(e.to_string()))?;
        let bytes = w.into_inner().map_err(|e| FusionError::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| FusionError::Parse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::SpectralResponse;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(rows: usize, cols: usize, bands: usize, seed: u64) -> ImageCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageCube::from_fn(rows, cols, bands, |_, _, _| rng.random_range(0.1..1.0))
    }

    #[test]
    fn perfect_reconstruction() {
        let c = cube(4, 5, 3, 1);
        let r = QualityReport::compute(&c, &c, 4.0).unwrap();
        assert_eq!(r.rsnr, f64::INFINITY);
        assert_eq!(r.sam_deg, 0.0);
        assert_eq!(r.uiqi, 1.0);
        assert_eq!(r.ergas, 0.0);
        assert_eq!(r.dd, 0.0);
    }

    #[test]
    fn rsnr_arithmetic() {
        let x = BipVector::new(1, 1, vec![10.0]).unwrap();
        let y = BipVector::new(1, 1, vec![9.0]).unwrap();
        assert!((rsnr(&x, &y).unwrap() - 20.0).abs() < 1e-12);
        assert!(matches!(rsnr(&BipVector::zeros(1, 1), &y), Err(FusionError::Undefined(_))));
        assert!(rsnr(&x, &BipVector::zeros(2, 1)).is_err());
    }

    #[test]
    fn sam_special_cases() {
        let x = vectorize_bip(&cube(3, 3, 4, 2));
        let scaled = x.with_data(x.as_slice().iter().map(|v| 3.5 * v).collect()).unwrap();
        assert!(sam(&x, &scaled).unwrap().mean_deg.abs() < 1e-10);
        let a = BipVector::new(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let b = BipVector::new(2, 2, vec![0.0, 3.0, 5.0, 0.0]).unwrap();
        assert!((sam(&a, &b).unwrap().mean_deg - 90.0).abs() < 1e-12);
        let z = BipVector::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let s = sam(&z, &z).unwrap();
        assert_eq!(s.skipped, 1);
        assert!(matches!(sam(&BipVector::zeros(2, 2), &z), Err(FusionError::Undefined(_))));
    }

    #[test]
    fn sam_matches_loop_oracle() {
        let x = vectorize_bip(&cube(4, 4, 6, 3));
        let y = vectorize_bip(&cube(4, 4, 6, 4));
        let mut total = 0.0;
        for p in 0..16 {
            let (mut d, mut nx, mut ny) = (0.0, 0.0, 0.0);
            for k in 0..6 {
                let (a, b) = (x.as_slice()[p * 6 + k], y.as_slice()[p * 6 + k]);
                d += a * b;
                nx += a * a;
                ny += b * b;
            }
            total += (d / (nx.sqrt() * ny.sqrt())).acos() * 180.0 / std::f64::consts::PI;
        }
        assert!((sam(&x, &y).unwrap().mean_deg - total / 16.0).abs() < 1e-10);
    }

    #[test]
    fn uiqi_cases() {
        let c = ImageCube::from_fn(3, 3, 2, |r, c, k| r as f64 - c as f64 + k as f64 * 0.0);
        let neg = ImageCube::from_fn(3, 3, 2, |r, c, _| -(r as f64 - c as f64));
        assert!((uiqi(&c, &c, UiqiWindow::Global).unwrap() - 1.0).abs() < 1e-12);
        assert!((uiqi(&c, &neg, UiqiWindow::Global).unwrap() + 1.0).abs() < 1e-12);
        let k1 = ImageCube::from_fn(2, 2, 1, |_, _, _| 0.3);
        let k2 = ImageCube::from_fn(2, 2, 1, |_, _, _| 0.4);
        assert_eq!(uiqi(&k1, &k1, UiqiWindow::Global).unwrap(), 1.0);
        assert_eq!(uiqi(&k1, &k2, UiqiWindow::Global).unwrap(), 0.0);
        let a = cube(8, 8, 2, 5);
        let b = cube(8, 8, 2, 6);
        let g = uiqi(&a, &b, UiqiWindow::Global).unwrap();
        assert!((-1.0..=1.0).contains(&g));
        let full = uiqi(&a, &b, UiqiWindow::Sliding { size: 8 }).unwrap();
        assert!((full - g).abs() < 1e-12);
        assert!(uiqi(&a, &b, UiqiWindow::Sliding { size: 9 }).is_err());
    }

    #[test]
    fn uiqi_matches_closed_form() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.5, 1.5, 3.5, 3.0];
        let n = 4.0;
        let ma: f64 = a.iter().sum::<f64>() / n;
        let mb: f64 = b.iter().sum::<f64>() / n;
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0);
        let vb: f64 = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / (n - 1.0);
        let cab: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
        let expect = 4.0 * cab * ma * mb / ((va + vb) * (ma * ma + mb * mb));
        assert!((uiqi_pair(&a, &b) - expect).abs() < 1e-14);
    }

    #[test]
    fn ergas_arithmetic() {
        // one band, mean 10, RMSE 1, d = 5
        let r = ImageCube::new(1, 2, 1, vec![9.0, 11.0]).unwrap();
        let e = ImageCube::new(1, 2, 1, vec![10.0, 10.0]).unwrap();
        assert!((ergas(&r, &e, 5.0, ErgasForm::Squared).unwrap() - 0.4).abs() < 1e-12);
        assert!((ergas(&r, &e, 5.0, ErgasForm::Printed).unwrap() - 4.0 * 0.1f64.sqrt()).abs() < 1e-12);
        assert_eq!(ergas(&r, &r, 5.0, ErgasForm::Squared).unwrap(), 0.0);
        let z = ImageCube::new(1, 2, 1, vec![-1.0, 1.0]).unwrap();
        assert!(matches!(ergas(&z, &e, 5.0, ErgasForm::Squared), Err(FusionError::Undefined(_))));
    }

    #[test]
    fn dd_arithmetic() {
        let z = ImageCube::zeros(2, 3, 2);
        let h = ImageCube::from_fn(2, 3, 2, |_, _, _| 0.5);
        assert_eq!(dd(&z, &h).unwrap(), 0.5);
        assert_eq!(dd(&h, &h).unwrap(), 0.0);
        assert!(dd(&z, &ImageCube::zeros(3, 2, 2)).is_err());
    }

    #[test]
    fn snr_round_trip() {
        let x = vectorize_bip(&cube(4, 4, 5, 7));
        let mut s = SensorModel::builder("hs", 4, 4, 5).decimation(2).build().unwrap();
        let targets = [35.0, 30.0, 12.5, 0.0, -3.0];
        s.noise_variances = solve_variance_for_snr(&s, &x, &targets).unwrap();
        for (a, b) in snr_db(&s, &x).unwrap().iter().zip(targets) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_db_gives_per_pixel_energy() {
        // band energy n * 4 with n = 2 observed pixels
        let s = SensorModel::builder("id", 1, 2, 1).spectral(SpectralResponse::identity(1)).build().unwrap();
        let x = BipVector::new(2, 1, vec![2.0, -2.0]).unwrap();
        assert_eq!(solve_variance_for_snr(&s, &x, &[0.0]).unwrap(), vec![4.0]);
    }

    #[test]
    fn csv_row() {
        let r = QualityReport { rsnr: 20.0, sam_deg: 1.5, uiqi: 0.99, ergas: 3.0, dd: 0.01 };
        assert_eq!(r.to_csv().unwrap(), "rsnr_db,sam_deg,uiqi,ergas,dd\n20.0,1.5,0.99,3.0,0.01\n");
    }

    proptest! {
        #[test]
        fn sam_is_scale_invariant(seed: u64, ca in 0.01f64..100.0, cb in 0.01f64..100.0) {
            let x = vectorize_bip(&cube(3, 3, 4, seed));
            let y = vectorize_bip(&cube(3, 3, 4, seed.wrapping_add(1)));
            let xs = x.with_data(x.as_slice().iter().map(|v| ca * v).collect()).unwrap();
            let ys = y.with_data(y.as_slice().iter().map(|v| cb * v).collect()).unwrap();
            let base = sam(&x, &y).unwrap().mean_deg;
            prop_assert!((sam(&xs, &ys).unwrap().mean_deg - base).abs() < 1e-10);
        }

        #[test]
        fn error_metrics_grow_with_error(seed: u64, s in 0.01f64..0.5) {
            let r = cube(4, 4, 3, seed);
            let noise = cube(4, 4, 3, seed.wrapping_add(9));
            let e1 = ImageCube::new(4, 4, 3, r.as_slice().iter().zip(noise.as_slice()).map(|(a, n)| a + s * n).collect()).unwrap();
            let e2 = ImageCube::new(4, 4, 3, r.as_slice().iter().zip(noise.as_slice()).map(|(a, n)| a + 2.0 * s * n).collect()).unwrap();
            let q1 = QualityReport::compute(&r, &e1, 4.0).unwrap();
            let q2 = QualityReport::compute(&r, &e2, 4.0).unwrap();
            prop_assert!(q2.rsnr < q1.rsnr);
            prop_assert!(q2.ergas > q1.ergas);
            prop_assert!(q2.dd > q1.dd);
            prop_assert!(q1.uiqi <= 1.0);
        }
    }
}
