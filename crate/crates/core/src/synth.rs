//! Synthetic experiments: a low-rank reference scene, its HS and MS
//! degradations at prescribed SNRs, and perturbed spectral responses.

use std::f64::consts::PI;
use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::{devectorize_bip, vectorize_bip, ImageCube};
use crate::error::{param_err, shape_err, FusionError, Result};
use crate::forward::{SensorModel, SpectralResponse};
use crate::metrics::solve_variance_for_snr;

/// Independent stream seeds from one experiment seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined input
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_REFERENCE: u64 = 0;
const STREAM_HS_NOISE: u64 = 1;
const STREAM_MS_NOISE: u64 = 2;
const STREAM_RESPONSE: u64 = 3;

/// Per-band SNR targets in dB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SnrSpec {
    Uniform(f64),
    PerBand(Vec<f64>),
    /// `first_db` for bands `0..split`, `rest_db` afterwards.
    Split { split: usize, first_db: f64, rest_db: f64 },
}

impl SnrSpec {
    pub fn per_band(&self, bands: usize) -> Result<Vec<f64>> {
        let v = match self {
            SnrSpec::Uniform(s) => vec![*s; bands],
            SnrSpec::PerBand(v) => {
                if v.len() != bands {
                    return shape_err(format!("{} SNR values for {bands} bands", v.len()));
                }
                v.clone()
            }
            SnrSpec::Split { split, first_db, rest_db } => {
                (0..bands).map(|i| if i < *split { *first_db } else { *rest_db }).collect()
            }
        };
        if v.iter().any(|s| !s.is_finite()) {
            return param_err("SNR targets must be finite");
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ReferenceSpec {
    /// Generated by [`generate_synthetic_reference`].
    Synthetic { rows: usize, cols: usize, bands: usize, rank: usize },
    /// A cube file on disk, loaded by the caller.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ResponseSpec {
    /// Seven smooth bands placed like a Landsat-type multispectral sensor.
    Landsat,
    /// `bands` contiguous groups of source bands, averaged within each group.
    Adjacent { bands: usize },
    /// One band averaging every source band.
    Pan,
    /// Tabulated curves; see [`SpectralResponse::from_csv`].
    Csv { path: PathBuf },
}

impl ResponseSpec {
    pub fn resolve(&self, wavelengths: &[f64]) -> Result<SpectralResponse> {
        match self {
            ResponseSpec::Landsat => landsat_like_response(wavelengths),
            ResponseSpec::Adjacent { bands } => adjacent_response(wavelengths.len(), *bands),
            ResponseSpec::Pan => Ok(SpectralResponse::uniform(wavelengths.len())),
            ResponseSpec::Csv { path } => {
                let file = std::fs::File::open(path)?;
                let (resp, wl) = SpectralResponse::from_csv(file)?;
                if wl.len() != wavelengths.len() {
                    return shape_err(format!("response file covers {} bands, scene has {}", wl.len(), wavelengths.len()));
                }
                Ok(resp)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HsSpec {
    #[serde(default = "default_decimation")]
    pub decimation: usize,
    /// `None` leaves the observation noiseless.
    pub snr_db: Option<SnrSpec>,
}

fn default_decimation() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsSpec {
    pub response: ResponseSpec,
    pub snr_db: Option<SnrSpec>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub reference: ReferenceSpec,
    pub hs: HsSpec,
    pub ms: MsSpec,
    /// Perturbs the MS response handed to the fusion, not the one used to
    /// simulate the data.
    #[serde(default)]
    pub fsnr_db: Option<f64>,
    #[serde(default = "default_true")]
    pub clip_negative_response: bool,
}

impl ExperimentSpec {
    /// Scaled-down analog of the reference experiment: d = 5, seven MS bands,
    /// HS at 35 dB for the first 127 bands and 30 dB beyond, MS at 30 dB.
    pub fn paper_analog(seed: u64) -> Self {
        Self {
            seed,
            reference: ReferenceSpec::Synthetic { rows: 50, cols: 50, bands: 160, rank: 6 },
            hs: HsSpec { decimation: 5, snr_db: Some(SnrSpec::Split { split: 127, first_db: 35.0, rest_db: 30.0 }) },
            ms: MsSpec { response: ResponseSpec::Landsat, snr_db: Some(SnrSpec::Uniform(30.0)) },
            fsnr_db: None,
            clip_negative_response: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hs.decimation == 0 {
            return param_err("HS decimation must be at least 1");
        }
        if let Some(f) = self.fsnr_db {
            if !f.is_finite() && f != f64::INFINITY {
                return param_err("fsnr_db must be finite");
            }
        }
        if let ReferenceSpec::Synthetic { rows, cols, bands, rank } = self.reference {
            if rows == 0 || cols == 0 || bands == 0 || rank == 0 || rank > bands {
                return param_err("synthetic reference needs positive sizes and 1 <= rank <= bands");
            }
        }
        Ok(())
    }
}

/// A generated scene `x_n = sum_k a_{n,k} e_k` with its factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticReference {
    pub cube: ImageCube,
    /// `rank x bands`, one spectrum per row.
    pub endmembers: DMatrix<f64>,
    /// `pixels x rank`, row-major pixels.
    pub abundances: DMatrix<f64>,
    pub wavelengths: Vec<f64>,
}

/// Band centers evenly spread over 400..2500 nm.
pub fn default_wavelengths(bands: usize) -> Vec<f64> {
    if bands == 1 {
        return vec![550.0];
    }
    (0..bands).map(|i| 400.0 + 2100.0 * i as f64 / (bands - 1) as f64).collect()
}

/// Smooth low-rank reflectance-like cube.
///
/// Endmembers are positive sums of Gaussian bumps at separated positions;
/// abundances are smooth positive fields with a sum below one that varies
/// across the scene.
pub fn generate_synthetic_reference(rows: usize, cols: usize, bands: usize, rank: usize, seed: u64) -> Result<SyntheticReference> {
    if rows == 0 || cols == 0 || bands == 0 {
        return param_err("reference dimensions must be positive");
    }
    if rank == 0 || rank > bands {
        return param_err(format!("rank {rank} must lie in 1..={bands}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wavelengths = default_wavelengths(bands);

    let mut endmembers = DMatrix::zeros(rank, bands);
    for k in 0..rank {
        let base = rng.random_range(0.05..0.2);
        // one bump per endmember at a distinct offset, plus two random ones
        let anchor = 400.0 + 2100.0 * (k as f64 + rng.random_range(0.2..0.8)) / rank as f64;
        let mut bumps = vec![(anchor, rng.random_range(0.5..0.8), rng.random_range(120.0..300.0))];
        for _ in 0..2 {
            bumps.push((rng.random_range(400.0..2500.0), rng.random_range(0.05..0.3), rng.random_range(80.0..400.0)));
        }
        for (j, wl) in wavelengths.iter().enumerate() {
            let v: f64 = bumps.iter().map(|(c, a, w)| a * (-0.5 * ((wl - c) / w).powi(2)).exp()).sum();
            endmembers[(k, j)] = base + v;
        }
    }

    // Patches: a sharpened softmax over smooth random fields, with periods of
    // 8 to 24 pixels regardless of image size. A slowly varying brightness
    // keeps the abundance sum below one and non-constant.
    let wave = |rng: &mut ChaCha8Rng, f_lo: f64, f_hi: f64| {
        let f = rng.random_range(f_lo..f_hi);
        let theta = rng.random_range(0.0..2.0 * PI);
        (f * theta.cos(), f * theta.sin(), rng.random_range(0.0..2.0 * PI))
    };
    let fields: Vec<Vec<(f64, f64, f64)>> =
        (0..rank).map(|_| (0..4).map(|_| wave(&mut rng, 1.0 / 24.0, 1.0 / 8.0)).collect()).collect();
    let shade: Vec<(f64, f64, f64)> = (0..2).map(|_| wave(&mut rng, 1.0 / 64.0, 1.0 / 24.0)).collect();
    let eval = |waves: &[(f64, f64, f64)], r: usize, c: usize| -> f64 {
        waves.iter().map(|(fr, fc, ph)| (2.0 * PI * (fr * r as f64 + fc * c as f64) + ph).sin()).sum::<f64>()
            / waves.len() as f64
    };
    const SHARPNESS: f64 = 8.0;
    let mut abundances = DMatrix::zeros(rows * cols, rank);
    for r in 0..rows {
        for c in 0..cols {
            let g: Vec<f64> = (0..rank).map(|k| SHARPNESS * eval(&fields[k], r, c)).collect();
            let top = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = g.iter().map(|v| (v - top).exp()).collect();
            let total: f64 = w.iter().sum();
            let brightness = 0.75 + 0.2 * eval(&shade, r, c);
            for k in 0..rank {
                abundances[(r * cols + c, k)] = brightness * w[k] / total;
            }
        }
    }

    let x = &abundances * &endmembers;
    let cube = ImageCube::from_fn(rows, cols, bands, |r, c, b| x[(r * cols + c, b)]);
    Ok(SyntheticReference { cube, endmembers, abundances, wavelengths })
}

/// Seven smooth bands at Landsat-like positions, tabulated on `wavelengths`.
///
/// Each band is `exp(-((l - c) / w)^4)`, cut below 1e-3 of its peak and
/// normalized, so the widest sampling still leaves every band non-empty.
pub fn landsat_like_response(wavelengths: &[f64]) -> Result<SpectralResponse> {
    const BANDS: [(f64, f64); 7] =
        [(485.0, 35.0), (560.0, 40.0), (660.0, 30.0), (830.0, 70.0), (1150.0, 150.0), (1650.0, 100.0), (2215.0, 135.0)];
    if wavelengths.is_empty() {
        return shape_err("no source bands");
    }
    let mut m = DMatrix::zeros(BANDS.len(), wavelengths.len());
    for (i, (c, w)) in BANDS.iter().enumerate() {
        let row: Vec<f64> = wavelengths.iter().map(|l| (-((l - c) / w).powi(4)).exp()).collect();
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            for (j, v) in row.iter().enumerate() {
                if *v >= 1e-3 * peak {
                    m[(i, j)] = *v;
                }
            }
        } else {
            // far outside the sampled range: take the nearest band
            let j = wavelengths
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - c).abs().total_cmp(&(b.1 - c).abs()))
                .map(|(j, _)| j)
                .unwrap();
            m[(i, j)] = 1.0;
        }
    }
    SpectralResponse::normalized(m)
}

/// Averages `n_out` contiguous, nearly equal groups of the `n_in` source bands.
pub fn adjacent_response(n_in: usize, n_out: usize) -> Result<SpectralResponse> {
    if n_out == 0 || n_out > n_in {
        return param_err(format!("cannot group {n_in} bands into {n_out}"));
    }
    let mut m = DMatrix::zeros(n_out, n_in);
    for i in 0..n_out {
        let (lo, hi) = (i * n_in / n_out, (i + 1) * n_in / n_out);
        for j in lo..hi {
            m[(i, j)] = 1.0 / (hi - lo) as f64;
        }
    }
    SpectralResponse::new(m)
}

/// `sigma^2 = ||f||_F^2 / (m n 10^(FSNR/10))` over all `m n` entries.
pub fn fsnr_variance(response: &SpectralResponse, fsnr_db: f64) -> f64 {
    let f = response.matrix();
    f.norm_squared() / (f.len() as f64 * 10f64.powf(fsnr_db / 10.0))
}

/// Adds `N(0, sigma^2)` at the requested FSNR to every non-zero entry.
///
/// Rows are not renormalized. `+inf` returns the response unchanged.
pub fn perturb_response(response: &SpectralResponse, fsnr_db: f64, seed: u64, clip_negative: bool) -> Result<SpectralResponse> {
    if fsnr_db == f64::INFINITY {
        return Ok(response.clone());
    }
    if !fsnr_db.is_finite() {
        return param_err("fsnr_db must be finite or +inf");
    }
    let sd = fsnr_variance(response, fsnr_db).sqrt();
    let normal = Normal::new(0.0, sd).map_err(|e| FusionError::Parameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = response.matrix().clone();
    // row-major visiting order, fixed regardless of storage layout
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if m[(i, j)] != 0.0 {
                let v = m[(i, j)] + normal.sample(&mut rng);
                m[(i, j)] = if clip_negative { v.max(0.0) } else { v };
            }
        }
    }
    SpectralResponse::from_raw(m)
}

/// Everything needed to re-simulate and score an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthBundle {
    pub spec: ExperimentSpec,
    pub wavelengths: Vec<f64>,
    /// Operators and variances that produced the data, `[hs, ms]`.
    pub true_sensors: Vec<SensorModel>,
    /// Operators handed to the fusion; differ from the truth only under FSNR.
    pub assumed_sensors: Vec<SensorModel>,
    pub hs_noise_seed: u64,
    pub ms_noise_seed: u64,
    pub response_seed: Option<u64>,
    /// Exact rank of a generated reference.
    pub reference_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub hs: ImageCube,
    pub ms: ImageCube,
    pub truth: TruthBundle,
}

/// Materializes the reference named by the spec, if it is synthetic.
pub fn synthetic_reference_for(spec: &ExperimentSpec) -> Result<Option<SyntheticReference>> {
    match spec.reference {
        ReferenceSpec::Synthetic { rows, cols, bands, rank } => Ok(Some(generate_synthetic_reference(
            rows,
            cols,
            bands,
            rank,
            derive_seed(spec.seed, STREAM_REFERENCE),
        )?)),
        ReferenceSpec::File { .. } => Ok(None),
    }
}

/// Degrades `reference` into HS (block mean of factor d) and MS (spectral
/// response at full resolution) observations with noise at the target SNRs.
pub fn generate_observations(spec: &ExperimentSpec, reference: &ImageCube, wavelengths: &[f64]) -> Result<Observations> {
    spec.validate()?;
    let (rows, cols, bands) = (reference.rows(), reference.cols(), reference.bands());
    if wavelengths.len() != bands {
        return shape_err(format!("{} wavelengths for {bands} bands", wavelengths.len()));
    }
    let d = spec.hs.decimation;
    if rows % d != 0 || cols % d != 0 {
        return param_err(format!("{rows}x{cols} scene is not divisible by decimation {d}"));
    }
    let x = vectorize_bip(reference);

    let mut hs = SensorModel::builder("hs", rows, cols, bands);
    hs = if d > 1 { hs.decimation(d) } else { hs.spectral(SpectralResponse::identity(bands)) };
    let mut hs = hs.build()?;
    let response = spec.ms.response.resolve(wavelengths)?;
    let mut ms = SensorModel::builder("ms", rows, cols, bands).spectral(response.clone()).build()?;

    if let Some(snr) = &spec.hs.snr_db {
        hs.noise_variances = solve_variance_for_snr(&hs, &x, &snr.per_band(hs.out_bands())?)?;
    }
    if let Some(snr) = &spec.ms.snr_db {
        ms.noise_variances = solve_variance_for_snr(&ms, &x, &snr.per_band(ms.out_bands())?)?;
    }
    let hs_noise_seed = derive_seed(spec.seed, STREAM_HS_NOISE);
    let ms_noise_seed = derive_seed(spec.seed, STREAM_MS_NOISE);
    let hs_obs = hs.add_noise(&hs.apply_forward(&x)?, hs_noise_seed)?;
    let ms_obs = ms.add_noise(&ms.apply_forward(&x)?, ms_noise_seed)?;

    let mut assumed_ms = ms.clone();
    let response_seed = match spec.fsnr_db {
        Some(f) if f.is_finite() => {
            let s = derive_seed(spec.seed, STREAM_RESPONSE);
            assumed_ms.spectral = Some(perturb_response(&response, f, s, spec.clip_negative_response)?);
            Some(s)
        }
        _ => None,
    };
    let reference_rank = match spec.reference {
        ReferenceSpec::Synthetic { rank, .. } => Some(rank),
        ReferenceSpec::File { .. } => None,
    };
    Ok(Observations {
        hs: devectorize_bip(&hs_obs, rows / d, cols / d)?,
        ms: devectorize_bip(&ms_obs, rows, cols)?,
        truth: TruthBundle {
            spec: spec.clone(),
            wavelengths: wavelengths.to_vec(),
            true_sensors: vec![hs.clone(), ms],
            assumed_sensors: vec![hs, assumed_ms],
            hs_noise_seed,
            ms_noise_seed,
            response_seed,
            reference_rank,
        },
    })
}
