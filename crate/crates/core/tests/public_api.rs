//! Exercises the library only through its public surface.

use bayesfuse_core::forward::{Boundary, SensorModel, SpatialBlur, SpectralResponse};
use bayesfuse_core::metrics::{rsnr, sam};
use bayesfuse_core::model::{HierModel, HyperParams};
use bayesfuse_core::sampler::{run_gibbs, Chain, Checkpoint, SamplerConfig};
use bayesfuse_core::subspace::{interpolated_prior_mean, learn_pca, upsample, Centering, Interpolation};
use bayesfuse_core::synth::{generate_observations, synthetic_reference_for, ExperimentSpec, HsSpec, MsSpec, ReferenceSpec, ResponseSpec, SnrSpec};
use bayesfuse_core::{backproject, devectorize_bip, project, vectorize_bip, BipVector, ImageCube};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn spec(seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        seed,
        reference: ReferenceSpec::Synthetic { rows: 16, cols: 16, bands: 12, rank: 3 },
        hs: HsSpec { decimation: 4, snr_db: Some(SnrSpec::Uniform(30.0)) },
        ms: MsSpec { response: ResponseSpec::Adjacent { bands: 3 }, snr_db: Some(SnrSpec::Uniform(30.0)) },
        fsnr_db: None,
        clip_negative_response: true,
    }
}

fn build(seed: u64) -> (HierModel, ImageCube, ImageCube) {
    let s = spec(seed);
    let r = synthetic_reference_for(&s).unwrap().unwrap();
    let obs = generate_observations(&s, &r.cube, &r.wavelengths).unwrap();
    let pca = learn_pca(&vectorize_bip(&obs.hs), 0.99, Centering::Centered).unwrap();
    let mu = interpolated_prior_mean(&obs.hs, 16, 16, &pca.basis, Interpolation::Bilinear).unwrap();
    let d = pca.reduced_dim();
    let model = HierModel::new(
        16,
        16,
        pca.basis,
        mu,
        obs.truth.assumed_sensors.clone(),
        vec![vectorize_bip(&obs.hs), vectorize_bip(&obs.ms)],
        HyperParams::non_informative(d),
    )
    .unwrap();
    let base = upsample(&obs.hs, 4, 4, Interpolation::Bilinear).unwrap();
    (model, r.cube, base)
}

#[test]
fn fusion_beats_interpolation() {
    let (model, truth, base) = build(1);
    let cfg = SamplerConfig { n_bi: 200, n_mc: 200, ..Default::default() };
    let out = run_gibbs(&model, &cfg).unwrap();
    let x = vectorize_bip(&truth);
    let fused = rsnr(&x, &out.mmse_x).unwrap();
    let baseline = rsnr(&x, &vectorize_bip(&base)).unwrap();
    assert!(fused > baseline + 3.0, "fused {fused:.2} dB, baseline {baseline:.2} dB");
    assert!(sam(&x, &out.mmse_x).unwrap().mean_deg < sam(&x, &vectorize_bip(&base)).unwrap().mean_deg);
    assert_eq!(out.traces.acceptance.len(), 400);
    assert!(out.traces.acceptance.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn checkpoint_survives_json() {
    let (model, _, _) = build(2);
    let cfg = SamplerConfig { n_bi: 10, n_mc: 10, n_leap_min: 5, n_leap_max: 8, seed: 3, ..Default::default() };
    let straight = run_gibbs(&model, &cfg).unwrap();

    let mut chain = Chain::new(&model, cfg).unwrap();
    chain.run_for(13).unwrap();
    let text = serde_json::to_string(&chain.checkpoint()).unwrap();
    drop(chain);
    let ck: Checkpoint = serde_json::from_str(&text).unwrap();
    let resumed = Chain::from_checkpoint(&model, ck).unwrap().finish().unwrap();
    assert_eq!(resumed.mmse_u, straight.mmse_u);
    assert_eq!(resumed.final_state, straight.final_state);
}

fn sensor_strategy() -> impl Strategy<Value = (SensorModel, u64)> {
    (1usize..4, 1usize..4, 1usize..5, 0usize..3, 0usize..3, any::<u64>()).prop_map(|(rb, cb, bands, blur, fac, seed)| {
        let f = [1, 2, 3][fac];
        let (rows, cols) = (rb * f, cb * f);
        let boundary = [Boundary::Symmetric, Boundary::Zero, Boundary::Periodic][blur];
        let mut b = SensorModel::builder("s", rows, cols, bands).blur(SpatialBlur::gaussian(3, 0.8, boundary).unwrap());
        if f > 1 {
            b = b.decimation(f);
        }
        let w = DMatrix::from_fn(2, bands, |i, j| ((seed >> ((i * 7 + j) % 60)) & 7) as f64 + 1.0);
        (b.spectral(SpectralResponse::normalized(w).unwrap()).build().unwrap(), seed)
    })
}

fn pseudo(n: usize, seed: u64) -> Vec<f64> {
    (0..n).map(|i| (((i as u64 + 1).wrapping_mul(seed | 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 11) as f64 / (1u64 << 53) as f64) - 0.5).collect()
}

proptest! {
    #[test]
    fn forward_and_adjoint_agree((s, seed) in sensor_strategy()) {
        let n_in = s.rows * s.cols;
        let x = BipVector::new(n_in, s.bands, pseudo(n_in * s.bands, seed)).unwrap();
        let y = BipVector::new(s.out_pixels(), s.out_bands(), pseudo(s.out_pixels() * s.out_bands(), seed ^ 77)).unwrap();
        let lhs = s.apply_forward(&x).unwrap().dot(&y);
        let rhs = x.dot(&s.apply_adjoint(&y).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn bip_round_trip(rows in 1usize..6, cols in 1usize..6, bands in 1usize..5) {
        let cube = ImageCube::from_fn(rows, cols, bands, |r, c, b| (r * 100 + c * 10 + b) as f64);
        let v = vectorize_bip(&cube);
        for r in 0..rows {
            for c in 0..cols {
                let want: Vec<f64> = (0..bands).map(|b| cube.get(r, c, b)).collect();
                prop_assert_eq!(v.pixel(r * cols + c), &want[..]);
            }
        }
        prop_assert_eq!(devectorize_bip(&v, rows, cols).unwrap(), cube);
    }
}

#[test]
fn projection_is_exact_inside_the_subspace() {
    let s = spec(4);
    let r = synthetic_reference_for(&s).unwrap().unwrap();
    let x = vectorize_bip(&r.cube);
    let pca = learn_pca(&x, 1.0 - 1e-12, Centering::Centered).unwrap();
    assert!(pca.reduced_dim() <= 3);
    let back = backproject(&project(&x, &pca.basis).unwrap(), &pca.basis).unwrap();
    let err = x.as_slice().iter().zip(back.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");
}
