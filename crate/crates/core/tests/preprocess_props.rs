use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthseg::ingest::{Contrast, ContrastVolume, Provenance};
use synthseg::phantom::{generate_phantom_slice, PhantomSpec};
use synthseg::preprocess::{diffuse_slice, estimate_bias_field, whiten_and_scale, PreprocessConfig};

fn noise(h: usize, w: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
}

fn volume(voxels: Array3<f32>) -> ContrastVolume {
    ContrastVolume::new(voxels, Contrast::Mri1, Provenance::Real, "sub-000", [1.0; 3]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn diffusion_conserves_mass_and_stays_in_range(
        seed in any::<u64>(), iters in 0usize..15, kappa in 0.02f64..2.0, dt in 0.01f64..=0.25,
    ) {
        let img = noise(9, 11, seed);
        let out = diffuse_slice(img.view(), iters, kappa, dt);
        let before: f64 = img.iter().map(|&v| v as f64).sum();
        let after: f64 = out.iter().map(|&v| v as f64).sum();
        prop_assert!((before - after).abs() < 1e-3);
        let (lo, hi) = img.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for &v in &out {
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
        }
    }

    #[test]
    fn whitening_ignores_positive_affine_changes(seed in any::<u64>(), scale in 0.1f32..10.0, shift in -5.0f32..5.0) {
        let img = noise(6, 7, seed).insert_axis(ndarray::Axis(0));
        let a = whiten_and_scale(&volume(img.clone()), 1e-8).unwrap();
        let b = whiten_and_scale(&volume(img.mapv(|v| v * scale + shift)), 1e-8).unwrap();
        let (lo, hi) = a.voxels().iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert_eq!((lo, hi), (0.0, 1.0));
        for (x, y) in a.voxels().iter().zip(b.voxels()) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn bias_field_is_invariant_to_global_gain(subject in 0usize..5, gain in 0.2f32..5.0) {
        let spec = PhantomSpec::default();
        let slice = generate_phantom_slice(&spec, subject, 0).unwrap();
        let img = slice.volumes[1].slice(0).to_owned();
        let cfg = PreprocessConfig::default();
        let f1 = estimate_bias_field(img.view(), &cfg);
        let f2 = estimate_bias_field(img.mapv(|v| v * gain).view(), &cfg);
        let mean = f1.iter().sum::<f64>() / f1.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-9);
        for (a, b) in f1.iter().zip(&f2) {
            prop_assert!((a - b).abs() < 1e-4, "{} vs {}", a, b);
        }
    }
}
