use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xplain_core::preprocess::{
    artifact_mask, diffusion_coefficient, equalize, histogram, normalize, perona_malik, remove_text_artifacts,
    ArtifactConfig, Coefficient, DiffusionConfig, GrayImage,
};

fn levels_image() -> impl Strategy<Value = GrayImage> {
    (2usize..12, 2usize..12).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<u8>(), h * w).prop_map(move |v| GrayImage::from_levels(h, w, v).unwrap())
    })
}

fn unit_image() -> impl Strategy<Value = GrayImage> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f32..=1.0, h * w).prop_map(move |v| GrayImage::from_unit(h, w, v).unwrap())
    })
}

fn coefficient() -> impl Strategy<Value = Coefficient> {
    prop_oneof![Just(Coefficient::C1), Just(Coefficient::C2), Just(Coefficient::C3)]
}

/// Sup distance between the empirical CDF of `values` and the uniform CDF on [0, 1].
fn ks_uniform(values: &[f32]) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| f64::from(x)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        d = d.max((x - i as f64 / n).abs()).max(((i + 1) as f64 / n - x).abs());
    }
    d
}

proptest! {
    #[test]
    fn histogram_counts_cover_the_image(img in levels_image()) {
        let h = histogram(&img).unwrap();
        prop_assert_eq!(h.counts().iter().sum::<u64>(), img.len() as u64);
        let cdf = h.cdf();
        prop_assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((cdf[255] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equalize_is_monotone(img in levels_image()) {
        let out = equalize(&img).unwrap();
        let (a, b) = (img.levels().unwrap(), out.levels().unwrap());
        let mut pairs: Vec<(u8, u8)> = a.iter().copied().zip(b.iter().copied()).collect();
        pairs.sort();
        prop_assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn equalize_is_idempotent_within_one_level(img in levels_image()) {
        let once = equalize(&img).unwrap();
        let twice = equalize(&once).unwrap();
        for (&x, &y) in once.levels().unwrap().iter().zip(twice.levels().unwrap()) {
            prop_assert!((i16::from(x) - i16::from(y)).abs() <= 1);
        }
    }

    #[test]
    fn diffusion_keeps_mean_and_range(img in unit_image(), c in coefficient(), k in 0.02f64..1.0, step in 0.01f64..0.25) {
        let cfg = DiffusionConfig { threshold: k, iterations: 50, step, coefficient: c };
        let out = perona_malik(&img, &cfg).unwrap();
        let (a, b) = (img.unit().unwrap(), out.unit().unwrap());
        let mean = |v: &[f32]| v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64;
        prop_assert!((mean(a) - mean(b)).abs() <= 1e-6);
        let lo = a.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = a.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(b.iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }

    #[test]
    fn coefficients_lie_in_unit_interval(g in 0.0f64..100.0, k in 1e-3f64..10.0, c in coefficient()) {
        let v = diffusion_coefficient(g, k, c);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!(diffusion_coefficient(g * 1.5 + 1e-9, k, c) <= v);
    }

    #[test]
    fn artifact_removal_touches_only_masked_pixels(img in levels_image(), q in 0.5f64..1.0, frac in 0.01f64..0.5) {
        let cfg = ArtifactConfig { quantile: q, max_component_fraction: frac };
        let mask = artifact_mask(&img, &cfg).unwrap();
        let out = remove_text_artifacts(&img, &cfg).unwrap();
        for ((&m, &a), &b) in mask.iter().zip(img.levels().unwrap()).zip(out.levels().unwrap()) {
            if !m {
                prop_assert_eq!(a, b);
            }
        }
    }
}

#[test]
fn equalization_moves_low_contrast_images_towards_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..100 {
        let (h, w) = (rng.gen_range(16..48), rng.gen_range(16..48));
        let lo = rng.gen_range(0..200u8);
        let hi = lo + rng.gen_range(5..=55u8);
        let levels = (0..h * w).map(|_| rng.gen_range(lo..=hi)).collect();
        let img = GrayImage::from_levels(h, w, levels).unwrap();
        let raw = ks_uniform(&normalize(&img).unwrap().unit_values());
        let eq = ks_uniform(&normalize(&equalize(&img).unwrap()).unwrap().unit_values());
        assert!(eq < raw, "image {i}: {eq} !< {raw}");
    }
}
