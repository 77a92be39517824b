mod common;

use almrr::embed::{self, BackboneSpec, Origin};
use almrr::numeric::ParamStore;
use almrr::raster::{Image, Mask};
use almrr::synth::{self, binarize, perlin, sample_mask, synthesize, synthesize_random, AreaBounds, SynthConfig, TextureBank, TextureKind};
use proptest::prelude::*;

/// Mean area fraction of raw (unclamped) masks at threshold 0.5, lattice (4,4), 256×256,
/// seeds 0..100. Measured once and pinned.
const AREA_BASELINE: f64 = 0.10310333251953124;

#[test]
fn perlin_values_are_bounded_and_centered() {
    let mut n = 0usize;
    let mut sum = 0.0;
    for seed in 0..10u64 {
        let f = perlin(100, 100, (4, 4), seed).unwrap();
        for v in f.values.iter().step_by(10) {
            assert!((-1.0..=1.0).contains(v));
            sum += v;
            n += 1;
        }
    }
    assert_eq!(n, 10_000);
    assert!((sum / n as f64).abs() < 0.05, "mean {}", sum / n as f64);
}

#[test]
fn area_baseline_at_resolution_four() {
    let mean = (0..100u64)
        .map(|seed| {
            let f = perlin(256, 256, (4, 4), seed).unwrap().max_abs_normalized();
            binarize(&f, 0.5).unwrap().area_fraction()
        })
        .sum::<f64>()
        / 100.0;
    println!("mean area fraction {mean:.6}");
    assert!((mean - AREA_BASELINE).abs() < 1e-9, "{mean}");
}

#[test]
fn threshold_boundaries_trigger_resampling() {
    let f = perlin(64, 64, (4, 4), 3).unwrap().max_abs_normalized();
    assert_eq!(binarize(&f, -1.0).unwrap().count(), 64 * 64);
    assert!(binarize(&f, 1.5).is_err());
    let bounds = AreaBounds { min: 0.001, max: 0.30 };
    assert!(sample_mask(64, 64, (4, 4), -1.0, bounds, 1).is_err());
    assert!(sample_mask(64, 64, (4, 4), 0.999_999, bounds, 1).is_err());
    let (m, tries) = sample_mask(64, 64, (4, 4), 0.5, bounds, 1).unwrap();
    assert!((0.001..=0.30).contains(&m.area_fraction()) && tries >= 1);
}

fn grid_image(seed: u64, h: usize, w: usize) -> Image {
    let v = common::random_vec(seed, 3 * h * w, 0.0, 256.0);
    Image::new(h, w, v.iter().map(|x| (x.floor() / 256.0) as f32).collect()).unwrap()
}

#[test]
fn blend_boundaries_are_exact() {
    let i = grid_image(1, 16, 16);
    let a = grid_image(2, 16, 16);
    for alpha in [0.15, 0.5, 1.0] {
        assert_eq!(synthesize(&i, &a, &Mask::empty(16, 16), alpha).unwrap().image_a, i);
    }
    assert_eq!(synthesize(&i, &a, &Mask::full(16, 16), 1.0).unwrap().image_a, a);
}

#[test]
fn masked_pixels_are_linear_in_alpha() {
    let i = grid_image(3, 16, 16);
    let a = grid_image(4, 16, 16);
    let f = perlin(16, 16, (2, 2), 5).unwrap().max_abs_normalized();
    let mask = binarize(&f, 0.3).unwrap();
    for k in 1..=8 {
        let alpha = k as f32 / 8.0;
        let out = synthesize(&i, &a, &mask, alpha).unwrap().image_a;
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let (iv, av) = (i.get(c, y, x), a.get(c, y, x));
                    let want = if mask.get(y, x) { iv + alpha * (av - iv) } else { iv };
                    assert_eq!(out.get(c, y, x), want);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn unmasked_pixels_survive_random_synthesis(seed in 0u64..10_000) {
        let img = synth::texture::render(TextureKind::Stripes, 32, 32, seed);
        let pair = synthesize_random(&img, &TextureBank::default(), &SynthConfig::default(), seed).unwrap();
        let plane = 32 * 32;
        prop_assert!((0.001..=0.30).contains(&pair.mask.area_fraction()));
        prop_assert!((0.15..=1.0).contains(&pair.alpha));
        for c in 0..3 {
            for p in 0..plane {
                let v = pair.image_a.data[c * plane + p];
                prop_assert!((0.0..=1.0).contains(&v));
                if pair.mask.data[p] == 0 {
                    prop_assert_eq!(v, img.data[c * plane + p]);
                }
            }
        }
    }
}

fn backbone() -> (BackboneSpec, ParamStore<f64>) {
    let spec = BackboneSpec::tinytex(3);
    let mut params = ParamStore::new();
    spec.init_params(&mut params).unwrap();
    (spec, params)
}

#[test]
fn zero_mask_pair_embeds_identically() {
    let (spec, params) = backbone();
    let i = synth::texture::render(TextureKind::Checkers, 64, 64, 1);
    let a = synth::texture::render(TextureKind::Dots, 64, 64, 2);
    let pair = synthesize(&i, &a, &Mask::empty(64, 64), 0.8).unwrap();
    let (phi, f) = embed::dual_embed(&spec, &params, &i, &pair.image_a, 16).unwrap();
    assert_eq!(phi.data, f.data);
    assert_eq!((phi.origin, f.origin), (Origin::Phi, Origin::FInput));
    assert_eq!(phi.shape(), [112, 16, 16]);
}

#[test]
fn feature_difference_concentrates_on_the_defect() {
    let (spec, params) = backbone();
    let bank = TextureBank::Procedural(TextureKind::HELD_OUT.to_vec());
    let mut wins = 0;
    for seed in 0..20u64 {
        let i = synth::texture::render(TextureKind::BlurredNoise, 64, 64, seed);
        let pair = synthesize_random(&i, &bank, &SynthConfig::default(), 100 + seed).unwrap();
        let (phi, f) = embed::dual_embed(&spec, &params, &i, &pair.image_a, 32).unwrap();
        let near = pair.mask.dilate(4);
        let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
        for y in 0..32 {
            for x in 0..32 {
                let d: f64 = (0..phi.channels).map(|c| (phi.data[(c * 32 + y) * 32 + x] - f.data[(c * 32 + y) * 32 + x]).abs()).sum();
                if near.get(2 * y, 2 * x) {
                    inside += d;
                    ni += 1;
                } else {
                    outside += d;
                    no += 1;
                }
            }
        }
        if ni > 0 && no > 0 && inside / ni as f64 > outside / no as f64 {
            wins += 1;
        }
    }
    assert_eq!(wins, 20);
}
