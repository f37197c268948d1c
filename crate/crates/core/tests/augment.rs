use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sim_core::augment::{make_view_pair, sample_mask, visible_count, AugmentConfig};
use sim_core::image::{Image, Normalization};

fn gradient_image(h: usize, w: usize) -> Image {
    let mut img = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            img.set_pixel(y, x, [x as f32 / w as f32, y as f32 / h as f32, 0.5]);
        }
    }
    img
}

#[test]
fn mask_has_exact_count_and_uniform_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (total, draws) = (196, 10_000);
    assert_eq!(visible_count(total, 0.75), 49);
    let mut hits = vec![0usize; total];
    for _ in 0..draws {
        let m = sample_mask(&mut rng, total, 0.75).unwrap();
        assert_eq!(m.num_visible(), 49);
        assert!(m.visible().windows(2).all(|w| w[0] < w[1]));
        m.visible().iter().for_each(|&i| hits[i] += 1);
    }
    for (i, &h) in hits.iter().enumerate() {
        let rate = h as f64 / draws as f64;
        assert!((rate - 0.25).abs() <= 0.02, "token {i} visible at rate {rate}");
    }
}

#[test]
fn extreme_ratios() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    assert_eq!(sample_mask(&mut rng, 10, 0.0).unwrap().num_visible(), 10);
    assert!(sample_mask(&mut rng, 10, 1.0).is_err());
    assert!(sample_mask(&mut rng, 0, 0.5).is_err());
}

#[test]
fn view_pairs_are_seed_deterministic() {
    let raw = gradient_image(40, 48);
    let cfg = AugmentConfig::default();
    let norm = Normalization::default();
    let draw = |seed| make_view_pair(&mut ChaCha8Rng::seed_from_u64(seed), &raw, &cfg, false, 32, 64, &norm).unwrap();
    assert_eq!(draw(9), draw(9));
    assert_ne!(draw(9), draw(10));
}

#[test]
fn flip_is_shared_between_views() {
    let raw = gradient_image(32, 32);
    let cfg = AugmentConfig {
        crop_scale: (1.0, 1.0),
        aspect_ratio: (1.0, 1.0),
        use_color_aug: false,
        ..Default::default()
    };
    let norm = Normalization::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut flips = 0;
    for _ in 0..200 {
        let pair = make_view_pair(&mut rng, &raw, &cfg, false, 32, 64, &norm).unwrap();
        assert_eq!(pair.crop_a.flipped, pair.crop_b.flipped);
        // Full-frame crops of one (possibly flipped) raw image must coincide pixel for pixel.
        assert_eq!(pair.image_a.max_abs_diff(&pair.image_b), 0.0);
        flips += usize::from(pair.crop_a.flipped);
    }
    assert!((60..140).contains(&flips), "{flips} flips in 200 draws");
}

#[test]
fn same_view_duplicates_crop_and_pixels() {
    let raw = gradient_image(50, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pair = make_view_pair(&mut rng, &raw, &AugmentConfig::default(), true, 32, 64, &Normalization::default()).unwrap();
    assert_eq!(pair.crop_a, pair.crop_b);
    assert_eq!(pair.image_a, pair.image_b);
}
