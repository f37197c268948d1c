use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sim_core::geometry::{
    decoder_pos_embeds, grid_positions_a, relative_positions_b, relative_scale, sincos_pe, CropSpec, GridSpec,
    ScaleMixer,
};
use sim_core::tensor::Tensor;

fn random_crop(rng: &mut ChaCha8Rng, raw: usize) -> CropSpec {
    let h = rng.random_range(1..=raw);
    let w = rng.random_range(1..=raw);
    CropSpec::new(rng.random_range(0..=raw - h), rng.random_range(0..=raw - w), h, w)
}

/// Token (r, c) of `crop` sits at raw pixel `(top + r h / rows, left + c w / cols)`;
/// the result is that pixel expressed in `reference`'s token units.
fn pixel_oracle(reference: &CropSpec, crop: &CropSpec, grid: GridSpec) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let py = crop.top as f64 + r as f64 * crop.height as f64 / grid.rows as f64;
            let px = crop.left as f64 + c as f64 * crop.width as f64 / grid.cols as f64;
            out.push([
                (py - reference.top as f64) * grid.rows as f64 / reference.height as f64,
                (px - reference.left as f64) * grid.cols as f64 / reference.width as f64,
            ]);
        }
    }
    out
}

#[test]
fn identical_crops_reduce_to_grid_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..1000 {
        let crop = random_crop(&mut rng, 512);
        let grid = GridSpec::square(rng.random_range(1..20)).unwrap();
        let got = relative_positions_b(&crop, &crop, grid).unwrap();
        assert_eq!(got, grid_positions_a(grid), "draw {i}: {crop:?}");
    }
}

#[test]
fn cross_view_positions_match_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = random_crop(&mut rng, 256);
        let b = random_crop(&mut rng, 256);
        let grid = GridSpec::new(rng.random_range(1..16), rng.random_range(1..16)).unwrap();
        let got = relative_positions_b(&a, &b, grid).unwrap();
        for (g, o) in got.iter().zip(pixel_oracle(&a, &b, grid)) {
            worst = worst.max((g[0] - o[0]).abs()).max((g[1] - o[1]).abs());
        }
    }
    assert!(worst < 1e-9, "max deviation {worst:e}");
}

#[test]
fn relative_scale_is_antisymmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..500 {
        let a = random_crop(&mut rng, 300);
        let b = random_crop(&mut rng, 300);
        let ab = relative_scale(&a, &b).unwrap();
        let ba = relative_scale(&b, &a).unwrap();
        assert!((ab[0] + ba[0]).abs() < 1e-12 && (ab[1] + ba[1]).abs() < 1e-12);
    }
}

#[test]
fn sincos_is_injective_on_integer_grid() {
    for dim in [16, 32] {
        // Each axis owns half the vector, so per-axis separation implies 2-D injectivity.
        let axis: Vec<Vec<f64>> = (0..196).map(|p| sincos_pe([p as f64, 0.0], dim).unwrap()[..dim / 2].to_vec()).collect();
        let mut min_gap = f64::INFINITY;
        for i in 0..axis.len() {
            for j in i + 1..axis.len() {
                let d: f64 = axis[i].iter().zip(&axis[j]).map(|(x, y)| (x - y).powi(2)).sum();
                min_gap = min_gap.min(d.sqrt());
            }
        }
        assert!(min_gap > 1e-3, "dim {dim}: closest pair {min_gap}");

        let mut all: Vec<Vec<f64>> = Vec::with_capacity(196 * 196);
        for h in 0..196 {
            for w in 0..196 {
                all.push(sincos_pe([h as f64, w as f64], dim).unwrap());
            }
        }
        all.sort_by(|x, y| x.iter().zip(y).map(|(a, b)| a.total_cmp(b)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        assert!(all.windows(2).all(|w| w[0] != w[1]), "dim {dim}: duplicate encoding");
    }
}

#[test]
fn random_mixer_keeps_token_rows_distinct() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let dim = 16;
    for _ in 0..20 {
        let a = random_crop(&mut rng, 128);
        let b = random_crop(&mut rng, 128);
        let mixer = ScaleMixer {
            weight: Tensor::new([2 * dim, dim], (0..2 * dim * dim).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap(),
            bias: Tensor::new([dim], (0..dim).map(|_| rng.random_range(-0.1..0.1)).collect()).unwrap(),
        };
        let (_, p_b) = decoder_pos_embeds::<f64>(&a, &b, GridSpec::square(4).unwrap(), dim, &mixer).unwrap();
        for i in 0..16 {
            for j in i + 1..16 {
                assert_ne!(p_b.row(i), p_b.row(j), "rows {i} and {j} for {a:?} / {b:?}");
            }
        }
    }
}

#[test]
fn selecting_mixer_with_identical_crops_reuses_grid_table() {
    let crop = CropSpec::new(3, 5, 40, 40);
    let (p_a, p_b) = decoder_pos_embeds::<f64>(&crop, &crop, GridSpec::square(14).unwrap(), 32, &ScaleMixer::selecting(32)).unwrap();
    assert_eq!(p_a, p_b);
}
