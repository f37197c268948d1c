use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sim_core::loss::{de_center, dense_loss, global_loss, negative_covariance, total_loss, unigrad_loss, LossConfig};
use sim_core::tensor::{grad_check, Tape, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Pairwise evaluation: every prediction against every negative, no covariance.
fn brute_force(y: &Tensor<f64>, z: &Tensor<f64>, u: &Tensor<f64>, lambda: f64) -> f64 {
    let m = y.shape()[0];
    let k = u.shape()[0];
    (0..m)
        .map(|i| {
            let neg: f64 = (0..k).map(|j| cos(y.row(i), u.row(j)).powi(2)).sum();
            -cos(y.row(i), z.row(i)) + lambda / 2.0 * neg
        })
        .sum::<f64>()
        / m as f64
}

fn covariance_loss(y: &Tensor<f64>, z: &Tensor<f64>, u: &Tensor<f64>, lambda: f64) -> f64 {
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let term = unigrad_loss(&mut tape, yv, z, u, lambda).unwrap();
    tape.value(term.loss).item()
}

#[test]
fn covariance_trick_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..100 {
        let m = rng.random_range(1..=64);
        let k = rng.random_range(1..=64);
        let d = rng.random_range(1..=32);
        let lambda = rng.random_range(0.0..4.0);
        let (y, z, u) = (random(&mut rng, &[m, d]), random(&mut rng, &[m, d]), random(&mut rng, &[k, d]));
        let fast = covariance_loss(&y, &z, &u, lambda);
        let slow = brute_force(&y, &z, &u, lambda);
        assert!((fast - slow).abs() < 1e-10, "case {case} (M={m} K={k} D={d}): {fast} vs {slow}");
    }
}

#[test]
fn covariance_spans_chunk_boundaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let u = random(&mut rng, &[200, 5]);
    let c = negative_covariance(u.data(), 5);
    for a in 0..5 {
        for b in 0..5 {
            let want: f64 = (0..200)
                .map(|i| {
                    let r = u.row(i);
                    let n2: f64 = r.iter().map(|x| x * x).sum();
                    r[a] * r[b] / n2
                })
                .sum();
            assert!((c.data()[a * 5 + b] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn loss_is_scale_invariant_in_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (y, z, u) = (random(&mut rng, &[7, 6]), random(&mut rng, &[7, 6]), random(&mut rng, &[9, 6]));
    let base = covariance_loss(&y, &z, &u, 0.7);
    for c in [1e-3, 0.5, 3.0, 250.0] {
        let scaled = y.map(|v| v * c);
        assert!((covariance_loss(&scaled, &z, &u, 0.7) - base).abs() < 1e-12);
    }
}

#[test]
fn unigrad_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let (y, z, u) = (random(&mut rng, &[5, 4]), random(&mut rng, &[5, 4]), random(&mut rng, &[6, 4]));
    let report = grad_check(|t, x| Ok(unigrad_loss(t, x, &z, &u, 1.3)?.loss), &y, 1e-6, 1e-6).unwrap();
    assert!(report.passed, "max rel err {}", report.max_rel_err);
}

#[test]
fn dense_and_global_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let y = random(&mut rng, &[2, 4, 3]);
    let z = random(&mut rng, &[2, 4, 3]);
    let dense = grad_check(|t, x| Ok(dense_loss(t, x, &z, 0.5, true)?.loss), &y, 1e-6, 1e-6).unwrap();
    assert!(dense.passed, "dense: {}", dense.max_rel_err);
    let global = grad_check(|t, x| Ok(global_loss(t, x, &z, 0.5)?.loss), &y, 1e-6, 1e-6).unwrap();
    assert!(global.passed, "global: {}", global.max_rel_err);
}

#[test]
fn de_centered_tokens_have_zero_image_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let z = random(&mut rng, &[4, 16, 8]).map(|v| v * 10.0 + 3.0);
    let c = de_center(&z);
    let mut tape = Tape::new();
    let y = tape.constant(z.clone());
    let yc = sim_core::loss::de_center_var(&mut tape, y).unwrap();
    for t in [&c, tape.value(yc)] {
        for img in t.data().chunks_exact(16 * 8) {
            for ch in 0..8 {
                let mean: f64 = img.iter().skip(ch).step_by(8).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-9, "{mean}");
            }
        }
    }
}

#[test]
fn dense_loss_reads_centered_targets() {
    // A per-image shift of the targets must not change the de-centered loss.
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let y = random(&mut rng, &[2, 5, 4]);
    let z = random(&mut rng, &[2, 5, 4]);
    let mut shifted = z.clone();
    for (i, v) in shifted.data_mut().iter_mut().enumerate() {
        *v += if i < 20 { 4.0 } else { -2.5 } * ((i % 4) as f64 + 1.0);
    }
    let eval = |target: &Tensor<f64>| {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let cfg = LossConfig::default();
        let (loss, _) = total_loss(&mut tape, yv, target, &cfg).unwrap();
        tape.value(loss).item()
    };
    assert!((eval(&z) - eval(&shifted)).abs() < 1e-12);
}
