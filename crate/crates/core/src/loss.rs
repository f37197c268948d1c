//! UniGrad-style contrastive losses at the global and dense level.
//!
//! For predictions `y`, targets `z` and a negative set `U`, the per-row loss is
//! `-cos(y, z) + lambda / 2 * sum_u cos(y, u)^2`. The negative sum equals
//! `y_hat^T C y_hat` with `C = sum_u u_hat u_hat^T`, so only a D x D matrix is kept
//! no matter how many negatives there are.

use serde::Serialize;

use crate::error::{Result, SimError};
use crate::tensor::{gemm, MatRef, Scalar, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-8;

/// Rows folded into the covariance per accumulation pass.
pub const COV_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha_global: f64,
    pub alpha_dense: f64,
    pub de_center: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            alpha_global: 0.0,
            alpha_dense: 1.0,
            de_center: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(SimError::config("loss.lambda", "must be non-negative"));
        }
        if !(self.alpha_global >= 0.0 && self.alpha_dense >= 0.0) {
            return Err(SimError::config("loss.alpha_global", "loss weights must be non-negative"));
        }
        if self.alpha_global + self.alpha_dense <= 0.0 {
            return Err(SimError::config("loss.alpha_dense", "at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Scalar summary of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub global: f64,
    pub dense: f64,
    /// Mean `cos(y, z)` of the positive pairs.
    pub align: Option<f64>,
    /// Mean `sum_u cos(y, u)^2` over rows.
    pub uniform: Option<f64>,
    pub feat_std: f64,
}

/// Loss node plus its diagnostic terms.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveTerm {
    pub loss: Var,
    pub align: f64,
    pub uniform: f64,
}

fn check_rows<T: Scalar>(what: &str, data: &[T], dim: usize) -> Result<()> {
    for (i, row) in data.chunks_exact(dim).enumerate() {
        if row.iter().all(|v| v.is_zero()) {
            return Err(SimError::Loss(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

fn normalized_rows<T: Scalar>(src: &[T], dim: usize, dst: &mut [T]) {
    for (s, d) in src.chunks_exact(dim).zip(dst.chunks_exact_mut(dim)) {
        let norm = s.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt().max(NORM_EPS);
        let inv = T::of(1.0 / norm);
        for (o, &v) in d.iter_mut().zip(s) {
            *o = v * inv;
        }
    }
}

/// `C = sum_u u_hat u_hat^T` over the rows of `negatives: [K, D]`.
///
/// Rows are normalised in fixed-size chunks, so the working set is `D^2 + COV_CHUNK * D`
/// values for any K.
pub fn negative_covariance<T: Scalar>(negatives: &[T], dim: usize) -> Tensor<T> {
    let mut cov = vec![T::zero(); dim * dim];
    let mut chunk = vec![T::zero(); COV_CHUNK * dim];
    for rows in negatives.chunks(COV_CHUNK * dim) {
        let k = rows.len() / dim;
        let buf = &mut chunk[..k * dim];
        normalized_rows(rows, dim, buf);
        let m = MatRef::new(&*buf, k, dim);
        gemm(m.t(), m, T::one(), &mut cov);
    }
    Tensor::from_parts(vec![dim, dim], cov)
}

fn unigrad_core<T: Scalar>(tape: &mut Tape<T>, y: Var, z: &Tensor<T>, negatives: &Tensor<T>, lambda: f64) -> Result<ContrastiveTerm> {
    let ys = tape.shape(y).to_vec();
    if ys.len() != 2 || z.shape() != ys.as_slice() {
        return Err(SimError::shape("unigrad_loss", &ys, z.shape()));
    }
    let dim = ys[1];
    if negatives.rank() != 2 || negatives.shape()[1] != dim {
        return Err(SimError::shape("unigrad_loss", &ys, negatives.shape()));
    }
    let y_hat = tape.l2_normalize(y, 1, NORM_EPS)?;
    let mut zn = vec![T::zero(); z.numel()];
    normalized_rows(z.data(), dim, &mut zn);
    let z_hat = tape.constant(Tensor::from_parts(ys.clone(), zn));
    let pos = tape.mul(y_hat, z_hat)?;
    let cos = tape.sum_axis(pos, 1, false)?;
    let align = tape.value(cos).data().iter().map(|v| v.f64()).sum::<f64>() / ys[0] as f64;

    let c = tape.constant(negative_covariance(negatives.data(), dim));
    let yc = tape.matmul(y_hat, c)?;
    let quad = tape.mul(yc, y_hat)?;
    let quad = tape.sum_axis(quad, 1, false)?;
    let uniform = tape.value(quad).data().iter().map(|v| v.f64()).sum::<f64>() / ys[0] as f64;

    let neg = tape.scale(quad, lambda / 2.0)?;
    let per_row = tape.sub(neg, cos)?;
    let loss = tape.mean(per_row)?;
    Ok(ContrastiveTerm { loss, align, uniform })
}

/// UniGrad loss of `y: [M, D]` against targets `z: [M, D]` and negatives `[K, D]`.
pub fn unigrad_loss<T: Scalar>(tape: &mut Tape<T>, y: Var, z: &Tensor<T>, negatives: &Tensor<T>, lambda: f64) -> Result<ContrastiveTerm> {
    let dim = *tape.shape(y).last().unwrap_or(&1);
    check_rows("prediction", tape.value(y).data(), dim)?;
    check_rows("target", z.data(), dim)?;
    check_rows("negative", negatives.data(), dim)?;
    if negatives.numel() == 0 {
        return Err(SimError::Loss("empty negative set".into()));
    }
    unigrad_core(tape, y, z, negatives, lambda)
}

fn token_means<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let (b, n, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let mut out = vec![T::zero(); b * d];
    for (img, o) in z.data().chunks_exact(n * d).zip(out.chunks_exact_mut(d)) {
        for tok in img.chunks_exact(d) {
            for (acc, &v) in o.iter_mut().zip(tok) {
                *acc = *acc + v;
            }
        }
        let inv = T::of(1.0 / n as f64);
        o.iter_mut().for_each(|v| *v = *v * inv);
    }
    Tensor::from_parts(vec![b, d], out)
}

fn check_batch_shapes<T: Scalar>(op: &'static str, tape: &Tape<T>, y: Var, z: &Tensor<T>) -> Result<()> {
    let ys = tape.shape(y);
    if ys.len() != 3 || ys != z.shape() {
        return Err(SimError::shape(op, ys, z.shape()));
    }
    Ok(())
}

/// Contrast of token-averaged predictions against token-averaged targets of every image.
pub fn global_loss<T: Scalar>(tape: &mut Tape<T>, y_b: Var, z_b: &Tensor<T>, lambda: f64) -> Result<ContrastiveTerm> {
    check_batch_shapes("global_loss", tape, y_b, z_b)?;
    if z_b.shape()[0] < 2 {
        log::warn!("global_loss: batch of one image leaves a single global negative");
    }
    let y = tape.mean_axis(y_b, 1, false)?;
    let z = token_means(z_b);
    unigrad_loss(tape, y, &z, &z, lambda)
}

/// Subtracts each image's token mean: `[B, N, D]` in, same shape out.
pub fn de_center<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (z.shape()[1], z.shape()[2]);
    let means = token_means(z);
    let mut out = z.clone();
    for (img, m) in out.data_mut().chunks_exact_mut(n * d).zip(means.data().chunks_exact(d)) {
        for tok in img.chunks_exact_mut(d) {
            for (v, &mu) in tok.iter_mut().zip(m) {
                *v = *v - mu;
            }
        }
    }
    out
}

/// Tape version of [`de_center`].
pub fn de_center_var<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let mean = tape.mean_axis(y, 1, true)?;
    tape.sub(y, mean)
}

fn degenerate_images<T: Scalar>(x: &Tensor<T>) -> Option<usize> {
    let (n, d) = (x.shape()[1], x.shape()[2]);
    x.data()
        .chunks_exact(n * d)
        .position(|img| img.chunks_exact(d).all(|t| t == &img[..d]))
}

/// Every token is a sample; positives are matching (image, token) pairs and the
/// negatives are all target tokens of the batch.
pub fn dense_loss<T: Scalar>(tape: &mut Tape<T>, y_b: Var, z_b: &Tensor<T>, lambda: f64, de_centered: bool) -> Result<ContrastiveTerm> {
    check_batch_shapes("dense_loss", tape, y_b, z_b)?;
    let (b, n, d) = (z_b.shape()[0], z_b.shape()[1], z_b.shape()[2]);
    let (y, z) = if de_centered {
        for (what, x) in [("prediction", tape.value(y_b)), ("target", z_b)] {
            if let Some(i) = degenerate_images(x) {
                return Err(SimError::Loss(format!(
                    "image {i}: all {what} tokens are identical, nothing is left after de-centering"
                )));
            }
        }
        (de_center_var(tape, y_b)?, de_center(z_b))
    } else {
        (y_b, z_b.clone())
    };
    let y = tape.reshape(y, &[b * n, d])?;
    let z = z.reshaped([b * n, d])?;
    unigrad_core(tape, y, &z, &z, lambda)
}

/// Mean over images of the per-channel token std of row-normalised predictions.
pub fn feature_std<T: Scalar>(y_b: &Tensor<T>) -> f64 {
    let (b, n, d) = (y_b.shape()[0], y_b.shape()[1], y_b.shape()[2]);
    let mut total = 0.0;
    let mut normed = vec![T::zero(); n * d];
    for img in y_b.data().chunks_exact(n * d) {
        normalized_rows(img, d, &mut normed);
        let mut acc = 0.0;
        for c in 0..d {
            let vals = normed.iter().skip(c).step_by(d).map(|v| v.f64());
            let mean = vals.clone().sum::<f64>() / n as f64;
            let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            acc += var.sqrt();
        }
        total += acc / d as f64;
    }
    total / b as f64
}

/// Weighted sum of global and dense terms; zero-weight terms are not evaluated.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, y_b: Var, z_b: &Tensor<T>, cfg: &LossConfig) -> Result<(Var, LossReport)> {
    cfg.validate()?;
    let mut report = LossReport {
        feat_std: feature_std(tape.value(y_b)),
        ..Default::default()
    };
    let mut parts = Vec::new();
    if cfg.alpha_global > 0.0 {
        let g = global_loss(tape, y_b, z_b, cfg.lambda)?;
        report.global = tape.value(g.loss).item().f64();
        report.align = Some(g.align);
        report.uniform = Some(g.uniform);
        parts.push(tape.scale(g.loss, cfg.alpha_global)?);
    }
    if cfg.alpha_dense > 0.0 {
        let d = dense_loss(tape, y_b, z_b, cfg.lambda, cfg.de_center)?;
        report.dense = tape.value(d.loss).item().f64();
        report.align = Some(d.align);
        report.uniform = Some(d.uniform);
        parts.push(tape.scale(d.loss, cfg.alpha_dense)?);
    }
    let total = match parts.as_slice() {
        [one] => *one,
        [a, b] => tape.add(*a, *b)?,
        _ => unreachable!("validated weights"),
    };
    report.total = tape.value(total).item().f64();
    Ok((total, report))
}

/// Mean squared error against pixel targets; reported as the dense term.
pub fn pixel_loss<T: Scalar>(tape: &mut Tape<T>, y_b: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<(Var, LossReport)> {
    check_batch_shapes("pixel_loss", tape, y_b, target)?;
    if cfg.alpha_global > 0.0 {
        return Err(SimError::config("loss.alpha_global", "the global loss needs feature targets"));
    }
    let t = tape.constant(target.clone());
    let diff = tape.sub(y_b, t)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq)?;
    let total = tape.scale(mse, cfg.alpha_dense)?;
    let report = LossReport {
        total: tape.value(total).item().f64(),
        dense: tape.value(mse).item().f64(),
        feat_std: feature_std(tape.value(y_b)),
        ..Default::default()
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn value(y: &Tensor<f64>, z: &Tensor<f64>, u: &Tensor<f64>, lambda: f64) -> f64 {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let out = unigrad_loss(&mut tape, yv, z, u, lambda).unwrap();
        tape.value(out.loss).item()
    }

    #[test]
    fn identical_unit_rows_give_minus_one() {
        let y = t(&[1, 2], &[1.0, 0.0]);
        assert_eq!(value(&y, &y, &y, 0.0), -1.0);
    }

    #[test]
    fn orthogonal_negative_is_free() {
        let y = t(&[1, 2], &[1.0, 0.0]);
        assert_eq!(value(&y, &y, &t(&[1, 2], &[0.0, 1.0]), 2.0), -1.0);
    }

    #[test]
    fn zero_rows_are_rejected() {
        let y = t(&[1, 2], &[0.0, 0.0]);
        let z = t(&[1, 2], &[1.0, 0.0]);
        let mut tape = Tape::new();
        let yv = tape.constant(y);
        assert!(unigrad_loss(&mut tape, yv, &z, &z, 1.0).is_err());
    }

    #[test]
    fn plus_minus_tokens_align_after_centering() {
        let v = [0.3, -0.4, 1.2];
        let data: Vec<f64> = v.iter().copied().chain(v.iter().map(|x| -x)).collect();
        let z = t(&[1, 2, 3], &data);
        let mut tape = Tape::new();
        let y = tape.constant(z.clone());
        let out = dense_loss(&mut tape, y, &z, 0.0, true).unwrap();
        assert!((tape.value(out.loss).item() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_image_is_named() {
        let z = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0]);
        let mut tape = Tape::new();
        let y = tape.constant(z.clone());
        let err = dense_loss(&mut tape, y, &z, 1.0, true).unwrap_err().to_string();
        assert!(err.contains("image 1"), "{err}");
    }

    #[test]
    fn report_total_is_weighted_sum() {
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let z = t(&[2, 3, 4], &data);
        let ydata: Vec<f64> = data.iter().map(|v| v * 0.5 + 0.1).collect();
        let mut tape = Tape::new();
        let y = tape.constant(t(&[2, 3, 4], &ydata));
        let cfg = LossConfig {
            alpha_global: 1.0,
            alpha_dense: 4.0,
            ..Default::default()
        };
        let (_, r) = total_loss(&mut tape, y, &z, &cfg).unwrap();
        assert!((r.total - (r.global + 4.0 * r.dense)).abs() <= 1e-6 * r.total.abs().max(1.0));
    }

    #[test]
    fn collapsed_predictions_have_zero_feature_std() {
        let z = t(&[1, 3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(feature_std(&z), 0.0);
    }
}
