use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)`.
    pub max_rel_err: f64,
    /// Component with the largest absolute disagreement.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

/// Compares the tape gradient of a scalar function against central differences.
///
/// `f` is re-run on a fresh tape for every perturbation, so it must be deterministic.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let root = f(&mut tape, xv)?;
    tape.backward(root)?;
    let analytic = tape
        .grad(xv)
        .map(Tensor::to_f64_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(compare_gradients(analytic, numeric, tol))
}

/// Summarises analytic against numeric gradients with the shared relative-error rule.
pub fn compare_gradients(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> GradCheckReport {
    let (mut worst, mut worst_index) = (0.0f64, 0);
    let mut scale = 1e-8f64;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let d = (a - n).abs();
        if d > worst {
            worst = d;
            worst_index = i;
        }
        scale = scale.max(a.abs()).max(n.abs());
    }
    let max_rel_err = worst / scale;
    GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
        passed: max_rel_err < tol,
    }
}
