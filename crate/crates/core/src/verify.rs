//! Finite-difference verification of the op catalog.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{Dataset, Sample, SyntheticConfig};
use crate::error::Result;
use crate::image::Normalization;
use crate::tensor::{grad_check, GradCheckReport, OpKind, Tape, Tensor, Var};
use crate::trainer::{loss_and_grads, make_batch, targets, TrainState};

/// One named gradient check.
#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

type CheckFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// Wraps `op` so the scalar output is `sum(op(x) * w)` for a fixed random `w`.
fn weighted(rng: &mut ChaCha8Rng, out_shape: &[usize], op: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static) -> CheckFn {
    let w = random(rng, out_shape, -1.0, 1.0);
    Box::new(move |tape, x| {
        let y = op(tape, x)?;
        let wv = tape.constant(w.clone());
        let p = tape.mul(y, wv)?;
        tape.sum(p)
    })
}

/// Gradient checks for every op in the catalog, on small random shapes in 64-bit.
pub fn op_catalog_checks(seed: u64, eps: f64, tol: f64) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(String, Tensor<f64>, CheckFn)> = Vec::new();

    let mut binary = |name: &str, kind: OpKind, rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        // x on the left against a broadcast row, and on the right broadcast against a matrix.
        let row = random(rng, &[4], lo, hi);
        let k1 = kind.clone();
        let f = weighted(rng, &[3, 4], move |t, x| {
            let r = t.constant(row.clone());
            t.apply(k1.clone(), &[x, r])
        });
        cases.push((format!("{name}/lhs"), random(rng, &[3, 4], lo, hi), f));
        let mat = random(rng, &[3, 4], lo, hi);
        let f = weighted(rng, &[3, 4], move |t, x| {
            let m = t.constant(mat.clone());
            t.apply(kind.clone(), &[m, x])
        });
        cases.push((format!("{name}/rhs-broadcast"), random(rng, &[1, 4], lo, hi), f));
    };
    binary("add", OpKind::Add, &mut rng, -1.0, 1.0);
    binary("sub", OpKind::Sub, &mut rng, -1.0, 1.0);
    binary("mul", OpKind::Mul, &mut rng, -1.0, 1.0);
    binary("div", OpKind::Div, &mut rng, 0.5, 2.0);

    let b = random(&mut rng, &[4, 5], -1.0, 1.0);
    let f = weighted(&mut rng, &[3, 5], move |t, x| {
        let bv = t.constant(b.clone());
        t.matmul(x, bv)
    });
    cases.push(("matmul/lhs".into(), random(&mut rng, &[3, 4], -1.0, 1.0), f));
    let a = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let f = weighted(&mut rng, &[2, 3, 5], move |t, x| {
        let av = t.constant(a.clone());
        t.matmul(av, x)
    });
    cases.push(("matmul/batched-rhs".into(), random(&mut rng, &[2, 4, 5], -1.0, 1.0), f));
    let a = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let f = weighted(&mut rng, &[2, 3, 5], move |t, x| {
        let av = t.constant(a.clone());
        t.matmul(av, x)
    });
    cases.push(("matmul/flattened-rhs".into(), random(&mut rng, &[4, 5], -1.0, 1.0), f));

    let f = weighted(&mut rng, &[2, 4, 3], |t, x| t.transpose(x));
    cases.push(("transpose".into(), random(&mut rng, &[2, 3, 4], -1.0, 1.0), f));
    let f = weighted(&mut rng, &[4, 2, 3], |t, x| t.permute(x, &[2, 0, 1]));
    cases.push(("permute".into(), random(&mut rng, &[2, 3, 4], -1.0, 1.0), f));
    let f = weighted(&mut rng, &[6, 4], |t, x| t.reshape(x, &[6, 4]));
    cases.push(("reshape".into(), random(&mut rng, &[2, 3, 4], -1.0, 1.0), f));
    let other = random(&mut rng, &[2, 2, 4], -1.0, 1.0);
    let f = weighted(&mut rng, &[2, 5, 4], move |t, x| {
        let o = t.constant(other.clone());
        t.concat(&[x, o], 1)
    });
    cases.push(("concat".into(), random(&mut rng, &[2, 3, 4], -1.0, 1.0), f));
    let f = weighted(&mut rng, &[2, 2, 4], |t, x| t.slice(x, 1, 1, 3));
    cases.push(("slice".into(), random(&mut rng, &[2, 3, 4], -1.0, 1.0), f));
    let f = weighted(&mut rng, &[4, 4], |t, x| t.gather(x, 0, &[5, 0, 5, 2]));
    cases.push(("gather".into(), random(&mut rng, &[6, 4], -1.0, 1.0), f));
    let f = weighted(&mut rng, &[], |t, x| t.sum(x));
    cases.push(("sum/all".into(), random(&mut rng, &[3, 4], -1.0, 1.0), f));
    let f = weighted(&mut rng, &[2, 4], |t, x| t.sum_axis(x, 1, false));
    cases.push(("sum/axis".into(), random(&mut rng, &[2, 3, 4], -1.0, 1.0), f));
    let f = weighted(&mut rng, &[2, 1, 4], |t, x| t.mean_axis(x, 1, true));
    cases.push(("mean/axis".into(), random(&mut rng, &[2, 3, 4], -1.0, 1.0), f));
    let f = weighted(&mut rng, &[], |t, x| t.mean(x));
    cases.push(("mean/all".into(), random(&mut rng, &[3, 4], -1.0, 1.0), f));
    let f = weighted(&mut rng, &[2, 3, 4], |t, x| t.broadcast_to(x, &[2, 3, 4]));
    cases.push(("broadcast".into(), random(&mut rng, &[3, 1], -1.0, 1.0), f));
    let f = weighted(&mut rng, &[3, 4], |t, x| t.exp(x));
    cases.push(("exp".into(), random(&mut rng, &[3, 4], -1.0, 1.0), f));
    let f = weighted(&mut rng, &[3, 4], |t, x| t.log(x));
    cases.push(("log".into(), random(&mut rng, &[3, 4], 0.5, 2.0), f));
    let f = weighted(&mut rng, &[3, 4], |t, x| t.sqrt(x));
    cases.push(("sqrt".into(), random(&mut rng, &[3, 4], 0.5, 2.0), f));
    let f = weighted(&mut rng, &[3, 4], |t, x| t.pow(x, 3.0));
    cases.push(("power".into(), random(&mut rng, &[3, 4], 0.5, 2.0), f));
    let f = weighted(&mut rng, &[3, 4], |t, x| t.gelu(x));
    cases.push(("gelu".into(), random(&mut rng, &[3, 4], -2.0, 2.0), f));
    let f = weighted(&mut rng, &[3, 4], |t, x| t.softmax(x, 1));
    cases.push(("softmax/last".into(), random(&mut rng, &[3, 4], -2.0, 2.0), f));
    let f = weighted(&mut rng, &[3, 4], |t, x| t.softmax(x, 0));
    cases.push(("softmax/first".into(), random(&mut rng, &[3, 4], -2.0, 2.0), f));
    let f = weighted(&mut rng, &[3, 5], |t, x| t.layer_norm(x, 1, 1e-5));
    cases.push(("layer_norm".into(), random(&mut rng, &[3, 5], -2.0, 2.0), f));
    let f = weighted(&mut rng, &[2, 4, 3], |t, x| t.batch_norm_train(x, 1e-5).map(|r| r.0));
    cases.push(("batch_norm/train".into(), random(&mut rng, &[2, 4, 3], -2.0, 2.0), f));
    let f = weighted(&mut rng, &[4, 3], |t, x| t.batch_norm_eval(x, &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5));
    cases.push(("batch_norm/eval".into(), random(&mut rng, &[4, 3], -2.0, 2.0), f));
    let f = weighted(&mut rng, &[3, 4], |t, x| t.l2_normalize(x, 1, 1e-8));
    cases.push(("l2_normalize".into(), random(&mut rng, &[3, 4], -2.0, 2.0), f));

    cases
        .into_iter()
        .map(|(name, x, f)| {
            let report = grad_check(f, &x, eps, tol)?;
            Ok(NamedCheck { name, report })
        })
        .collect()
}

/// Overrides for the composite check: B = 2, N = 16 tokens, D = 16.
pub const COMPOSITE_OVERRIDES: &[&str] = &[
    "model.image_size=16",
    "model.patch_size=4",
    "model.backbone_dim=16",
    "model.backbone_depth=1",
    "model.backbone_heads=2",
    "model.embed_dim=16",
    "model.projector_depth=1",
    "model.projector_heads=2",
    "model.decoder_depth=1",
    "model.decoder_heads=2",
    "model.mlp_ratio=2",
    "train.batch_size=2",
    "train.epochs=2",
    "train.warmup_epochs=1",
    "loss.alpha_global=1",
    "loss.alpha_dense=1",
];

/// Finite-difference check of the whole online path (encoder, decoder, global and
/// dense loss) in 64-bit. Every parameter tensor gets one probe, plus `extra` random
/// scalar probes; targets are held fixed as in training.
pub fn composite_check(seed: u64, extra: usize, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut cfg = Config::default();
    cfg.apply_overrides(COMPOSITE_OVERRIDES)?;
    cfg.seed = seed;
    composite_check_with(&cfg, extra, eps, tol)
}

pub fn composite_check_with(cfg: &Config, extra: usize, eps: f64, tol: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let gen = SyntheticConfig {
        num_classes: 2,
        size: cfg.model.image_size,
        seed: cfg.seed,
    };
    let samples = gen
        .generate(cfg.train.batch_size, 0)?
        .into_iter()
        .enumerate()
        .map(|(i, (image, label))| Sample {
            path: format!("synthetic-{i}").into(),
            label,
            image,
        })
        .collect();
    let dataset = Dataset {
        samples,
        norm: Normalization::default(),
    };
    let mut state = TrainState::<f64>::init(cfg)?;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let batch = make_batch(&dataset, &indices, 0, cfg, &state.model.decoder_pos)?;
    let target = targets(&mut state.model, &batch)?;
    let model = &mut state.model;
    let (_, g_enc, g_dec) = loss_and_grads(model, &batch, &target, cfg)?;

    // (is decoder, tensor, element)
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut probes = Vec::new();
    for (dec, grads) in [(false, &g_enc), (true, &g_dec)] {
        for (t, g) in grads.iter().enumerate() {
            probes.push((dec, t, rng.random_range(0..g.numel())));
        }
    }
    let sizes: Vec<(bool, usize, usize)> = [(false, &g_enc), (true, &g_dec)]
        .iter()
        .flat_map(|(dec, gs)| gs.iter().enumerate().map(move |(t, g)| (*dec, t, g.numel())))
        .collect();
    for _ in 0..extra {
        let (dec, t, n) = sizes[rng.random_range(0..sizes.len())];
        probes.push((dec, t, rng.random_range(0..n)));
    }

    let mut analytic = Vec::with_capacity(probes.len());
    let mut numeric = Vec::with_capacity(probes.len());
    for &(dec, t, i) in &probes {
        analytic.push(if dec { g_dec[t].data()[i] } else { g_enc[t].data()[i] });
        let mut eval = |delta: f64| -> Result<f64> {
            let store = if dec { &mut model.online_decoder.params } else { &mut model.online.params };
            let orig = store.values()[t].data()[i];
            store.values_mut()[t].data_mut()[i] = orig + delta;
            let out = loss_and_grads(model, &batch, &target, cfg).map(|r| r.0.total);
            let store = if dec { &mut model.online_decoder.params } else { &mut model.online.params };
            store.values_mut()[t].data_mut()[i] = orig;
            out
        };
        numeric.push((eval(eps)? - eval(-eps)?) / (2.0 * eps));
    }
    Ok(crate::tensor::compare_gradients(analytic, numeric, tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_catalog_op_matches_finite_differences() {
        for check in op_catalog_checks(7, 1e-4, 1e-4).unwrap() {
            assert!(
                check.report.passed,
                "{}: rel err {} at {}",
                check.name, check.report.max_rel_err, check.report.worst_index
            );
        }
    }

    #[test]
    fn composite_path_matches_finite_differences() {
        let report = composite_check(1, 40, 1e-5, 1e-3).unwrap();
        assert!(report.passed, "rel err {} at probe {}", report.max_rel_err, report.worst_index);
    }
}
