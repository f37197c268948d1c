//! Frozen-feature evaluation: kNN monitor and a linear probe on backbone features.

use rayon::prelude::*;
use serde::Serialize;

use crate::augment::eval_view;
use crate::config::EvalConfig;
use crate::data::Dataset;
use crate::error::{Result, SimError};
use crate::model::{extract_backbone_features, SimModel};
use crate::tensor::Scalar;

const EXTRACT_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    /// Row-major `[len, dim]`.
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub l2_normalized: bool,
}

impl FeatureBank {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(SimError::invalid(
                "feature_bank",
                format!("{} values do not form {} rows of width {dim}", features.len(), labels.len()),
            ));
        }
        Ok(FeatureBank {
            features,
            dim,
            labels,
            l2_normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Scales every row to unit length; all-zero rows are left at zero.
    pub fn l2_normalize(mut self) -> Self {
        for row in self.features.chunks_exact_mut(self.dim) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.l2_normalized = true;
        self
    }
}

/// Embeds every sample (resized, normalized, unmasked) with the online backbone.
pub fn build_bank<T: Scalar>(model: &SimModel<T>, dataset: &Dataset) -> Result<FeatureBank> {
    let size = model.cfg.image_size;
    let dim = model.cfg.backbone_dim;
    let chunks: Vec<Vec<f64>> = dataset
        .samples
        .par_chunks(EXTRACT_CHUNK)
        .map(|chunk| {
            let views: Vec<_> = chunk.iter().map(|s| eval_view(&s.image, size, &dataset.norm)).collect();
            let refs: Vec<_> = views.iter().collect();
            Ok(extract_backbone_features(model, &refs)?.to_f64_vec())
        })
        .collect::<Result<_>>()?;
    let bank = FeatureBank::new(chunks.concat(), dim, dataset.labels())?;
    Ok(bank.l2_normalize())
}

fn check_pair(train: &FeatureBank, test: &FeatureBank, op: &'static str) -> Result<()> {
    if train.dim != test.dim {
        return Err(SimError::invalid(op, format!("train dim {} != test dim {}", train.dim, test.dim)));
    }
    if train.is_empty() {
        return Err(SimError::invalid(op, "empty training bank"));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Top-1 accuracy of a similarity-weighted vote over the `k` nearest training rows.
/// Each neighbor contributes `exp(sim / temperature)`; similarity is the dot product,
/// i.e. cosine similarity for normalized banks.
pub fn knn_classify(train: &FeatureBank, test: &FeatureBank, k: usize, temperature: f64) -> Result<f64> {
    check_pair(train, test, "knn")?;
    if k == 0 || k > train.len() {
        return Err(SimError::invalid("knn", format!("k = {k} must be in 1..={}", train.len())));
    }
    if !(temperature > 0.0) {
        return Err(SimError::invalid("knn", "temperature must be positive"));
    }
    if test.is_empty() {
        return Ok(0.0);
    }
    let classes = train.num_classes().max(test.num_classes());
    let correct: usize = (0..test.len())
        .into_par_iter()
        .map(|i| {
            let q = test.row(i);
            let mut sims: Vec<(f64, usize)> = (0..train.len()).map(|j| (dot(q, train.row(j)), j)).collect();
            sims.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0));
            let mut votes = vec![0.0; classes];
            for &(s, j) in &sims[..k] {
                votes[train.labels[j]] += (s / temperature).exp();
            }
            usize::from(argmax(&votes) == test.labels[i])
        })
        .sum();
    Ok(correct as f64 / test.len() as f64)
}

/// Multinomial logistic regression on frozen features, fitted by full-batch gradient
/// descent from zero weights. Returns test accuracy and the per-epoch training loss.
pub fn linear_probe_with_history(train: &FeatureBank, test: &FeatureBank, epochs: usize, lr: f64) -> Result<(f64, Vec<f64>)> {
    check_pair(train, test, "linear_probe")?;
    let classes = train.num_classes().max(test.num_classes());
    let mut seen = train.labels.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(SimError::invalid("linear_probe", "training set has a single class"));
    }
    let (d, m) = (train.dim, train.len() as f64);
    // w is [classes, d + 1]; the last column is the bias.
    let mut w = vec![0.0; classes * (d + 1)];
    let logits = |w: &[f64], x: &[f64], out: &mut [f64]| {
        for (c, o) in out.iter_mut().enumerate() {
            let wc = &w[c * (d + 1)..(c + 1) * (d + 1)];
            *o = dot(&wc[..d], x) + wc[d];
        }
    };
    let mut history = Vec::with_capacity(epochs);
    let mut z = vec![0.0; classes];
    for _ in 0..epochs {
        let mut grad = vec![0.0; w.len()];
        let mut loss = 0.0;
        for i in 0..train.len() {
            let x = train.row(i);
            logits(&w, x, &mut z);
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            z.iter_mut().for_each(|v| *v = (*v - max).exp());
            let sum: f64 = z.iter().sum();
            let y = train.labels[i];
            loss -= (z[y] / sum).ln();
            for c in 0..classes {
                let r = z[c] / sum - f64::from(u8::from(c == y));
                let gc = &mut grad[c * (d + 1)..(c + 1) * (d + 1)];
                gc[..d].iter_mut().zip(x).for_each(|(g, &xv)| *g += r * xv);
                gc[d] += r;
            }
        }
        history.push(loss / m);
        w.iter_mut().zip(&grad).for_each(|(wv, g)| *wv -= lr * g / m);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            logits(&w, test.row(i), &mut z);
            argmax(&z) == test.labels[i]
        })
        .count();
    let acc = if test.is_empty() { 0.0 } else { correct as f64 / test.len() as f64 };
    Ok((acc, history))
}

pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, epochs: usize, lr: f64) -> Result<f64> {
    Ok(linear_probe_with_history(train, test, epochs, lr)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub checkpoint: String,
    pub metric: String,
    pub value: f64,
    pub k: Option<usize>,
    pub temperature: Option<f64>,
    pub epochs: Option<usize>,
}

/// A frozen-feature metric selectable by name.
pub trait Evaluator: Send + Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, train: &FeatureBank, test: &FeatureBank, cfg: &EvalConfig) -> Result<f64>;
    /// Fills the protocol fields of a result record.
    fn describe(&self, cfg: &EvalConfig, checkpoint: &str, value: f64) -> EvalResult;
}

pub struct Knn;

impl Evaluator for Knn {
    fn name(&self) -> &'static str {
        "knn"
    }

    fn evaluate(&self, train: &FeatureBank, test: &FeatureBank, cfg: &EvalConfig) -> Result<f64> {
        knn_classify(train, test, cfg.k.min(train.len()), cfg.temperature)
    }

    fn describe(&self, cfg: &EvalConfig, checkpoint: &str, value: f64) -> EvalResult {
        EvalResult {
            checkpoint: checkpoint.into(),
            metric: self.name().into(),
            value,
            k: Some(cfg.k),
            temperature: Some(cfg.temperature),
            epochs: None,
        }
    }
}

pub struct LinearProbe;

impl Evaluator for LinearProbe {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn evaluate(&self, train: &FeatureBank, test: &FeatureBank, cfg: &EvalConfig) -> Result<f64> {
        linear_probe(train, test, cfg.probe_epochs, cfg.probe_lr)
    }

    fn describe(&self, cfg: &EvalConfig, checkpoint: &str, value: f64) -> EvalResult {
        EvalResult {
            checkpoint: checkpoint.into(),
            metric: self.name().into(),
            value,
            k: None,
            temperature: None,
            epochs: Some(cfg.probe_epochs),
        }
    }
}

pub fn evaluators() -> Vec<Box<dyn Evaluator>> {
    vec![Box::new(Knn), Box::new(LinearProbe)]
}

pub fn evaluator(name: &str) -> Option<Box<dyn Evaluator>> {
    evaluators().into_iter().find(|e| e.name() == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: &[[f64; 2]], labels: &[usize]) -> FeatureBank {
        FeatureBank::new(rows.concat(), 2, labels.to_vec()).unwrap()
    }

    #[test]
    fn self_match_with_k1() {
        let b = bank(&[[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]], &[0, 1, 2]).l2_normalize();
        assert_eq!(knn_classify(&b, &b, 1, 0.07).unwrap(), 1.0);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let a = bank(&[[1.0, 0.0]], &[0]);
        let b = FeatureBank::new(vec![1.0, 0.0, 0.0], 3, vec![0]).unwrap();
        assert!(knn_classify(&a, &b, 1, 0.1).is_err());
        assert!(linear_probe(&a, &b, 1, 0.1).is_err());
    }

    #[test]
    fn single_class_probe_is_rejected() {
        let a = bank(&[[1.0, 0.0], [0.5, 0.1]], &[0, 0]);
        assert!(linear_probe(&a, &a, 5, 0.1).is_err());
    }

    #[test]
    fn registry_lookup() {
        assert_eq!(evaluator("knn").unwrap().name(), "knn");
        assert_eq!(evaluator("linear").unwrap().name(), "linear");
        assert!(evaluator("finetune").is_none());
    }
}
