//! Flat `key = value` run configuration with dotted keys.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::error::{Result, SimError};
use crate::loss::LossConfig;
use crate::model::{ModelConfig, TargetKind};
use crate::nn::NormKind;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Ready batches buffered ahead of the optimiser.
    pub prefetch: usize,
    pub ema_base: f64,
    pub ema_final: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1.5e-4,
            batch_size: 64,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            warmup_epochs: 5,
            epochs: 100,
            checkpoint_every: 10,
            grad_clip: 0.0,
            prefetch: 2,
            ema_base: 0.99,
            ema_final: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub temperature: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 20,
            temperature: 0.07,
            probe_epochs: 200,
            probe_lr: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub aug: AugmentConfig,
    pub same_view: bool,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            train_data: None,
            test_data: None,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            aug: AugmentConfig::default(),
            same_view: false,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| SimError::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(SimError::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_pair<V: FromStr + Copy>(key: &str, value: &str) -> Result<(V, V)>
where
    V::Err: Display,
{
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 2 {
        return Err(SimError::config(key, format!("expected `lo,hi`, got `{value}`")));
    }
    Ok((parse(key, parts[0])?, parse(key, parts[1])?))
}

fn pair<V: Display>(p: (V, V)) -> String {
    format!("{},{}", p.0, p.1)
}

impl Config {
    /// Applies one `key = value` assignment. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        let m = &mut self.model;
        let a = &mut self.aug;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.train" => self.train_data = Some(PathBuf::from(v)),
            "data.test" => self.test_data = Some(PathBuf::from(v)),
            "out.dir" => self.out_dir = PathBuf::from(v),

            "model.image_size" => m.image_size = parse(key, v)?,
            "model.patch_size" => m.patch_size = parse(key, v)?,
            "model.backbone_dim" => m.backbone_dim = parse(key, v)?,
            "model.backbone_depth" => m.backbone_depth = parse(key, v)?,
            "model.backbone_heads" => m.backbone_heads = parse(key, v)?,
            "model.embed_dim" => m.embed_dim = parse(key, v)?,
            "model.projector_depth" => m.projector_depth = parse(key, v)?,
            "model.projector_heads" => m.projector_heads = parse(key, v)?,
            "model.decoder_depth" => m.decoder_depth = parse(key, v)?,
            "model.decoder_heads" => m.decoder_heads = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.norm" => {
                m.norm = NormKind::parse(v).ok_or_else(|| SimError::config(key, format!("expected bn or ln, got `{v}`")))?
            }
            "model.target" => {
                m.target = TargetKind::parse(v)
                    .ok_or_else(|| SimError::config(key, format!("expected feature or pixel, got `{v}`")))?
            }
            "model.bn_momentum" => m.bn_momentum = parse(key, v)?,
            "model.scale_log_base" => m.scale_encoding.log_base = parse(key, v)?,
            "model.scale_multiplier" => m.scale_encoding.multiplier = parse(key, v)?,

            "aug.same_view" => self.same_view = parse_bool(key, v)?,
            "aug.color" => a.use_color_aug = parse_bool(key, v)?,
            "aug.mask_ratio" => a.mask_ratio = parse(key, v)?,
            "aug.crop_scale" => a.crop_scale = parse_pair(key, v)?,
            "aug.aspect_ratio" => a.aspect_ratio = parse_pair(key, v)?,
            "aug.flip_prob" => a.flip_prob = parse(key, v)?,
            "aug.brightness" => a.brightness = parse(key, v)?,
            "aug.contrast" => a.contrast = parse(key, v)?,
            "aug.saturation" => a.saturation = parse(key, v)?,
            "aug.hue" => a.hue = parse(key, v)?,
            "aug.jitter_prob" => a.jitter_prob = parse(key, v)?,
            "aug.grayscale_prob" => a.grayscale_prob = parse(key, v)?,
            "aug.blur_prob" => {
                let (x, y) = parse_pair(key, v)?;
                a.blur_prob = [x, y];
            }
            "aug.solarize_prob" => {
                let (x, y) = parse_pair(key, v)?;
                a.solarize_prob = [x, y];
            }
            "aug.blur_sigma" => a.blur_sigma = parse_pair(key, v)?,
            "aug.solarize_threshold" => a.solarize_threshold = parse(key, v)?,

            "loss.lambda" => self.loss.lambda = parse(key, v)?,
            "loss.alpha_global" => self.loss.alpha_global = parse(key, v)?,
            "loss.alpha_dense" => self.loss.alpha_dense = parse(key, v)?,
            "loss.de_center" => self.loss.de_center = parse_bool(key, v)?,

            "train.base_lr" => t.base_lr = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.betas" => t.betas = parse_pair(key, v)?,
            "train.adam_eps" => t.adam_eps = parse(key, v)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.grad_clip" => t.grad_clip = parse(key, v)?,
            "train.prefetch" => t.prefetch = parse(key, v)?,
            "ema.base" => t.ema_base = parse(key, v)?,
            "ema.final" => t.ema_final = parse(key, v)?,

            "eval.k" => self.eval.k = parse(key, v)?,
            "eval.temperature" => self.eval.temperature = parse(key, v)?,
            "eval.probe_epochs" => self.eval.probe_epochs = parse(key, v)?,
            "eval.probe_lr" => self.eval.probe_lr = parse(key, v)?,
            _ => return Err(SimError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let a = &self.aug;
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = vec![
            ("seed", self.seed.to_string()),
            ("data.train", path(&self.train_data)),
            ("data.test", path(&self.test_data)),
            ("out.dir", self.out_dir.display().to_string()),
            ("model.image_size", m.image_size.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.backbone_dim", m.backbone_dim.to_string()),
            ("model.backbone_depth", m.backbone_depth.to_string()),
            ("model.backbone_heads", m.backbone_heads.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.projector_depth", m.projector_depth.to_string()),
            ("model.projector_heads", m.projector_heads.to_string()),
            ("model.decoder_depth", m.decoder_depth.to_string()),
            ("model.decoder_heads", m.decoder_heads.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.norm", m.norm.name().to_string()),
            ("model.target", m.target.name().to_string()),
            ("model.bn_momentum", m.bn_momentum.to_string()),
            ("model.scale_log_base", m.scale_encoding.log_base.to_string()),
            ("model.scale_multiplier", m.scale_encoding.multiplier.to_string()),
            ("aug.same_view", self.same_view.to_string()),
            ("aug.color", a.use_color_aug.to_string()),
            ("aug.mask_ratio", a.mask_ratio.to_string()),
            ("aug.crop_scale", pair(a.crop_scale)),
            ("aug.aspect_ratio", pair(a.aspect_ratio)),
            ("aug.flip_prob", a.flip_prob.to_string()),
            ("aug.brightness", a.brightness.to_string()),
            ("aug.contrast", a.contrast.to_string()),
            ("aug.saturation", a.saturation.to_string()),
            ("aug.hue", a.hue.to_string()),
            ("aug.jitter_prob", a.jitter_prob.to_string()),
            ("aug.grayscale_prob", a.grayscale_prob.to_string()),
            ("aug.blur_prob", pair((a.blur_prob[0], a.blur_prob[1]))),
            ("aug.solarize_prob", pair((a.solarize_prob[0], a.solarize_prob[1]))),
            ("aug.blur_sigma", pair(a.blur_sigma)),
            ("aug.solarize_threshold", a.solarize_threshold.to_string()),
            ("loss.lambda", self.loss.lambda.to_string()),
            ("loss.alpha_global", self.loss.alpha_global.to_string()),
            ("loss.alpha_dense", self.loss.alpha_dense.to_string()),
            ("loss.de_center", self.loss.de_center.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.betas", pair(t.betas)),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.warmup_epochs", t.warmup_epochs.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("train.prefetch", t.prefetch.to_string()),
            ("ema.base", t.ema_base.to_string()),
            ("ema.final", t.ema_final.to_string()),
            ("eval.k", self.eval.k.to_string()),
            ("eval.temperature", self.eval.temperature.to_string()),
            ("eval.probe_epochs", self.eval.probe_epochs.to_string()),
            ("eval.probe_lr", self.eval.probe_lr.to_string()),
        ];
        out.retain(|(k, v)| !(k.starts_with("data.") && v.is_empty()));
        out
    }

    /// Canonical text form; parsing it reproduces this config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies every assignment in `text` (blank lines and `#` comments ignored).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SimError::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| SimError::config(o, "override must look like key=value"))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.aug.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(SimError::config("train.batch_size", "need at least 2 images per batch"));
        }
        if t.epochs == 0 {
            return Err(SimError::config("train.epochs", "must be positive"));
        }
        if t.warmup_epochs >= t.epochs {
            return Err(SimError::config(
                "train.warmup_epochs",
                format!("{} must be below train.epochs = {}", t.warmup_epochs, t.epochs),
            ));
        }
        if !(t.base_lr > 0.0) {
            return Err(SimError::config("train.base_lr", "must be positive"));
        }
        if !(0.0 < t.ema_base && t.ema_base <= t.ema_final && t.ema_final <= 1.0) {
            return Err(SimError::config("ema.base", "need 0 < ema.base <= ema.final <= 1"));
        }
        if self.model.target == TargetKind::Pixel && self.loss.alpha_global > 0.0 {
            return Err(SimError::config("loss.alpha_global", "the global loss needs model.target = feature"));
        }
        Ok(())
    }
}

/// Override strings reproducing each ablation row, keyed `a` to `i`, on top of the defaults.
///
/// Each axis maps to one key: `model.target`, `aug.same_view`, `aug.color`,
/// `model.norm`, `loss.alpha_global`, `loss.alpha_dense`.
pub fn ablation_rows() -> Vec<(&'static str, Vec<&'static str>)> {
    let row = |target, same, color, norm, global, dense| -> Vec<&'static str> {
        vec![target, same, color, norm, global, dense]
    };
    vec![
        ("a", row("model.target=pixel", "aug.same_view=true", "aug.color=false", "model.norm=ln", "loss.alpha_global=0", "loss.alpha_dense=1")),
        ("b", row("model.target=feature", "aug.same_view=true", "aug.color=false", "model.norm=ln", "loss.alpha_global=0", "loss.alpha_dense=1")),
        ("c", row("model.target=pixel", "aug.same_view=true", "aug.color=true", "model.norm=ln", "loss.alpha_global=0", "loss.alpha_dense=1")),
        ("d", row("model.target=pixel", "aug.same_view=false", "aug.color=false", "model.norm=ln", "loss.alpha_global=0", "loss.alpha_dense=1")),
        ("e", row("model.target=feature", "aug.same_view=false", "aug.color=false", "model.norm=ln", "loss.alpha_global=0", "loss.alpha_dense=1")),
        ("f", row("model.target=feature", "aug.same_view=false", "aug.color=true", "model.norm=ln", "loss.alpha_global=0", "loss.alpha_dense=1")),
        ("g", row("model.target=feature", "aug.same_view=false", "aug.color=true", "model.norm=bn", "loss.alpha_global=0", "loss.alpha_dense=1")),
        ("h", row("model.target=feature", "aug.same_view=false", "aug.color=true", "model.norm=bn", "loss.alpha_global=1", "loss.alpha_dense=4")),
        ("i", row("model.target=feature", "aug.same_view=false", "aug.color=true", "model.norm=bn", "loss.alpha_global=1", "loss.alpha_dense=0")),
    ]
}

/// Full-scale ViT-B/16 settings, kept for reference; not trainable on a desk machine.
pub const PAPER_PROFILE: &str = "\
model.image_size = 224
model.patch_size = 16
model.backbone_dim = 768
model.backbone_depth = 12
model.backbone_heads = 12
model.embed_dim = 512
model.projector_heads = 16
model.decoder_heads = 16
train.batch_size = 4096
train.warmup_epochs = 40
train.epochs = 1600
";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.apply_overrides(&["loss.alpha_global=1", "aug.crop_scale=0.3,0.9", "model.norm=ln"]).unwrap();
        assert_eq!(Config::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = Config::default().set("train.lr", "1").unwrap_err().to_string();
        assert!(err.contains("train.lr"), "{err}");
        let err = Config::default().set("train.batch_size", "six").unwrap_err().to_string();
        assert!(err.contains("train.batch_size"), "{err}");
    }

    #[test]
    fn every_ablation_row_is_valid() {
        for (name, overrides) in ablation_rows() {
            let mut cfg = Config::default();
            cfg.apply_overrides(&overrides).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("row {name}: {e}"));
        }
    }

    #[test]
    fn paper_profile_parses() {
        let cfg = Config::from_text(PAPER_PROFILE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.num_tokens(), 196);
    }
}
