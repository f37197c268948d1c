#![allow(dead_code)]

use std::path::Path;

use sim_core::config::Config;
use sim_core::data::{write_dataset, Dataset, SyntheticConfig};

/// A 16x16 shapes dataset of `count` images written under `dir`.
pub fn tiny_dataset(dir: &Path, count: usize, seed: u64) -> Dataset {
    let gen = SyntheticConfig {
        num_classes: 4,
        size: 16,
        seed,
    };
    write_dataset(dir, &gen.generate(count, 0).unwrap()).unwrap();
    Dataset::open(dir).unwrap()
}

/// Small model and schedule that trains in well under a second per step.
pub fn tiny_config(out: &Path) -> Config {
    let mut cfg = Config::default();
    cfg.apply_overrides(&[
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
        "train.batch_size=4",
        "train.epochs=2",
        "train.warmup_epochs=1",
        "train.checkpoint_every=1",
        "train.base_lr=1e-2",
        "loss.lambda=0.05",
    ])
    .unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}
