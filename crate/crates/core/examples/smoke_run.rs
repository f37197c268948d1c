//! Desk-scale pretraining run on the synthetic shapes set, reporting kNN accuracy of
//! every checkpoint written. Extra arguments are `key=value` config overrides.
//!
//! cargo run --release -p sim-core --example smoke_run -- out.dir=runs/smoke train.epochs=20

use std::path::Path;

use sim_core::config::Config;
use sim_core::data::{generate_synthetic, Dataset, SyntheticConfig};
use sim_core::eval::{build_bank, knn_classify};
use sim_core::trainer::{fit, load_model, FitOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new("runs/shapes");
    if !data.join("train/manifest.tsv").exists() {
        generate_synthetic(data, &SyntheticConfig::default(), 2000, 500)?;
    }
    let train = Dataset::open(&data.join("train"))?;
    let test = Dataset::open(&data.join("test"))?;
    let mut cfg = Config::default();
    let args: Vec<String> = std::env::args().skip(1).collect();
    cfg.apply_overrides(&args)?;
    eprintln!("{}", cfg.to_text());
    let summary = fit::<f32>(&cfg, &train, &FitOptions::default())?;
    for (e, l) in &summary.epoch_losses {
        eprintln!("epoch {e} loss {l:.5}");
    }
    eprintln!("min feat_std {:.4e}", summary.min_feat_std);
    let mut ckpts: Vec<_> = std::fs::read_dir(&cfg.out_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    ckpts.sort();
    for path in ckpts {
        let (c, model) = load_model::<f32>(&path)?;
        let a = build_bank(&model, &train)?;
        let b = build_bank(&model, &test)?;
        let acc = knn_classify(&a, &b, c.eval.k, c.eval.temperature)?;
        println!("{} knn {acc:.4}", path.display());
    }
    Ok(())
}
