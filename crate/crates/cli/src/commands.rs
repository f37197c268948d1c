use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sim_core::checkpoint::Checkpoint;
use sim_core::config::Config;
use sim_core::data::{generate_synthetic, Dataset, SyntheticConfig};
use sim_core::eval::{build_bank, evaluator};
use sim_core::geometry::{relative_positions_b, relative_scale_with, CropSpec, GridSpec};
use sim_core::trainer::{fit, FitOptions, TrainState};
use sim_core::verify::{composite_check_with, op_catalog_checks, COMPOSITE_OVERRIDES};
use sim_core::SimError;

use crate::Common;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or values: exit code 2.
    Usage(String),
    /// The command ran but its postcondition failed, or a runtime error: exit code 1.
    Failed(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config { .. } => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Splits `--set` items into command-local keys and config overrides.
fn split_sets(sets: &[String], local: &[&str]) -> Result<(BTreeMap<String, String>, Vec<String>)> {
    let mut extras = BTreeMap::new();
    let mut overrides = Vec::new();
    for item in sets {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
        if local.contains(&k.trim()) {
            extras.insert(k.trim().to_string(), v.trim().to_string());
        } else {
            overrides.push(item.clone());
        }
    }
    Ok((extras, overrides))
}

fn build_config(base: Config, c: &Common, overrides: &[String]) -> Result<Config> {
    let mut cfg = base;
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn echo(cfg: Option<&Config>, extras: &BTreeMap<String, String>) {
    println!("# config");
    if let Some(cfg) = cfg {
        print!("{}", cfg.to_text());
    }
    for (k, v) in extras {
        println!("{k} = {v}");
    }
    println!("# end config");
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
            }
            std::fs::write(path, text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| CliError::Usage(format!("config key `{key}` must be set")))
}

fn parse_local<V: std::str::FromStr>(extras: &BTreeMap<String, String>, key: &str, default: V) -> Result<V> {
    match extras.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| CliError::Usage(format!("`{key}`: cannot parse `{v}`"))),
    }
}

#[derive(Serialize)]
struct PretrainSummary {
    last_checkpoint: PathBuf,
    init_checkpoint: Option<PathBuf>,
    log: PathBuf,
    steps: usize,
    epoch_losses: Vec<(usize, f64)>,
    min_feat_std: f64,
    collapsed: bool,
}

pub fn pretrain(c: &Common) -> Result<()> {
    let (extras, overrides) = split_sets(&c.set, &[])?;
    let cfg = build_config(Config::default(), c, &overrides)?;
    echo(Some(&cfg), &extras);
    let train = Dataset::open(require(&cfg.train_data, "data.train")?)?;
    let opts = FitOptions {
        resume: c.checkpoint.clone(),
        stop_after: None,
    };
    let s = fit::<f32>(&cfg, &train, &opts)?;
    if s.collapsed {
        log::warn!("representation collapsed (min feat_std {:.3e})", s.min_feat_std);
    }
    let summary = PretrainSummary {
        last_checkpoint: s.last_checkpoint,
        init_checkpoint: s.init_checkpoint,
        log: s.log_path,
        steps: s.steps,
        epoch_losses: s.epoch_losses,
        min_feat_std: s.min_feat_std,
        collapsed: s.collapsed,
    };
    let text = to_json(&summary);
    match &c.out {
        Some(p) => emit(Some(p), &text),
        None => emit(Some(&cfg.out_dir.join("summary.json")), &text).map(|_| print!("{text}")),
    }
}

pub fn eval(c: &Common, metric: &str) -> Result<()> {
    let ckpt = c
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    let (extras, overrides) = split_sets(&c.set, &[])?;
    let ck = Checkpoint::read(ckpt)?;
    let (ck_cfg, state) = TrainState::<f32>::from_checkpoint(&ck)?;
    let cfg = build_config(ck_cfg.clone(), c, &overrides)?;
    if cfg.model != ck_cfg.model {
        return Err(CliError::Usage("model.* keys cannot be changed for a saved checkpoint".into()));
    }
    echo(Some(&cfg), &extras);
    let train = Dataset::open(require(&cfg.train_data, "data.train")?)?;
    let test = Dataset::open(require(&cfg.test_data, "data.test")?)?;
    let e = evaluator(metric).ok_or_else(|| CliError::Usage(format!("unknown metric `{metric}`")))?;
    let bank_train = build_bank(&state.model, &train)?;
    let bank_test = build_bank(&state.model, &test)?;
    let value = e.evaluate(&bank_train, &bank_test, &cfg.eval)?;
    let result = e.describe(&cfg.eval, &ckpt.display().to_string(), value);
    let text = to_json(&result);
    if c.out.is_some() {
        emit(c.out.as_deref(), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn parse_crop(key: &str, v: &str) -> Result<CropSpec> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("`{key}` expects top,left,height,width; got `{v}`")))?;
    match parts.as_slice() {
        &[t, l, h, w] if h > 0 && w > 0 => Ok(CropSpec::new(t, l, h, w)),
        _ => Err(CliError::Usage(format!("`{key}` expects top,left,height,width with positive extent; got `{v}`"))),
    }
}

pub fn inspect_geometry(c: &Common) -> Result<()> {
    let (extras, overrides) = split_sets(&c.set, &["crop_a", "crop_b", "grid"])?;
    let cfg = build_config(Config::default(), c, &overrides)?;
    echo(None, &extras);
    let get = |k: &str| extras.get(k).ok_or_else(|| CliError::Usage(format!("--set {k}=... is required")));
    let a = parse_crop("crop_a", get("crop_a")?)?;
    let b = parse_crop("crop_b", get("crop_b")?)?;
    let side: usize = parse_local(&extras, "grid", cfg.model.grid_side())?;
    let grid = GridSpec::square(side)?;
    let pos = relative_positions_b(&a, &b, grid)?;
    let scale = relative_scale_with(&a, &b, cfg.model.scale_encoding)?;
    eprintln!("relative scale: {:.6}, {:.6}", scale[0], scale[1]);
    let mut csv = String::from("u,v,pos_h,pos_w\n");
    for (t, p) in pos.iter().enumerate() {
        let (r, col) = grid.coords(t);
        csv.push_str(&format!("{},{},{},{}\n", r + 1, col + 1, p[0], p[1]));
    }
    emit(c.out.as_deref(), &csv)
}

#[derive(Serialize)]
struct GradCheckSummary {
    ops: BTreeMap<String, f64>,
    op_tolerance: f64,
    composite: f64,
    composite_tolerance: f64,
    probes: usize,
    passed: bool,
}

pub fn grad_check(c: &Common) -> Result<()> {
    let (extras, overrides) = split_sets(&c.set, &["probes", "eps"])?;
    let mut base = Config::default();
    if c.config.is_none() {
        base.apply_overrides(COMPOSITE_OVERRIDES)?;
    }
    let cfg = build_config(base, c, &overrides)?;
    echo(Some(&cfg), &extras);
    let probes: usize = parse_local(&extras, "probes", 64)?;
    let eps: f64 = parse_local(&extras, "eps", 1e-5)?;
    let (op_tol, comp_tol) = (1e-4, 1e-3);

    let mut ops = BTreeMap::new();
    let mut passed = true;
    for check in op_catalog_checks(cfg.seed, 1e-4, op_tol)? {
        println!(
            "{:<24} max rel err {:.3e} {}",
            check.name,
            check.report.max_rel_err,
            if check.report.passed { "ok" } else { "FAIL" }
        );
        passed &= check.report.passed;
        ops.insert(check.name, check.report.max_rel_err);
    }
    let composite = composite_check_with(&cfg, probes, eps, comp_tol)?;
    passed &= composite.passed;
    println!("composite max relative error {:.3e}", composite.max_rel_err);
    println!("{}", if passed { "PASS" } else { "FAIL" });
    if c.out.is_some() {
        let summary = GradCheckSummary {
            ops,
            op_tolerance: op_tol,
            composite: composite.max_rel_err,
            composite_tolerance: comp_tol,
            probes: composite.analytic.len(),
            passed,
        };
        emit(c.out.as_deref(), &to_json(&summary))?;
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::Failed("gradient check failed".into()))
    }
}

pub fn gen_synthetic(c: &Common) -> Result<()> {
    let (extras, overrides) = split_sets(&c.set, &["train", "test", "classes", "size", "seed"])?;
    if !overrides.is_empty() || c.config.is_some() {
        return Err(CliError::Usage("gen-synthetic takes only train, test, classes, size and seed".into()));
    }
    echo(None, &extras);
    let out = c.out.as_deref().ok_or_else(|| CliError::Usage("--out DIR is required".into()))?;
    let defaults = SyntheticConfig::default();
    let gen = SyntheticConfig {
        num_classes: parse_local(&extras, "classes", defaults.num_classes)?,
        size: parse_local(&extras, "size", defaults.size)?,
        seed: parse_local(&extras, "seed", defaults.seed)?,
    };
    let train = parse_local(&extras, "train", 2000)?;
    let test = parse_local(&extras, "test", 500)?;
    generate_synthetic(out, &gen, train, test)?;
    println!("wrote {train} train and {test} test images to {}", out.display());
    Ok(())
}
