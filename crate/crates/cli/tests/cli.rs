use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
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
    "train.epochs=1",
    "train.warmup_epochs=0",
    "eval.k=3",
    "eval.probe_epochs=20",
];

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path) {
    let o = sim(&["gen-synthetic", "--out", dir.to_str().unwrap(), "--set", "train=8", "test=4", "size=16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn geometry_csv_for_center_quarter_crop() {
    let o = sim(&["inspect-geometry", "--set", "crop_a=0,0,224,224", "crop_b=112,112,112,112", "grid=14"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let csv: Vec<&str> = text.lines().skip_while(|l| *l != "u,v,pos_h,pos_w").collect();
    assert_eq!(csv.len(), 1 + 14 * 14);
    assert_eq!(csv[1], "1,1,7,7");
    assert_eq!(csv[14 * 14], "14,14,13.5,13.5");
}

#[test]
fn bad_inputs_exit_nonzero_and_name_the_key() {
    let o = sim(&["pretrain", "--set", "no.such.key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no.such.key"));

    let o = sim(&["pretrain", "--set", "train.batch_size=zero"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.batch_size"));

    let o = sim(&["inspect-geometry", "--set", "crop_a=0,0,0,10", "crop_b=0,0,4,4"]);
    assert_eq!(o.status.code(), Some(2));

    let o = sim(&["eval-knn", "--checkpoint", "/definitely/missing.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pretrain_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data);
    let run = dir.path().join("run");
    let mut sets: Vec<String> = TINY.iter().map(|s| s.to_string()).collect();
    sets.push(format!("data.train={}", data.join("train").display()));
    sets.push(format!("data.test={}", data.join("test").display()));
    sets.push(format!("out.dir={}", run.display()));
    let mut args = vec!["pretrain", "--set"];
    args.extend(sets.iter().map(String::as_str));
    let o = sim(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("# config\n"));
    assert!(out.contains("model.backbone_dim = 16"));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 2);

    let ckpt = run.join("last.ckpt");
    for (cmd, metric) in [("eval-knn", "knn"), ("eval-linear", "linear")] {
        let res = dir.path().join(format!("{metric}.json"));
        let o = sim(&[cmd, "--checkpoint", ckpt.to_str().unwrap(), "--out", res.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&res).unwrap()).unwrap();
        assert_eq!(v["metric"], metric);
        let acc = v["value"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn grad_check_passes_on_the_small_default() {
    let o = sim(&["grad-check", "--set", "probes=8"]);
    assert!(o.status.success(), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().last(), Some("PASS"));
}
