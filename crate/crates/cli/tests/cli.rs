use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use minformer::encoder::{count_params, ModelConfig};
use minformer::train::{q_ratio, read_rows};
use minformer_cli::sweep::read_table_csv;

const TINY: &str = "\
data.dataset = synthetic
data.per_class = 8
model.image_height = 8
model.image_width = 8
model.patch = 4
model.width = 8
model.encoders = 1
model.classes = 2
model.mlp_multiple = 2
train.epochs = 2
train.batch_size = 8
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_minformer"));
    c.env_remove("MINFORMER_DATA_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn repo_file(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel).display().to_string()
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let out = dir.path().join("run");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--set", "heads=1", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["report.csv", "summary.txt", "checkpoint.minf", "config.cfg"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let rows = read_rows(std::fs::File::open(out.join("report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("params (P)") && summary.contains("Q = K*M/P"));
    let (cfg_back, _) = minformer::encoder::load_checkpoint::<f64>(&out.join("checkpoint.minf")).unwrap();
    assert_eq!(cfg_back.width, 8);
}

#[test]
fn deterministic_reruns_give_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let mut csvs = Vec::new();
    for run_name in ["a", "b"] {
        let out = dir.path().join(run_name);
        let o = run(&[
            "train", "--config", cfg.to_str().unwrap(), "--deterministic", "--seed", "7", "--quiet",
            "--out-dir", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        csvs.push(std::fs::read(out.join("report.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn single_precision_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let out = dir.path().join("f32");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--precision", "f32", "-q", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(out.join("summary.txt")).unwrap().contains("f32"));
}

#[test]
fn missing_dataset_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = run(&[
        "train", "--config", &repo_file("configs/mnist_baseline.cfg"), "--data-dir", missing.to_str().unwrap(),
        "--out-dir", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn data_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("env-dir");
    let o = bin()
        .args(["train", "--config", &repo_file("configs/mnist_baseline.cfg"), "--out-dir"])
        .arg(dir.path().join("o"))
        .env("MINFORMER_DATA_DIR", &missing)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("env-dir"));
}

#[test]
fn invalid_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    for bad in [["--set", "model.hedas=2"], ["--set", "heads=3"], ["--set", "train.epochs=0"]] {
        let o = run(&["train", "--config", cfg.to_str().unwrap(), bad[0], bad[1]]);
        assert_eq!(o.status.code(), Some(2), "{bad:?}: {}", stderr(&o));
    }
    let o = run(&["train", "--precision", "f16"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_is_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let o = run(&[
        "train", "--config", cfg.to_str().unwrap(), "--set", "train.lr=1e300", "--set", "train.epochs=5", "-q",
        "--out-dir", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"));
}

fn count_lines(out: &str) -> std::collections::HashMap<String, String> {
    out.lines()
        .filter_map(|l| {
            let (k, v) = l.split_once("  ")?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

#[test]
fn count_breakdown_is_consistent() {
    let o = run(&["count", "--config", &repo_file("configs/mnist_baseline.cfg")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let kv = count_lines(&text);
    let get = |k: &str| kv[k].parse::<usize>().unwrap();
    let parts = ["patch_embedding", "positional", "class_token", "attention", "mlp", "layer_norms", "classifier"];
    let total = get("total");
    assert_eq!(parts.iter().map(|k| get(k)).sum::<usize>(), total);
    assert_eq!(total, count_params(&ModelConfig::mnist()).unwrap().total);
    let q: f64 = kv["Q = K*M/P"].parse().unwrap();
    assert!((q - q_ratio(60_000, 10, total).unwrap()).abs() < 5e-5);

    let o = run(&["count", "--config", &repo_file("configs/mnist_baseline.cfg"), "--set", "mlp=false", "--examples", "8000"]);
    let kv = count_lines(&stdout(&o));
    assert!(kv["examples (K)"].starts_with("8000"));
    assert_eq!(kv["mlp"], "0");
}

#[test]
fn verify_passes_and_reproduces() {
    let args = ["verify", "--seed", "123", "--cases", "10", "--count-cases", "20"];
    let a = run(&args);
    assert!(a.status.success(), "{}{}", stdout(&a), stderr(&a));
    let text = stdout(&a);
    assert!(text.contains("all 7 properties passed"));
    assert!(text.contains("gradient_check"));
    assert_eq!(stdout(&run(&args)), text);
}

#[test]
fn verify_detects_injected_fault() {
    let o = run(&["verify", "--cases", "2", "--count-cases", "2", "--inject-fault", "1.01"]);
    assert_eq!(o.status.code(), Some(5));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("FAIL") && l.contains("gradient_check")), "{text}");
    assert!(text.contains("seed"));
}

#[test]
fn sweep_keeps_order_and_marks_failures() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = format!(
        "{TINY}\n[1H/MLP/unchanged]\n\n[2H/NoMLP/symmetry]\nmodel.heads = 2\nmodel.mlp = false\nmodel.qk_mode = shared\n\n\
         [diverges]\ntrain.lr = 1e300\ntrain.epochs = 4\n\n\
         [1H/NoMLP/Wqk+noWv.Vo]\nmodel.mlp = false\nmodel.qk_mode = collapsed\nmodel.vo_mode = identity\n"
    );
    let path = write(dir.path(), "s.sweep", &sweep);
    let out = dir.path().join("sweep");
    let o = run(&["sweep", "--sweep", path.to_str().unwrap(), "-q", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_table_csv(std::fs::File::open(out.join("table.csv")).unwrap()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["1H/MLP/unchanged", "2H/NoMLP/symmetry", "diverges", "1H/NoMLP/Wqk+noWv.Vo"]);
    assert!(rows[2].outcome.is_err());
    assert!(rows[0].outcome.is_ok() && rows[3].outcome.is_ok());
    assert_eq!(rows[1].heads, 2);
    assert_eq!(rows[3].modification, "Wqk+noWv.Vo");
    // Q = K·M/P with a common K: ordering of Q reverses ordering of P
    for a in &rows {
        for b in &rows {
            if a.params > b.params {
                assert!(a.q < b.q);
            }
        }
    }
    let table = std::fs::read_to_string(out.join("table.txt")).unwrap();
    assert_eq!(table, stdout(&o));
    assert!(out.join("01-1H_MLP_unchanged/report.csv").exists());
}

#[test]
fn empty_sweep_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "empty.sweep", TINY);
    let o = run(&["sweep", "--sweep", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no variants"));
}

#[test]
fn shipped_configs_parse() {
    for cfg in ["configs/mnist_nomlp.cfg", "configs/mnist_baseline.cfg", "configs/cifar10_baseline.cfg"] {
        let o = run(&["count", "--config", &repo_file(cfg)]);
        assert!(o.status.success(), "{cfg}: {}", stderr(&o));
    }
    let text = std::fs::read_to_string(repo_file("configs/mnist_variants.sweep")).unwrap();
    let spec = minformer_cli::sweep::SweepSpec::parse(&text).unwrap();
    assert_eq!(spec.variants.len(), 10);
    let mut params = Vec::new();
    for v in &spec.variants {
        let s = minformer_cli::settings::Settings::from_kv(&spec.variant_kv(v)).unwrap();
        assert_eq!(s.model.variant_label(), v.name);
        params.push(count_params(&s.model).unwrap().total);
    }
    assert!(params[0] > params[4] && params[4] > params[9]);
}
