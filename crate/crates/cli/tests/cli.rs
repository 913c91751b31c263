use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
name = "toy"

[dataset.toy]
num_classes = 10
per_class = 4
channels = 1
side = 8

[distill]
n_epochs = 1
q_epochs = 1
batch_size = 10
noise_dim = 4
generator_width = 10
discriminator_width = 4

[distill.pool]
entries = ["convnet3"]
width = 4

[deploy]
inpc = 2
epochs = 1
batch_size = 20
width = 4
eval_every = 0

[experiment]
seeds = [0]
"#;

fn dim(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dim"))
        .args(args)
        .current_dir(dir)
        .env_remove("DIM_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    tmp
}

fn only_subdir(root: &Path, prefix: &str) -> PathBuf {
    let mut found: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(found.len(), 1, "{found:?}");
    found.pop().unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn distill_deploy_report_and_plot() {
    let tmp = setup();
    let p = tmp.path();
    assert!(dim(&["distill", "--config", "tiny.toml", "--out", "runs"], p).status.success());
    let run = only_subdir(&p.join("runs"), "distill-");
    let seed = run.join("seed0");
    for f in ["checkpoint/manifest.json", "checkpoint/generator.bin", "loss.jsonl", "montage.png"] {
        assert!(seed.join(f).exists(), "missing {f}");
    }
    let (w, h) = image::image_dimensions(seed.join("montage.png")).unwrap();
    assert_eq!((w, h), (10 * 9 + 1, 10 * 9 + 1));
    assert_eq!(csv_rows(&run.join("results.csv")).len(), 1);

    let ck = seed.join("checkpoint");
    let ck = ck.to_str().unwrap();
    let out = dim(&["deploy", "--config", "tiny.toml", "--out", "runs", "--checkpoint", ck], p);
    assert!(out.status.success());
    let dep = only_subdir(&p.join("runs"), "deploy-");
    let rows = csv_rows(&dep.join("results.csv"));
    assert_eq!(rows.len(), 1);
    let header = csv::Reader::from_path(dep.join("results.csv")).unwrap().headers().unwrap().clone();
    let acc_col = header.iter().position(|h| h == "accuracy").unwrap();
    let acc: f64 = rows[0][acc_col].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    std::fs::remove_file(dep.join("report.md")).unwrap();
    assert!(dim(&["report", "--results", dep.to_str().unwrap()], p).status.success());
    assert!(std::fs::read_to_string(dep.join("report.md")).unwrap().contains("Accuracy"));

    let loss = seed.join("loss.jsonl");
    let svg = p.join("grid.svg");
    let out = dim(&["plot", "--kind", "training_grid", "--input", loss.to_str().unwrap(), "--output", "grid.svg"], p);
    assert!(out.status.success());
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));

    let out = dim(&["plot", "--checkpoint", ck, "--output", "m.png", "--per-class", "3"], p);
    assert!(out.status.success());
    assert_eq!(image::image_dimensions(p.join("m.png")).unwrap(), (3 * 9 + 1, 10 * 9 + 1));
}

#[test]
fn ablate_writes_one_row_per_value() {
    let tmp = setup();
    let p = tmp.path();
    let out = dim(
        &["ablate", "--config", "tiny.toml", "--out", "runs", "--axis", "lambda", "--values", "0,0.01,0.1,1"],
        p,
    );
    assert!(out.status.success());
    let run = only_subdir(&p.join("runs"), "ablate-");
    let rows = csv_rows(&run.join("results.csv"));
    assert_eq!(rows.len(), 4);
    let mut values: Vec<&str> = rows.iter().map(|r| &r[3]).collect();
    values.sort();
    assert_eq!(values, ["0", "0.01", "0.1", "1"]);
    let report = std::fs::read_to_string(run.join("report.md")).unwrap();
    assert_eq!(report.lines().filter(|l| l.starts_with("| toy")).count(), 4);

    let svg = run.join("lambda.svg");
    let csv = run.join("results.csv");
    let out = dim(&["plot", "--kind", "lambda_curve", "--input", csv.to_str().unwrap(), "--output", svg.to_str().unwrap()], p);
    assert!(out.status.success());
    assert!(svg.exists());

    let again = dim(
        &["ablate", "--config", "tiny.toml", "--out", "runs", "--axis", "lambda", "--values", "0,0.01,0.1,1"],
        p,
    );
    assert!(again.status.success());
    assert_eq!(csv_rows(&run.join("results.csv")).len(), 4);
}

#[test]
fn plotting_an_empty_table_fails() {
    let tmp = setup();
    let p = tmp.path();
    std::fs::write(p.join("empty.csv"), "lambda,accuracy\n").unwrap();
    let out = dim(&["plot", "--kind", "lambda_curve", "--input", "empty.csv", "--output", "x.svg"], p);
    assert!(!out.status.success());
    assert!(!p.join("x.svg").exists());
}

#[test]
fn exit_codes_separate_config_from_runtime_errors() {
    let tmp = setup();
    let p = tmp.path();
    std::fs::write(p.join("bad.toml"), "[distill]\nlamda = 0.1\n").unwrap();
    let out = dim(&["distill", "--config", "bad.toml", "--out", "runs"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));

    let out = dim(&["distill", "--config", "tiny.toml", "--lambda=-1", "--out", "runs"], p);
    assert_eq!(out.status.code(), Some(2));

    let out = dim(&["deploy", "--config", "tiny.toml", "--out", "runs", "--checkpoint", "missing"], p);
    assert_eq!(out.status.code(), Some(3));
}
