//! The `shapeclust` binary end to end on a small synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shapeclust::data::{load_dataset, save_dataset, Format};
use shapeclust::distance::{dist, TransformedDataset};
use shapeclust::losses::loss_log_from_csv;
use shapeclust::nn::model::Autoencoder;
use shapeclust::pipeline::Metrics;
use shapeclust::shapelet::load_shapelets;
use shapeclust::synthetic::{motif_dataset, MotifConfig};
use shapeclust_cli::{parse_assignments, Evaluation};

fn write_dataset(dir: &Path) -> PathBuf {
    let ds = motif_dataset(&MotifConfig {
        instances: 16,
        series_len: 48,
        motif_len: 12,
        ..Default::default()
    })
    .unwrap();
    let path = dir.join("toy.tsv");
    save_dataset(&ds, &path, Format::UcrTsv).unwrap();
    path
}

fn shapeclust(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapeclust"))
        .args(args)
        .env("SHAPECLUST_THREADS", "2")
        .output()
        .unwrap()
}

fn quick_train(data: &Path, out: &Path, k: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "2",
        "--batches-per-epoch",
        "2",
        "--k",
        k,
    ];
    args.extend_from_slice(extra);
    shapeclust(&args)
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn train_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let out = dir.path().join("run");
    let o = quick_train(&data, &out, "2", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let printed: Vec<&str> = std::str::from_utf8(&o.stdout).unwrap().lines().collect();
    for f in &printed {
        assert!(Path::new(f).exists(), "{f}");
    }
    let shapelets = load_shapelets(out.join("shapelets.json")).unwrap();
    assert_eq!(shapelets.len(), 2);
    Autoencoder::load(out.join("model.json")).unwrap();
    let log = loss_log_from_csv(&read(out.join("loss_log.csv")), "loss_log.csv").unwrap();
    assert_eq!(log.len(), 2);
    let metrics = Metrics::from_json(&read(out.join("metrics.json")), "metrics.json").unwrap();
    assert!(metrics.nmi.is_some() && metrics.ri.is_some());
    let labels = parse_assignments(&read(out.join("assignments.csv")), "assignments.csv").unwrap();
    assert_eq!(labels.len(), 16);
    let t = TransformedDataset::from_csv(&read(out.join("transformed.csv")), "transformed.csv").unwrap();
    assert_eq!((t.rows(), t.cols()), (16, 2));
    for name in ["shapelet_series.csv", "overlay.csv", "class_profiles.csv", "scatter.csv"] {
        let text = read(out.join(name));
        let widths: Vec<usize> = text.lines().map(|l| l.split(',').count()).collect();
        assert!(widths.len() > 1 && widths.iter().all(|&w| w == widths[0]), "{name}");
    }
    let config: serde_json::Value = serde_json::from_str(&read(out.join("run_config.json"))).unwrap();
    assert_eq!(config["train"]["k"], 2);

    let eval_out = dir.path().join("eval");
    let o = shapeclust(&[
        "--mode",
        "evaluate",
        "--dataset",
        data.to_str().unwrap(),
        "--assignments",
        out.join("assignments.csv").to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval: Evaluation = serde_json::from_str(&read(eval_out.join("evaluation.json"))).unwrap();
    assert_eq!(Some(eval.nmi), metrics.nmi);
    assert_eq!(Some(eval.ri), metrics.ri);
}

#[test]
fn no_dbi_zeroes_its_column() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let out = dir.path().join("run");
    let o = quick_train(&data, &out, "2", &["--no-dbi"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(out.join("loss_log.csv"));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "L_dbi").unwrap();
    for line in lines {
        assert_eq!(line.split(',').nth(col).unwrap().parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn transform_mode_matches_distance_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let out = dir.path().join("run");
    assert!(quick_train(&data, &out, "5", &[]).status.success());
    let dump = out.join("shapelets.json");
    let t_out = dir.path().join("t");
    let o = shapeclust(&[
        "--mode",
        "transform",
        "--dataset",
        data.to_str().unwrap(),
        "--shapelets",
        dump.to_str().unwrap(),
        "--out",
        t_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = TransformedDataset::from_csv(&read(t_out.join("transformed.csv")), "transformed.csv").unwrap();
    let shapelets = load_shapelets(&dump).unwrap();
    let ds = load_dataset(&data, Format::UcrTsv).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5 {
        let (m, j) = (rng.random_range(0..ds.len()), rng.random_range(0..shapelets.len()));
        let s = &shapelets[j];
        let want = dist(&s.values, ds.instance(m).channel(s.variable)).unwrap();
        assert!((t.get(m, j) - want).abs() < 1e-12, "entry ({m}, {j})");
    }
}

#[test]
fn sweep_writes_one_row_per_shapelet_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let out = dir.path().join("sweep");
    let o = shapeclust(&[
        "--mode",
        "sweep",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "1",
        "--batches-per-epoch",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(out.join("sweep.csv"));
    let ks: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["1", "2", "5", "10", "20"]);
    for k in [1, 2, 5, 10, 20] {
        assert_eq!(load_shapelets(out.join(format!("k{k}/shapelets.json"))).unwrap().len(), k);
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let conf = dir.path().join("run.conf");
    fs::write(&conf, format!("dataset = {}\nk = 3\nepochs = 1\nseed = 9\n", data.display())).unwrap();
    let out = dir.path().join("run");
    let o = shapeclust(&[
        "--config",
        conf.to_str().unwrap(),
        "--k",
        "1",
        "--batches-per-epoch",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let config: serde_json::Value = serde_json::from_str(&read(out.join("run_config.json"))).unwrap();
    assert_eq!(config["train"]["k"], 1);
    assert_eq!(config["train"]["epochs"], 1);
    assert_eq!(config["train"]["seed"], 9);
}

fn single_error_line(o: &Output) -> String {
    assert!(!o.status.success());
    let stderr = String::from_utf8(o.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    lines[0].to_string()
}

#[test]
fn failures_exit_nonzero_with_one_coded_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = shapeclust(&["--dataset", "missing.tsv", "--out", out.to_str().unwrap()]);
    assert!(single_error_line(&o).starts_with("error[E_IO]: "));

    let data = write_dataset(dir.path());
    let o = shapeclust(&["--mode", "transform", "--dataset", data.to_str().unwrap()]);
    assert!(single_error_line(&o).starts_with("error[E_CONFIG]: "));

    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, "0\t1.0\t2.0\n1\t3.0\n").unwrap();
    let o = shapeclust(&["--dataset", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let line = single_error_line(&o);
    assert!(line.starts_with("error[E_PARSE]: ") && line.contains("bad.tsv:2:"), "{line}");

    let o = shapeclust(&["--dataset", data.to_str().unwrap(), "--k", "0", "--out", out.to_str().unwrap()]);
    assert!(single_error_line(&o).starts_with("error[E_CONFIG]: "));
}
