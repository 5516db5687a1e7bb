mod common;

use std::fs;

use common::{path_str, synthetic_dataset, tiny_train_args, ynet};
use ynet_cli::error::exit;
use ynet_core::metrics::{compute_report, read_confusion_csv, read_history_csv, read_report_csv};

fn stdout(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    synthetic_dataset(&data, 8, 1);

    let o = ynet(&tiny_train_args(&data, &run, "30"));
    assert!(o.status.success(), "{}", stderr(&o));
    let history = read_history_csv(run.join("history.csv")).unwrap();
    assert_eq!(history.len(), 30);
    assert_eq!(history[0].lr, 1e-3);
    for name in ["best.ync", "final.ync", "resume.ynr", "report.csv", "confusion.csv", "split.csv"] {
        assert!(run.join(name).is_file(), "{name} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let hp = &manifest["hyperparameters"];
    assert_eq!(hp["optimizer"], "adam");
    assert_eq!(hp["scheduler_restart_period"], 50.0);
    assert_eq!(hp["scheduler_min_lr"], 1e-6);
    assert_eq!(hp["learning_rate"], 1e-3);
    assert_eq!(hp["batch_size"], 4);
    assert_eq!(hp["loss"], "categorical_crossentropy");
    assert_eq!(manifest["dataset"]["classes"][1]["train"], 4);
    assert_eq!(manifest["config"]["dropout"][0], 0.3);

    // eval twice gives identical files; the aggregate row matches the confusion csv
    let ckpt = run.join("final.ync");
    let eval_args = ["eval", "--data-root", path_str(&data), "--checkpoint", path_str(&ckpt), "--out-dir", path_str(&run)];
    let first = ynet(&eval_args);
    assert!(first.status.success(), "{}", stderr(&first));
    let report_a = fs::read(run.join("eval_test/report.csv")).unwrap();
    assert!(ynet(&eval_args).status.success());
    assert_eq!(report_a, fs::read(run.join("eval_test/report.csv")).unwrap());
    let cm = read_confusion_csv(run.join("eval_test/confusion.csv")).unwrap();
    let recomputed = compute_report(&cm).unwrap();
    let rows = read_report_csv(run.join("eval_test/report.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    let agg = rows.last().unwrap();
    assert_eq!(agg.class, "__macro__");
    assert_eq!(format!("{:.2}", recomputed.macro_f1), format!("{:.2}", agg.f1));
    assert_eq!(format!("{:.2}", recomputed.macro_precision), format!("{:.2}", agg.precision));
    for f in ["scores.csv", "embeddings.ytf", "embeddings.csv", "summary.json"] {
        assert!(run.join("eval_test").join(f).is_file());
    }
    let emb = ynet_core::io::load_tensor(run.join("eval_test/embeddings.ytf")).unwrap();
    assert_eq!(emb.shape(), &[12, 32]);

    let mut train_args = eval_args.to_vec();
    train_args.extend(["--split", "train"]);
    assert!(ynet(&train_args).status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("eval_train/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["split"], "train");

    // predict keeps input order and returns distributions
    let imgs = [data.join("gamma/000.ppm"), data.join("alpha/001.ppm"), data.join("beta/002.ppm")];
    let probs_csv = run.join("probs.csv");
    let o = ynet(&[
        "predict",
        "--checkpoint",
        path_str(&ckpt),
        "--probs-csv",
        path_str(&probs_csv),
        path_str(&imgs[0]),
        path_str(&imgs[1]),
        path_str(&imgs[2]),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(lines.len(), 3);
    for (line, img) in lines.iter().zip(&imgs) {
        assert!(line.starts_with(path_str(img)));
    }
    let text = fs::read_to_string(&probs_csv).unwrap();
    for row in text.lines().skip(1) {
        let total: f64 = row.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn memorized_training_image_is_predicted_correctly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    synthetic_dataset(&data, 8, 2);
    let mut args = tiny_train_args(&data, &run, "60");
    args.extend(["--set", "augment=false"]);
    assert!(ynet(&args).status.success());
    let split = fs::read_to_string(run.join("split.csv")).unwrap();
    let train_rows: Vec<(&str, &str)> = split
        .lines()
        .skip(1)
        .filter(|l| l.ends_with(",train"))
        .map(|l| {
            let mut parts = l.split(',');
            (parts.next().unwrap(), parts.next().unwrap())
        })
        .collect();
    for (rel, class) in train_rows {
        let o = ynet(&["predict", "--checkpoint", path_str(&run.join("final.ync")), path_str(&data.join(rel))]);
        let out = stdout(&o);
        let row = out.lines().nth(1).unwrap();
        assert_eq!(row.split(',').nth(1).unwrap(), class, "{rel}");
    }
}

#[test]
fn inspect_prints_reference_architecture() {
    let o = ynet(&["inspect"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("head: 1024→250→100→30"));
    let line = |name: &str| text.lines().find(|l| l.starts_with(name)).unwrap().to_string();
    let b1 = line("branch1.block1.conv ");
    assert!(b1.contains("3×3×3×64") && b1.contains("1792"), "{b1}");
    let b2 = line("branch2.block1.conv ");
    assert!(b2.contains("5×5×3×64") && b2.contains("4864"), "{b2}");
    assert!(line("fusam.attention").contains("1 x 112 x 112 x 1"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synthetic_dataset(&data, 2, 3);

    let o = ynet(&["train", "--set", "epochs=zero"]);
    assert_eq!(o.status.code(), Some(exit::CONFIG));
    let o = ynet(&["train", "--data-root", path_str(&dir.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(exit::DATA));
    let o = ynet(&["train", "--tiny", "--data-root", path_str(&data), "--set", "num_classes=4"]);
    assert_eq!(o.status.code(), Some(exit::CONFIG));

    // a checkpoint for three classes cannot score a two-class dataset
    let run = dir.path().join("run");
    assert!(ynet(&tiny_train_args(&data, &run, "1")).status.success());
    let two = dir.path().join("two");
    fs::create_dir_all(&two).unwrap();
    for c in ["alpha", "beta"] {
        fs::rename(data.join(c), two.join(c)).unwrap();
    }
    let o = ynet(&["eval", "--data-root", path_str(&two), "--checkpoint", path_str(&run.join("final.ync"))]);
    assert_eq!(o.status.code(), Some(exit::ARCHITECTURE), "{}", stderr(&o));

    // an undecodable image is a data error naming the file
    fs::write(two.join("alpha/bad.ppm"), b"P6\n4 4\n255\n").unwrap();
    let r2 = dir.path().join("r2");
    let o = ynet(&tiny_train_args(&two, &r2, "1"));
    assert_eq!(o.status.code(), Some(exit::DATA));
    assert!(stderr(&o).contains("bad.ppm"));
}

#[test]
fn diverging_run_names_the_offending_samples() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synthetic_dataset(&data, 2, 4);
    let run = dir.path().join("run");
    let mut args = tiny_train_args(&data, &run, "5");
    args.extend(["--lr", "1e300"]);
    let o = ynet(&args);
    assert_eq!(o.status.code(), Some(exit::NUMERIC), "{}", stderr(&o));
    assert!(stderr(&o).contains("samples:"), "{}", stderr(&o));
    assert!(stderr(&o).contains(".ppm"));
}

#[test]
fn repeat_writes_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    synthetic_dataset(&data, 2, 5);
    let mut args = tiny_train_args(&data, &run, "2");
    args.extend(["--repeat", "2"]);
    let o = ynet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("repeat_0/history.csv").is_file());
    assert!(run.join("repeat_1/history.csv").is_file());
    let summary = fs::read_to_string(run.join("repeats.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().nth(2).unwrap().starts_with("1,6,"));
}

#[test]
fn bypass_flag_is_recorded_in_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    synthetic_dataset(&data, 2, 6);
    let mut args = tiny_train_args(&data, &run, "1");
    args.push("--fusam-bypass");
    assert!(ynet(&args).status.success());
    let o = ynet(&["inspect", "--checkpoint", path_str(&run.join("final.ync"))]);
    assert!(stdout(&o).contains("attention constant 1"));
}
