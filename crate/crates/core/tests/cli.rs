use std::path::Path;
use std::process::{Command, Output};

fn flora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flora"))
        .args(args)
        .env("FLORA_LOG", "info")
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn ok(args: &[&str]) -> (String, String) {
    let out = flora(args);
    let (stdout, stderr) = (text(&out.stdout), text(&out.stderr));
    assert_eq!(out.status.code(), Some(0), "{args:?}\nstdout:\n{stdout}\nstderr:\n{stderr}");
    (stdout, stderr)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn paramcount_reproduces_reference_totals() {
    let (stdout, stderr) = ok(&["paramcount", "--arch", "mobilenet", "--head", "gap", "--classes", "16"]);
    assert!(stdout.contains("total parameters: 3,245,264"), "{stdout}");
    assert!(stdout.contains("non-trainable parameters: 21,888"));
    assert!(stdout.contains("layers: 86"));
    assert!(stderr.contains("paramcount configuration:"));
    assert!(stderr.contains("classes: 16"));

    let (stdout, _) = ok(&["paramcount", "--arch", "densenet121", "--head", "flatten", "--classes", "16"]);
    assert!(stdout.contains("total parameters: 7,840,336"), "{stdout}");

    let (stdout, _) = ok(&["paramcount", "--arch", "densenet121", "--freeze", "0.75"]);
    assert!(stdout.contains("non-trainable parameters: 4,981,056"), "{stdout}");
    assert!(stdout.contains("frozen layers: 320"));
}

#[test]
fn paramcount_documents_the_xception_input_size_discrepancy() {
    let (at_224, _) = ok(&["paramcount", "--arch", "xception", "--head", "flatten", "--input-size", "224"]);
    assert!(at_224.contains("total parameters: 22,467,128"), "{at_224}");
    assert!(at_224.contains("note:") && at_224.contains("24,138,296"));
    let (native, _) = ok(&["paramcount", "--arch", "xception", "--head", "flatten"]);
    assert!(native.contains("total parameters: 24,138,296"), "{native}");
    assert!(native.contains("[10, 10, 2048]"));
    assert!(native.contains("note:") && native.contains("22,467,128"));
    let (gap, _) = ok(&["paramcount", "--arch", "xception"]);
    assert!(gap.contains("total parameters: 20,894,264"));
    assert!(!gap.contains("note:"));
}

#[test]
fn usage_errors_exit_with_one() {
    let out = flora(&["train", "--optimizer", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    for name in ["sgd", "rmsprop", "adam", "adadelta", "adagrad", "adamax", "nadam"] {
        assert!(err.contains(name), "{err}");
    }
    for args in [
        vec!["frobnicate"],
        vec!["paramcount", "--arch", "mobilenet", "--unknown-flag"],
        vec!["paramcount", "--arch", "resnet"],
        vec!["paramcount", "--arch", "mobilenet", "--freeze", "1.5"],
        vec!["train", "--arch", "mini_mobilenet", "--data", "synth:4x8"],
        vec!["sweep", "--archs", "mini_densenet", "--optimizers", "sgd,bogus", "--data", "synth:3x2x32"],
    ] {
        assert_eq!(flora(&args).status.code(), Some(1), "{args:?}");
    }
    for verb in ["train", "sweep", "eval", "paramcount", "serve", "bench", "synth"] {
        let out = flora(&[verb, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        assert!(text(&out.stdout).contains("--"), "{verb}");
    }
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = flora(&["bench", "--ckpt", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("error:"));
}

#[test]
fn train_writes_a_checkpoint_and_eval_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let (stdout, stderr) = ok(&[
        "train", "--arch", "mini_mobilenet", "--data", "synth:4x8x32", "--optimizer", "sgd", "--epochs", "200", "--seed", "1",
        "--out", p(&ckpt),
    ]);
    assert!(ckpt.exists());
    assert!(stderr.contains("train configuration:") && stderr.contains("\"epochs\":200"), "{stderr}");
    assert!(stdout.contains("checkpoint written"));

    let dump = dir.path().join("wrong.txt");
    let report = dir.path().join("report.json");
    let (stdout, _) = ok(&[
        "eval", "--ckpt", p(&ckpt), "--data", "synth:4x8x32", "--dump-misclassified", p(&dump), "--report", p(&report),
    ]);
    assert!(stdout.contains("Precision") || stdout.contains("precision"), "{stdout}");
    let dumped = std::fs::read_to_string(&dump).unwrap();
    assert!(dumped.starts_with("sample\tactual\tpredicted\tconfidence"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["samples"], 32);
    assert_eq!(json["confusion"].as_array().unwrap().len(), 4);

    let (stdout, _) = ok(&["bench", "--ckpt", p(&ckpt), "--runs", "20", "--warmup", "2"]);
    assert!(stdout.contains("Avg. Execute Time (ms):"), "{stdout}");
}

#[test]
fn identical_train_runs_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for (i, threads) in ["1", "4"].iter().enumerate() {
        let out = dir.path().join(format!("run{i}.ckpt"));
        ok(&[
            "train", "--arch", "mini_xception", "--data", "synth:3x6x32", "--optimizer", "adam", "--epochs", "2",
            "--batch-size", "4", "--augment", "on", "--freeze", "0.25", "--seed", "7", "--threads", threads, "--out",
            p(&out),
        ]);
        bytes.push(std::fs::read(&out).unwrap());
    }
    assert!(bytes[0] == bytes[1], "checkpoints differ");
}

#[test]
fn sweep_writes_one_row_per_optimizer() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t6.csv");
    let (stdout, _) = ok(&[
        "sweep", "--archs", "mini_densenet", "--optimizers", "all", "--freezes", "0", "--data", "synth:3x4x32", "--epochs",
        "1", "--out-table", p(&table),
    ]);
    let csv = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 8, "{csv}");
    assert!(lines[0].starts_with("architecture,optimizer,freeze_ratio,head,status,accuracy"));
    for (line, name) in lines[1..].iter().zip(["sgd", "rmsprop", "adagrad", "adadelta", "adam", "nadam", "adamax"]) {
        assert!(line.starts_with(&format!("mini_densenet,{name},")), "{line}");
    }
    assert!(stdout.contains("table written"));
}

#[test]
fn synth_directories_feed_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("flowers");
    let (stdout, _) = ok(&["synth", "--classes", "3", "--per-class", "10", "--size", "24", "--out-dir", p(&data)]);
    assert!(stdout.contains("wrote 30 images"));
    let class_dirs: Vec<_> = std::fs::read_dir(&data).unwrap().collect();
    assert_eq!(class_dirs.len(), 3);
    let ckpt = dir.path().join("m.ckpt");
    let (stdout, stderr) = ok(&["train", "--arch", "mini_mobilenet", "--data", p(&data), "--epochs", "1", "--out", p(&ckpt)]);
    assert!(stderr.contains("train 24 / validation 3 / test 3"), "{stderr}");
    assert!(stdout.contains("held-out test (3 samples)"));
    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--subset", "test"]);
}

#[test]
fn log_level_follows_the_environment() {
    let quiet = Command::new(env!("CARGO_BIN_EXE_flora"))
        .args(["train", "--arch", "mini_mobilenet", "--data", "synth:2x2x16", "--epochs", "1", "--out"])
        .arg(tempfile::tempdir().unwrap().path().join("q.ckpt"))
        .env("FLORA_LOG", "error")
        .output()
        .unwrap();
    assert_eq!(quiet.status.code(), Some(0));
    let stderr = text(&quiet.stderr);
    assert!(stderr.contains("train configuration:"));
    assert!(!stderr.contains("INFO"), "{stderr}");
}
