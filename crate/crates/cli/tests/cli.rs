//! Drives the `sbnn` binary through every subcommand.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sbnn(args: &[&str], out_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sbnn"));
    cmd.args(args).env_remove("SBNN_OUT_DIR");
    if let Some(d) = out_dir {
        cmd.env("SBNN_OUT_DIR", d);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.conf");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

const SMALL_RUN: &str = "\
arch = dense:8, dense:2
dataset = blobs:seed=7,n=400,classes=2,dims=2x1x1,spread=0.15
epochs = 5
batch_size = 32
lr = 0.01
input_encoding = int8
checkpoint_epochs = 1, 3
";

#[test]
fn train_export_infer_hist() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), &format!("{SMALL_RUN}output_dir = {}\n", run.display()));

    let o = sbnn(&["train", "--config", &cfg], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("frozen_val_acc="));
    assert!(run.join("metrics.csv").is_file());

    let model = dir.path().join("m.sbnn");
    let ck = run.join("checkpoint.json");
    let o = sbnn(
        &[
            "export",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--out",
            model.to_str().unwrap(),
        ],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let preds = dir.path().join("p.csv");
    let o = sbnn(
        &[
            "infer",
            "--model",
            model.to_str().unwrap(),
            "--data",
            "blobs:seed=7,n=400,classes=2,dims=2x1x1,spread=0.15",
            "--val-fraction",
            "0.2",
            "--out",
            preds.to_str().unwrap(),
        ],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&preds).unwrap();
    assert_eq!(csv.lines().count(), 1 + 80);

    let hist = dir.path().join("h.csv");
    let c1 = run.join("checkpoint_epoch0001.json");
    let c3 = run.join("checkpoint_epoch0003.json");
    let o = sbnn(
        &[
            "hist",
            "--checkpoints",
            c1.to_str().unwrap(),
            c3.to_str().unwrap(),
            "--bins",
            "10",
            "--out",
            hist.to_str().unwrap(),
        ],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    // header + 2 checkpoints x 2 layers x 10 bins
    assert_eq!(fs::read_to_string(&hist).unwrap().lines().count(), 1 + 40);
}

#[test]
fn out_dir_environment_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let configured = dir.path().join("configured");
    let overridden = dir.path().join("overridden");
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL_RUN}output_dir = {}\n", configured.display()),
    );
    let o = sbnn(&["train", "--config", &cfg], Some(&overridden));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(overridden.join("checkpoint.json").is_file());
    assert!(!configured.exists());
}

#[test]
fn bench_writes_csv_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = sbnn(&["bench", "--dims", "4x16x16", "--batches", "1,2"], Some(dir.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("variant,"));
    // three variants at two batch sizes
    assert_eq!(lines.count(), 6);
    let plot: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("bench_plot.json")).unwrap()).unwrap();
    assert!(plot.is_object());
}

fn assert_error(o: &Output, category: &str) {
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(o);
    let line = err.lines().last().unwrap_or("");
    assert!(line.starts_with(&format!("error[{category}]: ")), "stderr: {err}");
}

#[test]
fn errors_print_one_categorised_line() {
    let dir = tempfile::tempdir().unwrap();

    let missing = dir.path().join("nope.conf");
    assert_error(
        &sbnn(&["train", "--config", missing.to_str().unwrap()], None),
        "io_error",
    );

    let bad = write_config(dir.path(), "epochs = many\n");
    assert_error(&sbnn(&["train", "--config", &bad], None), "config_error");

    let junk = dir.path().join("junk.sbnn");
    fs::write(&junk, b"not a model at all").unwrap();
    let o = sbnn(
        &[
            "infer",
            "--model",
            junk.to_str().unwrap(),
            "--data",
            "blobs:n=10",
            "--out",
            "/dev/null",
        ],
        None,
    );
    assert_error(&o, "format_error");

    assert_error(&sbnn(&["bench", "--trials", "3"], Some(dir.path())), "config_error");
}
