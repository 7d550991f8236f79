use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mucm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mucm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn audit_writes_csv_and_passes_strict_bands() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("report.csv");
    let o = mucm(&[
        "audit",
        "--variants",
        "1,2,4,8",
        "--input-size",
        "256",
        "--out",
        p(&csv),
        "--strict",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("variant,params"));
    assert_eq!(text.lines().count(), 5);
    assert!(stdout(&o).contains("strict=true"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(mucm(&["train"]).status.code(), Some(2));
    assert_eq!(mucm(&["audit", "--variants", "three"]).status.code(), Some(2));
    assert_eq!(mucm(&["gradcheck", "--dtype", "f32"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        mucm(&["synth", "--n", "0", "--out", p(dir.path())]).status.code(),
        Some(2)
    );
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = mucm(&["eval", "--checkpoint", p(&missing), "--data", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_sets_flags_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    let out = dir.path().join("data");
    fs::write(
        &cfg,
        format!("# synthetic set\nn = 3\nsize=32\nseed=4\nout={}\n", p(&out)),
    )
    .unwrap();
    let o = mucm(&["--config", p(&cfg), "synth", "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(
        text.contains("n=3") && text.contains("size=32") && text.contains("seed=9"),
        "{text}"
    );
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 3);
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let preds = dir.path().join("preds");
    assert_eq!(
        mucm(&["synth", "--n", "3", "--size", "32", "--seed", "2", "--out", p(&data)])
            .status
            .code(),
        Some(0)
    );

    let o = mucm(&[
        "train",
        "--variant",
        "2",
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--steps",
        "2",
        "--batch-size",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(
        text.contains("input_size=32") && text.contains("t_max=none") && text.contains("augment=false"),
        "{text}"
    );
    assert!(text.contains("final_train_dsc="));
    for f in ["config.txt", "history.csv", "best.ckpt", "last.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let ckpt = run.join("last.ckpt");
    let o = mucm(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&preds),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let masks = fs::read_dir(&preds)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(masks, 3);
    assert!(preds.join("metrics.txt").exists());

    let o = mucm(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "train"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let first = stdout(&o);
    let again = stdout(&mucm(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--split",
        "train",
    ]));
    assert_eq!(first, again);
}
