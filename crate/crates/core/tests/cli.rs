use std::path::Path;
use std::process::{Command, Output};

fn gmcml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmcml"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn single_line_error(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

fn render(dir: &Path, seed: &str, classes: &str) -> Output {
    gmcml(&[
        "render",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        seed,
        "--classes",
        classes,
        "--per-class",
        "6",
        "--test-per-class",
        "3",
        "--res",
        "16",
        "--subdivision",
        "1",
    ])
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn render_is_deterministic_and_covers_both_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&render(&a, "7", "3"));
    ok(&render(&b, "7", "3"));
    let meta = std::fs::read(a.join("meta.jsonl")).unwrap();
    assert_eq!(meta, std::fs::read(b.join("meta.jsonl")).unwrap());
    let text = String::from_utf8(meta).unwrap();
    assert!(text.contains("\"centered\"") && text.contains("\"shifted\""));
    assert_eq!(text.lines().count(), 3 * 2 * (6 + 3));
    assert_eq!(
        std::fs::read(a.join("000005_o.png")).unwrap(),
        std::fs::read(b.join("000005_o.png")).unwrap()
    );
}

#[test]
fn usage_errors_exit_nonzero_on_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = render(&tmp.path().join("x"), "0", "13");
    let err = single_line_error(&out);
    assert_eq!(out.status.code(), Some(1));
    assert!(err.contains("palette"), "{err}");

    let out = gmcml(&["render", "--out", "x", "--res", "abc"]);
    single_line_error(&out);
    assert_eq!(out.status.code(), Some(2));

    let out = gmcml(&[
        "eval",
        "--checkpoint",
        "/nonexistent/ckpt.bin",
        "--dataset",
        "/nonexistent",
        "--out",
        "x",
    ]);
    single_line_error(&out);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_resume_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&render(&data, "3", "3"));
    let d = data.to_str().unwrap();
    let r = run.to_str().unwrap();
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--dataset", d, "--out", r, "--batch", "8", "--seed", "5"];
        args.extend_from_slice(extra);
        gmcml(&args)
    };
    ok(&train(&["--epochs", "1", "--finetune-epochs", "1"]));
    let metrics = run.join("metrics.csv");
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.exists());
    let rows = csv_rows(&metrics);
    assert_eq!(
        rows[0].join(","),
        "step,stage,loss_total,loss_enc,loss_gen,loss_pair,loss_tri,loss_softmax,var_ratio,r_rec,r_cls"
    );
    let first_run = rows.len() - 1;
    assert!(first_run >= 1);

    ok(&train(&["--resume", ckpt.to_str().unwrap(), "--finetune-epochs", "3"]));
    let rows = csv_rows(&metrics);
    assert!(rows.len() - 1 > first_run);
    for (i, row) in rows[1..].iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
    }

    let eval_dir = tmp.path().join("eval");
    let e = eval_dir.to_str().unwrap();
    let c = ckpt.to_str().unwrap();
    ok(&gmcml(&["eval", "--checkpoint", c, "--dataset", d, "--out", e]));
    ok(&gmcml(&["eval", "--checkpoint", c, "--dataset", d, "--out", e]));
    for f in ["report.csv", "proj2d.csv", "recon_grid.png", "manifold_grid.png"] {
        assert!(eval_dir.join(f).exists(), "{f}");
    }
    let report = csv_rows(&eval_dir.join("report.csv"));
    assert_eq!(report.len(), 3);
    assert_eq!(report[1][0], "1");
    assert_eq!(report[2][0], "2");
    let test_count: usize = report[1][5].parse().unwrap();
    assert_eq!(test_count, 3 * 2 * 3);
    let proj = csv_rows(&eval_dir.join("proj2d.csv"));
    assert_eq!(proj[0].join(","), "x,y,category");
    assert_eq!(proj.len() - 1, test_count);
}

#[test]
fn fixed_noise_logs_constant_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&render(&data, "4", "2"));
    ok(&gmcml(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--batch",
        "8",
        "--epochs",
        "2",
        "--finetune-epochs",
        "1",
        "--fixed-noise",
    ]));
    let rows = csv_rows(&run.join("metrics.csv"));
    assert!(rows.len() > 3);
    let ratios: Vec<(&str, &str)> = rows[1..].iter().map(|r| (r[9].as_str(), r[10].as_str())).collect();
    assert!(ratios.iter().all(|r| *r == ratios[0]));
}

#[test]
fn eval_rejects_mismatched_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let other = tmp.path().join("other");
    let run = tmp.path().join("run");
    ok(&render(&data, "1", "2"));
    ok(&gmcml(&[
        "render",
        "--out",
        other.to_str().unwrap(),
        "--classes",
        "2",
        "--per-class",
        "4",
        "--test-per-class",
        "2",
        "--res",
        "24",
        "--subdivision",
        "1",
    ]));
    ok(&gmcml(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--batch",
        "8",
        "--epochs",
        "1",
        "--finetune-epochs",
        "0",
    ]));
    let out = gmcml(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--dataset",
        other.to_str().unwrap(),
        "--out",
        tmp.path().join("e").to_str().unwrap(),
    ]);
    let err = single_line_error(&out);
    assert!(err.contains("16") && err.contains("24"), "{err}");
}
