//! End-to-end runs of the `lcnet` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
seed = 3
data.n_curves = 48
net.stem = 2
net.pre = 8,8,8,8,8
net.color = 8
net.post = 8,8,8,8
net.hidden = 8
train.iterations = 12
train.batch_size = 8
train.head_iterations = 12
";

fn lcnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcnet"))
        .current_dir(dir)
        .args([
            "--config",
            "tiny.cfg",
            "--out",
            "out",
            "--data",
            "out/data.jsonl",
        ])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join("out").join(name)).unwrap()
}

#[test]
fn gen_train_predict_eval_pipeline_is_reproducible() {
    let dir = setup();
    let d = dir.path();
    let report = ok(lcnet(d, &["gen"]));
    assert!(
        report.starts_with("# lcnet gen\n# resolved configuration\n"),
        "{report}"
    );
    assert!(report.contains("balance (Ia/notIa): 24/24"));
    assert!(report.contains("net.pre=8,8,8,8,8"));
    let data = read(d, "data.jsonl");
    ok(lcnet(d, &["gen"]));
    assert_eq!(read(d, "data.jsonl"), data);

    let report = ok(lcnet(d, &["train", "--mode", "cnn"]));
    assert!(report.contains("trace.csv: 12 steps"), "{report}");
    let ckpt = read(d, "model.ckpt");
    let trace = read(d, "trace.csv");
    assert!(String::from_utf8_lossy(&trace).starts_with("step,lr,loss,n_useful,n_useful_prime\n"));
    ok(lcnet(d, &["train", "--mode", "cnn"]));
    assert_eq!(read(d, "model.ckpt"), ckpt);
    assert_eq!(read(d, "trace.csv"), trace);

    ok(lcnet(d, &["predict"]));
    let preds = read(d, "predictions.csv");
    ok(lcnet(d, &["predict"]));
    assert_eq!(read(d, "predictions.csv"), preds);
    let text = String::from_utf8(preds).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,score_Ia,predicted_label"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 48);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        let s: f64 = f[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert_eq!(f[2], if s >= 0.5 { "Ia" } else { "notIa" });
    }

    let report = ok(lcnet(d, &["eval", "--k", "2"]));
    assert_eq!(report.lines().filter(|l| l.starts_with("fold ")).count(), 2);
    assert!(report.contains("fold 0: train 24 test 24"));
    assert!(report
        .lines()
        .any(|l| l.starts_with("AUC ") && l.contains(" ± ")));
    let eval_report = read(d, "eval_report.txt");
    let roc = read(d, "roc_fold1.csv");
    ok(lcnet(d, &["eval", "--k", "2"]));
    assert_eq!(read(d, "eval_report.txt"), eval_report);
    assert_eq!(read(d, "roc_fold1.csv"), roc);
    let roc = String::from_utf8(roc).unwrap();
    let pts: Vec<(f64, f64)> = roc
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[1], f[2])
        })
        .collect();
    assert_eq!(pts[0], (0.0, 0.0));
    assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
    assert!(pts.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
}

#[test]
fn siamese_mode_writes_both_traces() {
    let dir = setup();
    let d = dir.path();
    ok(lcnet(d, &["gen"]));
    let report = ok(lcnet(d, &["train", "--mode", "siamese"]));
    assert!(report.contains("trace.csv: 12 steps"));
    assert!(report.contains("head_trace.csv: 12 steps"));
    ok(lcnet(d, &["predict"]));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = setup();
    let d = dir.path();
    let code = |o: &Output| o.status.code().unwrap();

    let o = lcnet(d, &["--set", "train.nonsense=1", "gen"]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[config]"));

    let o = lcnet(d, &["train"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(
        d.join("bad.cfg"),
        "seed = 1\nthis line has no equals sign\n",
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lcnet"))
        .current_dir(d)
        .args(["--config", "bad.cfg", "gen"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    ok(lcnet(d, &["gen"]));
    ok(lcnet(d, &["train"]));
    let o = lcnet(d, &["--set", "net.hidden=9", "predict"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[shape]"));

    let mut ckpt = read(d, "model.ckpt");
    ckpt[0] = b'X';
    std::fs::write(d.join("out/model.ckpt"), ckpt).unwrap();
    assert_eq!(code(&lcnet(d, &["predict"])), 6);
}
