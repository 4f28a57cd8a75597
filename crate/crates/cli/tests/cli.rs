use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sign_cli::Summary;

const SINGLE_POINT: &[&str] = &[
    "data.weights=1",
    "data.means=0.4,-0.3",
    "data.stds=0.001",
    "data.count=1",
    "data.normalize=false",
    "net.hidden=32,32",
    "train.batch=64",
    "train.lr=0.01",
    "loss.lambda_n=0",
];

fn sign(args: &[&str], sets: &[&str], out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sign"));
    cmd.args(args).arg("--out").arg(out).env_remove("SIGN_SEED");
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("spawn sign")
}

fn summary(dir: &Path) -> Summary {
    Summary::parse(&fs::read_to_string(dir.join("summary.txt")).unwrap())
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn strip_wall(csv: &str) -> String {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head)).collect::<Vec<_>>().join("\n")
}

#[test]
fn unknown_key_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sign(&["train"], &["loss.lamda_f=1"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error category=config exit=2"), "{err}");
    assert!(err.contains("loss.lamda_f"), "{err}");
}

#[test]
fn unknown_key_in_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "seed = 1\nschedule.NN = 4\n").unwrap();
    let o = sign(&["gen-data", "--config", cfg.to_str().unwrap()], &[], &tmp.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("schedule.NN"));
}

#[test]
fn bad_flag_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sign(&["train", "--seed", "abc"], &[], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error category=config"));
}

#[test]
fn missing_file_is_an_io_or_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sign(&["gen-data", "--config", "/nonexistent/x.cfg"], &[], tmp.path());
    assert!(matches!(o.status.code(), Some(2) | Some(5)), "{:?}", o.status);
}

#[test]
fn malformed_data_file_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("d.csv");
    fs::write(&csv, "x0,x1\n1,2\n3\n").unwrap();
    let set = format!("data.file={}", csv.display());
    let o = sign(&["gen-data"], &[&set], &tmp.path().join("o"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error category=data exit=3"));
}

#[test]
fn single_point_train_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    let mut sets = SINGLE_POINT.to_vec();
    sets.push("train.steps=3000");
    let o = sign(&["train"], &sets, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = summary(&out);
    assert_eq!(s.get("status"), Some("ok"));
    assert!(s.get_f64("idem_drift").unwrap() <= 1e-2);
    for f in ["resolved.cfg", "metrics.csv", "checkpoints/final.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3001);
}

#[test]
fn eval_on_untrained_checkpoint_is_finite() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path().join("t");
    let o = sign(&["train"], &["train.steps=0", "net.hidden=16"], &t);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = format!("model.checkpoint={}", t.join("checkpoints/final.ckpt").display());
    let e = tmp.path().join("e");
    let o = sign(&["eval"], &[&ckpt, "eval.samples=500", "eval.draws=2"], &e);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(e.join("eval.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(v.is_finite(), "{line}");
    }
    assert_eq!(summary(&e).get("all_finite_non_negative"), Some("true"));
}

#[test]
fn reruns_are_identical_and_resolved_config_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let sets = ["train.steps=40", "train.batch=32", "net.hidden=16", "train.checkpoint_every=20"];
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(sign(&["train", "--seed", "7"], &sets, &a).status.success());
    assert!(sign(&["train", "--seed", "7"], &sets, &b).status.success());
    let cfg = a.join("resolved.cfg");
    let c = tmp.path().join("c");
    assert!(sign(&["train", "--config", cfg.to_str().unwrap()], &[], &c).status.success());
    let ma = strip_wall(&fs::read_to_string(a.join("metrics.csv")).unwrap());
    for other in [&b, &c] {
        assert_eq!(ma, strip_wall(&fs::read_to_string(other.join("metrics.csv")).unwrap()));
        for f in ["checkpoints/final.ckpt", "checkpoints/step_00000020.ckpt", "summary.txt", "resolved.cfg"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(other.join(f)).unwrap(), "{f}");
        }
    }
}

#[test]
fn sign_seed_env_overrides_config_but_not_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, flag: Option<&str>, name: &str| {
        let out = tmp.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sign"));
        cmd.args(["gen-data", "--set", "seed=1", "--set", "data.count=10", "--out"]).arg(&out);
        cmd.env_remove("SIGN_SEED");
        if let Some(e) = env {
            cmd.env("SIGN_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.status().unwrap().success());
        summary(&out).get("seed").unwrap().to_string()
    };
    assert_eq!(run(None, None, "a"), "1");
    assert_eq!(run(Some("9"), None, "b"), "9");
    assert_eq!(run(Some("9"), Some("3"), "c"), "3");
}

#[test]
fn sample_and_edit_write_id_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path().join("t");
    assert!(sign(&["train"], &["train.steps=5", "net.hidden=8"], &t).status.success());
    let ckpt = format!("model.checkpoint={}", t.join("checkpoints/final.ckpt").display());
    let s = tmp.path().join("s");
    assert!(sign(&["sample"], &[&ckpt, "sample.count=7"], &s).status.success());
    let csv = fs::read_to_string(s.join("samples/samples.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("id,x0,x1"));
    assert_eq!(csv.lines().count(), 8);
    let e = tmp.path().join("e");
    let o = sign(&["edit"], &[&ckpt, "edit.count=4"], &e);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(summary(&e).get("unmasked_bitwise"), Some("true"));
}

#[test]
fn scaling_study_single_interval_has_no_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let sets = [
        "scaling.intervals=8",
        "scaling.max_steps=20",
        "scaling.check_every=10",
        "scaling.reference_steps=100",
        "scaling.trajectories=8",
        "net.hidden=8",
        "train.batch=16",
    ];
    let o = sign(&["scaling-study"], &sets, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let s = summary(tmp.path());
    assert_eq!(s.get("rows"), Some("1"));
    assert_eq!(s.get("slope_euler"), Some("none"));
}
