use std::fs;
use std::path::{Path, PathBuf};

use seegraph::cli::{self, RunConfig};

const TINY_COHORT: [&str; 4] = ["--set", "subjects_per_class=4", "--set", "duration_s=4"];
const TINY_MODEL: [&str; 10] = [
    "--set", "model_dim=8", "--set", "heads=2", "--set", "d_pe=2", "--set", "gat_hidden=8", "--set", "epochs=2",
];

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = cli::run(std::iter::once("seegraph").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) {
    let mut args = vec!["synth", "--out", p(dir), "--seed", seed];
    args.extend(TINY_COHORT);
    let (code, _, err) = run(&args);
    assert_eq!(code, 0, "{err}");
}

fn train(cohort: &Path, out: &Path) {
    let mut args = vec!["train", "--cohort", p(cohort), "--out", p(out)];
    args.extend(TINY_MODEL);
    let (code, stdout, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("ACC"));
}

/// Every regular file under `dir` except the resolved settings, sorted by path.
fn data_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != cli::RESOLVED_CONFIG {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible_and_reports_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let mut args = vec!["synth", "--out", p(&a), "--seed", "3"];
    args.extend(TINY_COHORT);
    let (code, stdout, _) = run(&args);
    assert_eq!(code, 0);
    assert!(stdout.contains("wrote 8 subjects"), "{stdout}");
    synth(&b, "3");
    let files = data_files(&a);
    assert!(files.len() > 8);
    assert_eq!(files, data_files(&b));
    assert!(a.join(cli::RESOLVED_CONFIG).is_file());

    let c = tmp.path().join("c");
    synth(&c, "4");
    assert_ne!(files, data_files(&c));
}

#[test]
fn synth_refuses_bad_requests() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("one");
    let (code, _, err) = run(&["synth", "--out", p(&dir), "--subjects-per-class", "1"]);
    assert_eq!(code, 1, "{err}");

    let dir = tmp.path().join("twice");
    synth(&dir, "1");
    let mut again = vec!["synth", "--out", p(&dir), "--seed", "1"];
    again.extend(TINY_COHORT);
    let (code, _, err) = run(&again);
    assert_eq!(code, 1);
    assert!(err.contains("--force"), "{err}");
    again.push("--force");
    assert_eq!(run(&again).0, 0);

    let (code, _, err) = run(&["synth", "--out", p(&dir), "--set", "no_such_key=1"]);
    assert_eq!(code, 1);
    assert!(err.contains("no_such_key"), "{err}");
}

#[test]
fn train_eval_explain_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cohort = tmp.path().join("cohort");
    let reports = tmp.path().join("run");
    synth(&cohort, "2");
    train(&cohort, &reports);
    for name in [cli::METRICS_FILE, cli::RUN_LOG_FILE, cli::CHECKPOINT_FILE, cli::RESOLVED_CONFIG] {
        assert!(reports.join(name).is_file(), "{name}");
    }
    let log = fs::read_to_string(reports.join(cli::RUN_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }

    let ckpt = reports.join(cli::CHECKPOINT_FILE);
    let metrics = |dir: &Path| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(dir.join(cli::METRICS_FILE)).unwrap()).unwrap()
    };
    let trained = metrics(&reports);

    let e1 = tmp.path().join("eval1");
    let (code, _, err) = run(&["eval", "--checkpoint", p(&ckpt), "--out", p(&e1)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(metrics(&e1), trained);

    let e2 = tmp.path().join("eval2");
    let (code, _, _) = run(&["eval", "--checkpoint", p(&ckpt), "--out", p(&e2), "--noise-sigma", "0"]);
    assert_eq!(code, 0);
    assert_eq!(metrics(&e2), trained);

    let missing = tmp.path().join("nothing.sgwt");
    let (code, _, err) = run(&["eval", "--checkpoint", p(&missing), "--out", p(&tmp.path().join("e3"))]);
    assert_eq!(code, 1);
    assert!(err.contains("not found"), "{err}");

    let x = tmp.path().join("explain");
    let (code, stdout, err) = run(&["explain", "--checkpoint", p(&ckpt), "--out", p(&x), "--top-k", "6", "--dot"]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("precision@6"), "{stdout}");
    let export: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(x.join(cli::EXPLANATION_FILE)).unwrap()).unwrap();
    assert!(export["precision_at_k"].as_f64().is_some());
    let dots: Vec<_> = fs::read_dir(x.join("dot")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dots.len(), export["subjects"].as_array().unwrap().len());
    for path in dots {
        let text = fs::read_to_string(path).unwrap();
        assert!(text.starts_with("graph "));
        assert!(!text.contains("->"));
        assert_eq!(text.lines().filter(|l| l.contains("[label=")).count(), 16);
        assert_eq!(text.lines().filter(|l| l.contains(" -- ")).count(), 6);
        assert!(text.trim_end().ends_with('}'));
    }

    let bad = tmp.path().join("explain_bad");
    let (code, _, _) = run(&["explain", "--checkpoint", p(&ckpt), "--out", p(&bad), "--top-k", "121"]);
    assert_eq!(code, 1);
}

#[test]
fn bands_marks_gamma_unavailable_at_fifty_hertz() {
    let tmp = tempfile::tempdir().unwrap();
    let cohort = tmp.path().join("alpha");
    let (code, _, err) = run(&[
        "synth", "--out", p(&cohort), "--preset", "alpha", "--set", "subjects_per_class=3", "--set", "duration_s=4",
    ]);
    assert_eq!(code, 0, "{err}");
    let out = tmp.path().join("bands");
    let mut args = vec!["bands", "--cohort", p(&cohort), "--out", p(&out), "--set", "epochs=1"];
    args.extend(&TINY_MODEL[..8]);
    let (code, stdout, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    let gamma = stdout.lines().find(|l| l.starts_with("gamma")).unwrap();
    assert!(gamma.contains("NA"), "{gamma}");
    assert!(stdout.lines().last().unwrap().starts_with("broadband"));
    assert!(out.join(cli::BANDS_FILE).is_file());
}

#[test]
fn resolved_settings_round_trip() {
    let mut rc = RunConfig::default();
    rc.apply_text("model_dim = 16  # narrower\nband = alpha\nablate = pe\ntop_k = 6\n").unwrap();
    let mut back = RunConfig::default();
    back.apply_text(&rc.render()).unwrap();
    assert_eq!(back, rc);
    assert!(RunConfig::default().set("no_such_key", "1").is_err());
    assert!(RunConfig::default().apply_text("model_dim 16").is_err());
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(run(&["--help"]).0, 0);
    assert_eq!(run(&["train", "--no-such-flag"]).0, 1);
    assert_eq!(run(&["train", "--set", "epochs"]).0, 1);
}
