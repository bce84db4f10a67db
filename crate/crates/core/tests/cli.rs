use std::path::{Path, PathBuf};
use std::process::Command;

fn dagi(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dagi"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dagi(args);
    assert!(
        out.status.success(),
        "dagi {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("synth-{seed}"));
    ok(&[
        "gen-synth",
        "--out",
        p(&out),
        "--seed",
        seed,
        "--n-source",
        "48",
        "--n-target",
        "32",
    ]);
    out
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let syn = gen(d, "3");
    for f in [
        "schema.json",
        "graph.tsv",
        "source.csv",
        "target.csv",
        "target_truth.csv",
        "ground_truth.json",
        "summary.txt",
        "run_config.toml",
    ] {
        assert!(syn.join(f).is_file(), "gen-synth did not write {f}");
    }
    let schema = syn.join("schema.json");
    let train = d.join("train");
    ok(&[
        "train",
        "--data",
        p(&syn.join("source.csv")),
        "--schema",
        p(&schema),
        "--epochs",
        "3",
        "--out",
        p(&train),
    ]);
    let model = train.join("model.ckpt");
    assert!(model.is_file() && train.join("train_log.csv").is_file());

    let imp = d.join("impute");
    ok(&[
        "impute",
        "--model",
        p(&model),
        "--data",
        p(&syn.join("target.csv")),
        "--schema",
        p(&schema),
        "--out",
        p(&imp),
    ]);
    let preds = imp.join("predictions.csv");
    let header = std::fs::read_to_string(&preds).unwrap();
    assert!(header.lines().next().unwrap().contains(".dagi"));

    let score = d.join("score");
    let truth = syn.join("target_truth.csv");
    let pred_spec = format!("dagi={}", p(&preds));
    let oracle_spec = format!("oracle={}", p(&truth));
    let text = ok(&[
        "evaluate",
        "--mode",
        "score",
        "--data",
        p(&truth),
        "--schema",
        p(&schema),
        "--extra-imputed",
        &pred_spec,
        "--extra-imputed",
        &oracle_spec,
        "--out",
        p(&score),
    ]);
    assert!(text.contains("dagi") && text.contains("oracle"));
    let scores = std::fs::read_to_string(score.join("scores.csv")).unwrap();
    let oracle_all = scores
        .lines()
        .find(|l| l.starts_with("oracle,all"))
        .unwrap();
    assert_eq!(oracle_all, "oracle,all,0,0,0");

    let down = d.join("down");
    ok(&[
        "evaluate",
        "--mode",
        "downstream",
        "--data",
        p(&syn.join("target.csv")),
        "--schema",
        p(&schema),
        "--extra-imputed",
        &pred_spec,
        "--folds",
        "3",
        "--out",
        p(&down),
    ]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(down.join("downstream.json")).unwrap()).unwrap();
    assert_eq!(report["tests"][0]["result"]["kind"], "mcnemar", "{report}");
    assert!(report["tests"][0]["result"]["p_value"].as_f64().is_some());

    let cv = d.join("cv");
    ok(&[
        "evaluate",
        "--data",
        p(&syn.join("source.csv")),
        "--schema",
        p(&schema),
        "--method",
        "dagi,gi,linear-roi",
        "--folds",
        "2",
        "--epochs",
        "2",
        "--batch-size",
        "16",
        "--out",
        p(&cv),
    ]);
    for f in ["cv_folds.csv", "cv_tests.csv", "cv_report.txt"] {
        assert!(cv.join(f).is_file(), "{f}");
    }

    let ex = d.join("explain");
    ok(&[
        "explain",
        "--model",
        p(&model),
        "--data",
        p(&syn.join("source.csv")),
        "--schema",
        p(&schema),
        "--iterations",
        "5",
        "--max-subjects",
        "4",
        "--out",
        p(&ex),
    ]);
    for f in [
        "edge_importance.csv",
        "node_importance.csv",
        "importance.dot",
    ] {
        assert!(ex.join(f).is_file(), "{f}");
    }

    let emb = d.join("emb");
    ok(&[
        "export-embeddings",
        "--model",
        p(&model),
        "--data",
        p(&syn.join("target.csv")),
        "--schema",
        p(&schema),
        "--out",
        p(&emb),
    ]);
    let rows = std::fs::read_to_string(emb.join("embeddings.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 1 + 32 * 34);
}

#[test]
fn seeded_generation_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen(tmp.path(), "9");
    let b = tmp.path().join("again");
    ok(&[
        "gen-synth",
        "--out",
        p(&b),
        "--seed",
        "9",
        "--n-source",
        "48",
        "--n-target",
        "32",
    ]);
    for f in [
        "source.csv",
        "target.csv",
        "target_truth.csv",
        "ground_truth.json",
        "schema.json",
        "graph.tsv",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = gen(tmp.path(), "10");
    assert_ne!(
        std::fs::read(a.join("source.csv")).unwrap(),
        std::fs::read(c.join("source.csv")).unwrap()
    );
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "n-source = 20\nn-target = 5\nseed = 4\n").unwrap();
    let out = tmp.path().join("o");
    ok(&[
        "gen-synth",
        "--config",
        p(&cfg),
        "--n-target",
        "7",
        "--out",
        p(&out),
    ]);
    let echo = std::fs::read_to_string(out.join("run_config.toml")).unwrap();
    assert!(
        echo.contains("n-source = 20")
            && echo.contains("n-target = 7")
            && echo.contains("seed = 4"),
        "{echo}"
    );
    let rows = std::fs::read_to_string(out.join("target.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 8);
}

#[test]
fn usage_and_input_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let r = dagi(&["gen-synth", "--n-source", "0", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(
        !out.exists(),
        "a rejected run must not create its output directory"
    );
    assert!(String::from_utf8_lossy(&r.stderr).contains("n-source"));

    assert_eq!(dagi(&["no-such-command"]).status.code(), Some(2));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "n-sauce = 3\n").unwrap();
    assert_eq!(
        dagi(&["gen-synth", "--config", p(&bad), "--out", p(&out)])
            .status
            .code(),
        Some(2)
    );

    let syn = gen(tmp.path(), "1");
    let schema = syn.join("schema.json");
    let junk = tmp.path().join("junk.ckpt");
    std::fs::write(&junk, b"nope").unwrap();
    let r = dagi(&[
        "impute",
        "--model",
        p(&junk),
        "--data",
        p(&syn.join("target.csv")),
        "--schema",
        p(&schema),
        "--out",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));

    let untrained = tmp.path().join("u");
    ok(&[
        "train",
        "--data",
        p(&syn.join("source.csv")),
        "--schema",
        p(&schema),
        "--epochs",
        "0",
        "--out",
        p(&untrained),
    ]);
    let r = dagi(&[
        "explain",
        "--model",
        p(&untrained.join("model.ckpt")),
        "--data",
        p(&syn.join("source.csv")),
        "--schema",
        p(&schema),
        "--out",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&r.stderr).contains("untrained")
            || String::from_utf8_lossy(&r.stderr).contains("trained")
    );
}

#[test]
fn baseline_methods_train_and_impute() {
    let tmp = tempfile::tempdir().unwrap();
    let syn = gen(tmp.path(), "2");
    let schema = syn.join("schema.json");
    for method in ["gi", "gcn", "linear-roi", "linear-direct", "mlp"] {
        let dir = tmp.path().join(method);
        ok(&[
            "train",
            "--method",
            method,
            "--data",
            p(&syn.join("source.csv")),
            "--schema",
            p(&schema),
            "--epochs",
            "2",
            "--out",
            p(&dir),
        ]);
        let imp = tmp.path().join(format!("{method}-imp"));
        ok(&[
            "impute",
            "--model",
            p(&dir.join("model.ckpt")),
            "--data",
            p(&syn.join("target.csv")),
            "--schema",
            p(&schema),
            "--out",
            p(&imp),
        ]);
        let head = std::fs::read_to_string(imp.join("predictions.csv")).unwrap();
        assert!(
            head.lines()
                .next()
                .unwrap()
                .ends_with(&format!(".{method}"))
                || head.contains(&format!(".{method},")),
            "{method}"
        );
    }
}
