use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gmparse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmparse"))
        .args(args)
        .env_remove("GMPARSE_SEED")
        .output()
        .expect("spawn gmparse")
}

fn ok(args: &[&str]) -> String {
    let out = gmparse(args);
    assert!(
        out.status.success(),
        "gmparse {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(gmparse(&["gradcheck", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(gmparse(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(gmparse(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = gmparse(&["parse", "train", "--manifest", "/nonexistent/manifest.json", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--trials", "1", "--out", s(dir.path())]);
    assert!(out.lines().count() > 20, "{out}");
    assert!(!out.contains("FAIL"));
    let rows = json(&dir.path().join("gradcheck.json"));
    assert!(rows.as_array().unwrap().iter().all(|r| r["max_rel_error"].as_f64().unwrap() < 1e-4));
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path, flag: Option<&str>, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gmparse"));
        cmd.args(["gradcheck", "--trials", "1", "--out", s(out)]).env_remove("GMPARSE_SEED");
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        if let Some(e) = env {
            cmd.env("GMPARSE_SEED", e);
        }
        assert!(cmd.output().unwrap().status.success());
        json(&out.join("config.json"))["seed"].as_u64().unwrap()
    };
    assert_eq!(run(&dir.path().join("a"), None, None), 2021);
    assert_eq!(run(&dir.path().join("b"), None, Some("17")), 17);
    assert_eq!(run(&dir.path().join("c"), Some("5"), Some("17")), 5);
}

/// One small zoo exercised by every command.
#[test]
fn end_to_end_on_a_tiny_zoo() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let zoo = root.join("zoo");
    let manifest = zoo.join("manifest.json");
    ok(&["zoo", "build", "--out", s(&zoo), "--images-per-gm", "12", "--gm-steps", "5", "--jobs", "2"]);
    let m = json(&manifest);
    let gms = m["gms"].as_array().unwrap();
    assert_eq!(gms.len(), 12);
    let first_image: PathBuf = zoo.join("images").join("gm00").join("0000.pgm");
    assert!(first_image.exists());
    assert!(zoo.join("checkpoints").join("gm00.ckpt").exists());

    let small = [
        "--steps", "4", "--batch", "8", "--train-images-per-gm", "6", "--test-images-per-gm", "4",
    ];
    let parse = root.join("parse");
    let mut args = vec!["parse", "train", "--manifest", s(&manifest), "--out", s(&parse), "--fold", "0", "--fold", "1"];
    args.extend(small);
    let out = ok(&args);
    assert!(out.contains("random_guess"), "{out}");
    let report = json(&parse.join("report.json"));
    assert_eq!(report["method"]["folds"].as_array().unwrap().len(), 2);
    assert!(parse.join("confusion_fold1_skip_connection.csv").exists());
    assert!(parse.join("fold0.ckpt").exists() && parse.join("splits.json").exists());
    assert_eq!(json(&parse.join("config.json"))["command"], "parse-train");

    // replaying the snapshot reproduces the report byte for byte
    let replay = root.join("replay");
    ok(&["replay", "--config", s(&parse.join("config.json")), "--out", s(&replay)]);
    assert_eq!(
        std::fs::read(parse.join("report.json")).unwrap(),
        std::fs::read(replay.join("report.json")).unwrap()
    );

    let eval = root.join("eval");
    ok(&[
        "parse", "eval", "--manifest", s(&manifest), "--run", s(&parse), "--out", s(&eval), "--images-per-gm", "3",
        s(&first_image),
    ]);
    let r = json(&eval.join("report.json"));
    assert_eq!(r["folds"].as_array().unwrap().len(), 2);
    let preds = json(&eval.join("predictions.json"));
    let rec = &preds[s(&first_image)];
    assert_eq!(rec["continuous"].as_object().unwrap().len(), 9);
    assert_eq!(rec["discrete"].as_object().unwrap().len(), 6);
    assert_eq!(rec["fine"].as_object().unwrap().len(), 8);

    let fp = root.join("fp");
    ok(&["fingerprint", "extract", "--run", s(&parse), "--out", s(&fp), "--spectrum", s(&first_image)]);
    assert_eq!(std::fs::read(fp.join("0000.f32")).unwrap().len(), 16 * 16 * 4);
    let side = json(&fp.join("0000.json"));
    assert_eq!(side["layout"], "row-major");
    assert_eq!(side["shape"], serde_json::json!([1, 16, 16]));
    assert!(fp.join("0000.spectrum.pgm").exists());

    let heat = root.join("heat");
    ok(&[
        "heatmap", "--manifest", s(&manifest), "--run", s(&parse), "--parameter", "upsampling", "--patch", "4", "--count",
        "2", "--out", s(&heat),
    ]);
    let h = json(&heat.join("heatmap.json"));
    assert_eq!(h["values"].as_array().unwrap().len(), 16 * 16);
    assert!(heat.join("heatmap.pgm").exists() && heat.join("heatmap.csv").exists());
    assert_eq!(gmparse(&["heatmap", "--manifest", "x", "--run", "y", "--parameter", "nope", "--out", "z"]).status.code(), Some(1));

    let sim = root.join("sim");
    ok(&["similarity", "--manifest", s(&manifest), "--run", s(&parse), "--pairs", "3", "--images-per-gm", "4", "--out", s(&sim)]);
    let sm = json(&sim.join("similarity.json"));
    assert_eq!(sm["ids"].as_array().unwrap().len(), 12);

    let rgt = root.join("rgt");
    let mut args = vec!["baseline", "random-gt", "--manifest", s(&manifest), "--out", s(&rgt), "--repeats", "1"];
    args.extend(small);
    ok(&args);
    assert!(json(&rgt.join("report.json"))["row"]["l1"]["mean"].as_f64().is_some());

    let df = root.join("df");
    ok(&["deepfake", "train", "--manifest", s(&manifest), "--out", s(&df), "--steps", "3", "--batch", "8", "--images-per-gm", "6"]);
    let auc = json(&df.join("report.json"))["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let dfe = root.join("dfe");
    ok(&["deepfake", "eval", "--run", s(&df), "--manifest", s(&manifest), "--out", s(&dfe), s(&first_image)]);
    assert_eq!(json(&dfe.join("report.json"))["auc"].as_f64(), Some(auc));
    assert!(std::fs::read_to_string(dfe.join("predictions.csv")).unwrap().lines().count() == 2);
    ok(&["fingerprint", "extract", "--run", s(&df), "--out", s(&root.join("fp_df")), s(&first_image)]);

    let at = root.join("at");
    ok(&[
        "attribute", "train", "--manifest", s(&manifest), "--out", s(&at), "--steps", "3", "--batch", "8",
        "--train-per-class", "6", "--test-per-class", "4", "--gms", "gm00,gm01,gm02,gm03",
    ]);
    let acc = json(&at.join("report.json"))["accuracy"].as_f64().unwrap();
    let ate = root.join("ate");
    ok(&["attribute", "eval", "--run", s(&at), "--manifest", s(&manifest), "--out", s(&ate)]);
    assert_eq!(json(&ate.join("report.json"))["accuracy"].as_f64(), Some(acc));
    let header = std::fs::read_to_string(ate.join("confusion.csv")).unwrap();
    assert!(header.starts_with("predicted\\truth,genuine,gm00,gm01,gm02,gm03\n"), "{header}");

    // an attribution run is not a deepfake run
    assert_eq!(gmparse(&["deepfake", "eval", "--run", s(&at), "--out", s(&root.join("x")), s(&first_image)]).status.code(), Some(1));
}
