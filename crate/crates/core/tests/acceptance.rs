//! Acceptance suite: one PASS/FAIL line per criterion. Always exits 0 so a
//! failing criterion is reported rather than aborting the workspace tests.
//!
//! Criteria 4-10 and 12 drive the `gmparse` binary on the standard 12-GM zoo;
//! artifacts are kept under `target/tmp/acceptance` for inspection.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use gmparse::autodiff::{op_suite, Graph};
use gmparse::experiment::{load_parser, ZooData};
use gmparse::fingerprint::{self, Fen, FingerprintLossWeights};
use gmparse::labels::{DISCRETE_NAMES, NUM_DISCRETE};
use gmparse::parser::{hierarchical_compose, weighted_sigmoid_ce};
use gmparse::spectral::{dft2, high_pass, idft2, low_pass};
use gmparse::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const SEED: &str = "2021";

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = anyhow::Result<Outcome>;

fn outcome(pass: bool, detail: String) -> Check {
    Ok(Outcome { pass, detail })
}

fn gmparse(args: &[&str]) -> anyhow::Result<Duration> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_gmparse"))
        .args(args)
        .args(["--seed", SEED])
        .env_remove("GMPARSE_SEED")
        .output()?;
    if !out.status.success() {
        anyhow::bail!("gmparse {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim());
    }
    Ok(start.elapsed())
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

// ------------------------------------------------------------ 1-3: library

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut rows = op_suite(100, 2021)?;
    rows.extend(fingerprint::loss_gradient_suite(100, 2021)?);
    let secs = start.elapsed().as_secs_f64();
    let worst = rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failing: Vec<&str> = rows.iter().filter(|r| r.max_rel_error >= 1e-4).map(|r| r.name.as_str()).collect();
    outcome(
        failing.is_empty() && secs < 120.0,
        format!(
            "{} checks x 100 trials, worst {} {:.2e}, {secs:.1}s{}",
            rows.len(),
            worst.name,
            worst.max_rel_error,
            if failing.is_empty() { String::new() } else { format!(", failing {failing:?}") }
        ),
    )
}

fn spectral_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2021);
    let (mut round, mut parseval, mut split_exact) = (0.0f64, 0.0f64, true);
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(2..=16), rng.gen_range(2..=16));
        let x: Tensor<f64> = Tensor::from_fn(&[h, w], |_| rng.gen_range(-1.0..1.0));
        let s = dft2(&x)?;
        let y = idft2(&s)?;
        let peak = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        round = round.max(x.max_abs_diff(&y) / peak);
        let spatial: f64 = x.data().iter().map(|v| v * v).sum();
        parseval = parseval.max((spatial - s.energy() / (h * w) as f64).abs() / spatial);
        let k = rng.gen_range(1..=h.min(w));
        let (lo, hi) = (low_pass(&s, k)?, high_pass(&s, k)?);
        for i in 0..s.re.len() {
            split_exact &= lo.re[i] + hi.re[i] == s.re[i] && lo.im[i] + hi.im[i] == s.im[i];
        }
    }
    outcome(
        round < 1e-6 && parseval < 1e-6 && split_exact,
        format!("1000 trials: round trip {round:.1e}, Parseval {parseval:.1e}, low+high exact {split_exact}"),
    )
}

fn loss_oracles() -> Check {
    let mut worst = 0.0f64;
    let mut note = |a: f64, b: f64| worst = worst.max((a - b).abs());

    // J_f recombination on a random 16x16 fingerprint
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fp: Tensor<f64> = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.gen_range(-0.5..0.5));
    let weights = FingerprintLossWeights::default();
    let k = weights.resolve_k(16, 16);
    let term = |which: usize| -> anyhow::Result<f64> {
        let mut g = Graph::<f64>::new();
        let v = g.input(fp.clone());
        let t = match which {
            0 => fingerprint::magnitude_loss(&mut g, v)?,
            1 => fingerprint::spectrum_loss(&mut g, v, k)?,
            2 => fingerprint::repetitive_loss(&mut g, v, k)?,
            _ => fingerprint::energy_loss(&mut g, v)?,
        };
        Ok(g.value(t).sum())
    };
    let hand = weights.lambda1 * term(0)? + weights.lambda2 * term(1)? + weights.lambda3 * term(2)? + weights.lambda4 * term(3)?;
    let mut g = Graph::<f64>::new();
    let v = g.input(fp.clone());
    let combined = fingerprint::fingerprint_loss(&mut g, v, &weights)?;
    note(g.value(combined).item(), hand);

    // weighted sigmoid CE hand cases
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let ce = |logits: Vec<f64>, m: usize, labels: &[usize], w: &[f64]| -> anyhow::Result<f64> {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::new(vec![labels.len(), m], logits)?);
        let l = weighted_sigmoid_ce(&mut g, z, labels, w)?;
        Ok(g.value(l).item())
    };
    note(ce(vec![0.0, 2.0], 2, &[1], &[1.0, 3.0])?, -3.0 * sig(2.0).ln());
    note(ce(vec![0.0; 4], 4, &[2], &[1.0; 4])?, 2f64.ln());
    note(
        ce(vec![1.0, -1.0, 0.5, 0.25], 2, &[0, 1], &[2.0, 0.5])?,
        -(2.0 * sig(1.0).ln() + 0.5 * sig(0.25).ln()) / 2.0,
    );

    // hierarchical composition limits
    let compose = |coarse: [f64; 3], fine: [f64; 8]| -> anyhow::Result<Vec<f64>> {
        let mut g = Graph::<f64>::new();
        let c = g.input(Tensor::new(vec![1, 3], coarse.to_vec())?);
        let fi = g.input(Tensor::new(vec![1, 8], fine.to_vec())?);
        let p = hierarchical_compose(&mut g, c, fi)?;
        Ok(g.value(p).data().to_vec())
    };
    let fine = [-2.0, -1.0, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0];
    for (m, p) in compose([60.0; 3], fine)?.into_iter().enumerate() {
        note(p, sig(fine[m]));
    }
    for p in compose([-60.0; 3], fine)? {
        note(p, 0.0);
    }
    for p in compose([0.0; 3], [0.0; 8])? {
        note(p, 0.25);
    }
    outcome(worst < 1e-10, format!("J_f recombination, weighted CE and composition limits: max |error| {worst:.1e}"))
}

// --------------------------------------------------------- 4-12: pipeline

struct Pipeline {
    root: PathBuf,
    manifest: PathBuf,
    zoo_time: Duration,
}

impl Pipeline {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn build() -> anyhow::Result<Self> {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        if root.exists() {
            std::fs::remove_dir_all(&root)?;
        }
        let zoo = root.join("zoo");
        let zoo_time = gmparse(&["zoo", "build", "--out", s(&zoo)])?;
        Ok(Pipeline {
            manifest: zoo.join("manifest.json"),
            root,
            zoo_time,
        })
    }

    fn parse(&self, name: &str, extra: &[&str]) -> anyhow::Result<(Value, Duration)> {
        let out = self.dir(name);
        let mut args = vec!["parse", "train", "--manifest", s(&self.manifest), "--out", s(&out)];
        args.extend(extra);
        let t = gmparse(&args)?;
        Ok((read_json(&out.join("report.json"))?, t))
    }
}

fn baseline<'a>(report: &'a Value, name: &str) -> anyhow::Result<&'a Value> {
    report["baselines"]
        .as_array()
        .and_then(|b| b.iter().find(|r| r["name"] == name))
        .ok_or_else(|| anyhow::anyhow!("no {name} baseline"))
}

fn ordering(report: &Value, elapsed: Duration) -> Check {
    let single = &report["method"]["single"];
    let (l1, f1) = (f(&single["l1"]["mean"]), f(&single["discrete_f1"]["mean"]));
    let mut pass = elapsed < Duration::from_secs(2 * 3600);
    let mut parts = vec![format!("method L1 {l1:.4} F1 {f1:.4}")];
    for name in ["random_ground_truth", "random_guess"] {
        let b = baseline(report, name)?;
        let (bl1, bf1) = (f(&b["l1"]["mean"]), f(&b["discrete_f1"]["mean"]));
        let (dl1, df1) = (bl1 - l1, f1 - bf1);
        pass &= dl1 >= 0.02 && df1 >= 0.05;
        parts.push(format!("vs {name} L1 {bl1:.4} ({dl1:+.4}) F1 {bf1:.4} ({df1:+.4})"));
    }
    parts.push(format!("{:.0}s", elapsed.as_secs_f64()));
    outcome(pass, parts.join("; "))
}

fn fold_values(report: &Value, pick: impl Fn(&Value) -> f64) -> Vec<f64> {
    report["folds"].as_array().map(|fs| fs.iter().map(pick).collect()).unwrap_or_default()
}

fn no_fingerprint_ablation(full: &Value, ablated: &Value) -> Check {
    let pick = |fold: &Value| f(&fold["single"]["discrete_f1_mean"]);
    let a = fold_values(&full["method"], pick);
    let b = fold_values(&ablated["method"], pick);
    anyhow::ensure!(a.len() == 6 && b.len() == 6, "expected 6 folds");
    let better = a.iter().zip(&b).filter(|(x, y)| x > y).count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    outcome(
        better >= 4,
        format!(
            "full beats no-fingerprint F1 on {better}/6 folds; mean F1 {:.4} vs {:.4}",
            mean(&a),
            mean(&b)
        ),
    )
}

fn similarity(p: &Pipeline) -> Check {
    let out = p.dir("similarity");
    gmparse(&["similarity", "--manifest", s(&p.manifest), "--run", s(&p.dir("parse")), "--out", s(&out)])?;
    let m = read_json(&out.join("similarity.json"))?;
    let ids = m["ids"].as_array().map_or(0, Vec::len);
    let values: Vec<f64> = m["values"].as_array().into_iter().flatten().flat_map(|row| row.as_array().into_iter().flatten().map(f)).collect();
    anyhow::ensure!(ids > 1 && values.len() == ids * ids, "expected a {ids}x{ids} matrix, got {} values", values.len());
    let (mut diag, mut off, mut nd, mut no) = (0.0, 0.0, 0, 0);
    for i in 0..ids {
        for j in 0..ids {
            let v = values[i * ids + j];
            if v.is_nan() {
                continue;
            }
            if i == j {
                diag += v;
                nd += 1;
            } else {
                off += v;
                no += 1;
            }
        }
    }
    let (d, o) = (diag / nd as f64, off / no as f64);
    outcome(d - o > 0.1, format!("mean diagonal {d:.4} - mean off-diagonal {o:.4} = {:.4}", d - o))
}

fn aggregation(report: &Value) -> Check {
    let folds = report["method"]["folds"].as_array().cloned().unwrap_or_default();
    let better = folds
        .iter()
        .filter(|fo| {
            f(&fo["aggregated"]["discrete_f1_mean"]) >= f(&fo["single"]["discrete_f1_mean"])
                && f(&fo["aggregated"]["l1"]["mean"]) <= f(&fo["single"]["l1"]["mean"])
        })
        .count();
    let m = &report["method"];
    outcome(
        better >= 4,
        format!(
            "10-image aggregation no worse on {better}/{} folds; F1 {:.4} -> {:.4}, L1 {:.4} -> {:.4}",
            folds.len(),
            f(&m["single"]["discrete_f1"]["mean"]),
            f(&m["aggregated"]["discrete_f1"]["mean"]),
            f(&m["single"]["l1"]["mean"]),
            f(&m["aggregated"]["l1"]["mean"]),
        ),
    )
}

/// Classifier `k` of every fold of a variant, summed: `counts[pred][truth]`.
fn pooled_confusion(report: &Value, k: usize) -> Vec<Vec<u64>> {
    let mut pooled: Vec<Vec<u64>> = Vec::new();
    for fold in report["folds"].as_array().into_iter().flatten() {
        let counts = &fold["confusion"][k]["counts"];
        for (r, row) in counts.as_array().into_iter().flatten().enumerate() {
            for (c, v) in row.as_array().into_iter().flatten().enumerate() {
                if pooled.len() <= r {
                    pooled.resize(r + 1, Vec::new());
                }
                if pooled[r].len() <= c {
                    pooled[r].resize(c + 1, 0);
                }
                pooled[r][c] += v.as_u64().unwrap_or(0);
            }
        }
    }
    pooled
}

fn collapse(weighted: &Value, unweighted: &Value) -> Check {
    let mut collapsed = Vec::new();
    for fold in weighted["method"]["folds"].as_array().into_iter().flatten() {
        for (k, c) in fold["collapsed"].as_array().into_iter().flatten().enumerate() {
            if c.as_bool() == Some(true) {
                collapsed.push(format!("fold{}:{}", fold["fold"], DISCRETE_NAMES[k]));
            }
        }
    }
    // the negative control: skip connections are rare in the zoo by design
    let k = DISCRETE_NAMES.iter().position(|&n| n == "skip_connection").unwrap_or(NUM_DISCRETE - 2);
    let pooled = pooled_confusion(&unweighted["method"], k);
    let rows = pooled.iter().filter(|r| r.iter().any(|&v| v > 0)).count();
    let truth_classes = (0..pooled.first().map_or(0, Vec::len))
        .filter(|&c| pooled.iter().any(|r| r[c] > 0))
        .count();
    let control = rows <= 1 && truth_classes >= 2;
    outcome(
        collapsed.is_empty() && control,
        format!(
            "weighted CE collapses on {} fold/classifier pairs{}; unweighted {}: {rows} predicted row(s) over {truth_classes} true classes",
            collapsed.len(),
            if collapsed.is_empty() { String::new() } else { format!(" {collapsed:?}") },
            DISCRETE_NAMES[k]
        ),
    )
}

fn deepfake(p: &Pipeline) -> Check {
    let out = p.dir("deepfake");
    gmparse(&["deepfake", "train", "--manifest", s(&p.manifest), "--out", s(&out)])?;
    let r = read_json(&out.join("report.json"))?;
    let auc = f(&r["auc"]);
    outcome(
        auc > 0.9,
        format!(
            "held-out GMs {}: AUC {auc:.4} (untrained {:.4})",
            r["test_gms"],
            f(&r["untrained_auc"])
        ),
    )
}

fn attribution(p: &Pipeline) -> Check {
    let out = p.dir("attribution");
    gmparse(&["attribute", "train", "--manifest", s(&p.manifest), "--out", s(&out)])?;
    let r = read_json(&out.join("report.json"))?;
    let acc = f(&r["accuracy"]);
    let classes = r["gms"].as_array().map_or(0, Vec::len) + 1;
    outcome(
        acc >= 0.8 && classes == 5,
        format!("{classes}-class held-out accuracy {acc:.4} (untrained {:.4})", f(&r["untrained_accuracy"])),
    )
}

fn content_probe(p: &Pipeline) -> Check {
    let run = p.dir("parse");
    let splits = read_json(&run.join("splits.json"))?;
    let ids = |v: &Value| -> Vec<String> {
        v.as_array().into_iter().flatten().filter_map(|x| x.as_str().map(String::from)).collect()
    };
    let (train, test) = (ids(&splits["folds"][0]["train"]), ids(&splits["folds"][0]["test"]));
    let (art, weights) = load_parser(&run, 0)?;
    let fen = Fen::new(art.fen.clone())?;
    let data = ZooData::load(&p.manifest, None)?;
    let r = gmparse::experiment::content_probe_experiment(&data, &fen, &weights.fen, &train, &test, 64, 200, 2021)?;
    outcome(
        r.within_chance,
        format!(
            "content family from fold-0 fingerprints: {}/{} correct = {:.4}, 95% interval [{:.4}, {:.4}], chance {:.4}",
            r.correct, r.test_images, r.accuracy, r.interval.0, r.interval.1, r.chance
        ),
    )
}

fn reproducibility(p: &Pipeline) -> Check {
    let (_, t) = p.parse("parse_repeat", &["--baselines"])?;
    let a = std::fs::read(p.dir("parse").join("report.json"))?;
    let b = std::fs::read(p.dir("parse_repeat").join("report.json"))?;
    outcome(a == b, format!("report.json {} bytes, identical: {} ({:.0}s)", a.len(), a == b, t.as_secs_f64()))
}

// ------------------------------------------------------------------- main

fn report(id: usize, name: &str, r: Check, start: Instant) -> bool {
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match r {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e:#}")),
    };
    println!("criterion {id:>2} {} {name}: {detail} [{secs:.0}s]", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    // libtest-style filtering: `cargo test -- <name>` runs nothing here unless it matches
    if let Some(filter) = std::env::args().skip(1).find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(&filter) {
            return;
        }
    }
    let mut passed = 0;
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(&mut *f))
            .unwrap_or_else(|_| Err(anyhow::anyhow!("panicked")));
        passed += report(id, name, r, start) as usize;
    };
    run(1, "gradient suite", &mut gradient_suite);
    run(2, "spectral identities", &mut spectral_identities);
    run(3, "loss-formula oracles", &mut loss_oracles);

    let pipeline = Pipeline::build();
    let parsed = pipeline.as_ref().map_err(|e| anyhow::anyhow!("{e:#}")).and_then(|p| {
        let (report, t) = p.parse("parse", &["--baselines"])?;
        Ok((report, t + p.zoo_time))
    });
    type Runner<'a> = dyn FnMut(usize, &str, &mut dyn FnMut() -> Check) + 'a;
    let with = |id, name, f: &mut dyn FnMut(&Pipeline, &Value, Duration) -> Check, run: &mut Runner| {
        run(id, name, &mut || match (&pipeline, &parsed) {
            (Ok(p), Ok((r, t))) => f(p, r, *t),
            (Err(e), _) => Err(anyhow::anyhow!("zoo build failed: {e:#}")),
            (_, Err(e)) => Err(anyhow::anyhow!("parse training failed: {e:#}")),
        })
    };
    with(4, "ordering vs baselines", &mut |_, r, t| ordering(r, t), &mut run);
    with(5, "no-fingerprint ablation", &mut |p, r, _| no_fingerprint_ablation(r, &p.parse("no_fingerprint", &["--no-fingerprint"])?.0), &mut run);
    with(6, "fingerprint similarity", &mut |p, _, _| similarity(p), &mut run);
    with(7, "multi-image aggregation", &mut |_, r, _| aggregation(r), &mut run);
    with(8, "confusion collapse", &mut |p, r, _| collapse(r, &p.parse("unweighted", &["--unweighted"])?.0), &mut run);
    with(9, "deepfake detection", &mut |p, _, _| deepfake(p), &mut run);
    with(10, "attribution", &mut |p, _, _| attribution(p), &mut run);
    with(11, "content-independence probe", &mut |p, _, _| content_probe(p), &mut run);
    with(12, "reproducibility", &mut |p, _, _| reproducibility(p), &mut run);
    println!("acceptance: {passed}/12 criteria passed");
}
