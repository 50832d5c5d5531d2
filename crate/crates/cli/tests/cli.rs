use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn specs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs")
}

fn restitch(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_restitch"));
    cmd.args(args)
        .env_remove("RESTITCH_SEED")
        .env("RESTITCH_THREADS", "1");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn restitch")
}

fn ok(args: &[&str]) -> Output {
    let out = restitch(args, &[]);
    assert!(
        out.status.success(),
        "restitch {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` except run manifests, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn verify(dir: &Path) {
    ok(&["verify", s(dir)]);
    let m = read_json(&dir.join("run.json"));
    assert_eq!(m["status"], "ok", "{}", dir.display());
    assert!(!m["outputs"].as_array().unwrap().is_empty());
}

/// gen-data, two parents, tapes, cka, plan, stitch, eval, finetune,
/// eval, report. Returns the run root.
fn pipeline(root: &Path) -> f64 {
    let data = root.join("data");
    let large = root.join("large");
    let small = root.join("small");
    ok(&[
        "gen-data",
        "--seed",
        "3",
        "--classes",
        "4",
        "--per-class",
        "40",
        "--shape",
        "3x8x8",
        "--noise",
        "1.5",
        "--out",
        s(&data),
    ]);
    let base_cfg = specs().join("train-base.json");
    for (spec, out, seed) in [
        ("toy-large.json", &large, "0"),
        ("toy-small.json", &small, "1"),
    ] {
        ok(&[
            "train-base",
            "--spec",
            s(&specs().join(spec)),
            "--data",
            s(&data),
            "--config",
            s(&base_cfg),
            "--epochs",
            "8",
            "--seed",
            seed,
            "--out",
            s(out),
        ]);
    }
    for (m, t) in [(&large, "tapes-large"), (&small, "tapes-small")] {
        ok(&[
            "capture",
            "--weights",
            s(m),
            "--data",
            s(&data),
            "--batch-size",
            "32",
            "--repeats",
            "3",
            "--seed",
            "7",
            "--out",
            s(&root.join(t)),
        ]);
    }
    // small as front on purpose: plan must transpose it
    let cka = root.join("cka");
    ok(&[
        "cka",
        "--front-tapes",
        s(&root.join("tapes-small")),
        "--back-tapes",
        s(&root.join("tapes-large")),
        "--out",
        s(&cka),
    ]);
    let plan = root.join("plan");
    ok(&[
        "plan",
        "--similarity",
        s(&cka.join("similarity.json")),
        "--front-spec",
        s(&large),
        "--back-spec",
        s(&small),
        "--budget",
        "100000",
        "--metric",
        "params",
        "--direction",
        "slow-to-fast",
        "--out",
        s(&plan),
    ]);
    let stitched = root.join("stitched");
    ok(&[
        "stitch",
        "--plan",
        s(&plan.join("plan.json")),
        "--front-weights",
        s(&large),
        "--back-weights",
        s(&small),
        "--init",
        "least-squares",
        "--calib-tapes",
        s(&root.join("tapes-large")),
        s(&root.join("tapes-small")),
        "--out",
        s(&stitched),
    ]);
    let fresh: Value =
        serde_json::from_slice(&ok(&["eval", "--model", s(&stitched), "--data", s(&data)]).stdout)
            .unwrap();
    let acc0 = fresh["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc0), "untrained accuracy {acc0}");

    let tuned = root.join("tuned");
    ok(&[
        "finetune",
        "--model",
        s(&stitched),
        "--data",
        s(&data),
        "--config",
        s(&specs().join("finetune.json")),
        "--epochs",
        "4",
        "--out",
        s(&tuned),
    ]);
    let evald = root.join("eval");
    ok(&[
        "eval",
        "--model",
        s(&tuned),
        "--data",
        s(&data),
        "--out",
        s(&evald),
    ]);
    ok(&[
        "report",
        "--runs",
        s(&tuned),
        s(&evald),
        "--out",
        s(&root.join("report")),
    ]);

    for d in [
        "data",
        "large",
        "small",
        "tapes-large",
        "cka",
        "plan",
        "stitched",
        "tuned",
        "eval",
        "report",
    ] {
        verify(&root.join(d));
    }
    acc0
}

#[test]
fn toy_pipeline_runs_verifies_and_reproduces() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());

    let plan = read_json(&a.path().join("plan/plan.json"));
    assert_eq!(plan["front_model_id"], "toy-large");
    assert_eq!(plan["back_model_id"], "toy-small");
    let stitched = read_json(&a.path().join("stitched/stitched.json"));
    assert_eq!(stitched["plan"]["adapter"]["init"], "least-squares");
    let report = fs::read_to_string(a.path().join("report/report.md")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(
        lines[0],
        "| Front Model | Behind Model | Acc | Params | FLOPs | Trainable Params |"
    );
    assert_eq!(lines.len(), 4);
    assert!(
        lines[2].starts_with("| toy-large | toy-small |"),
        "{}",
        lines[2]
    );
    let summary = read_json(&a.path().join("tuned/summary.json"));
    let eval = read_json(&a.path().join("eval/eval.json"));
    assert_eq!(summary["accuracy"], eval["accuracy"]);
    let run = read_json(&a.path().join("tuned/run.json"));
    assert_eq!(run["config"]["epochs"], 4, "flag beats config file");
    assert_eq!(run["config"]["learning-rate"], 0.01);
    assert_eq!(run["command"], "finetune");

    pipeline(b.path());
    for d in [
        "data",
        "large",
        "small",
        "tapes-large",
        "cka",
        "plan",
        "stitched",
        "tuned",
        "eval",
        "report",
    ] {
        assert_eq!(
            snapshot(&a.path().join(d)),
            snapshot(&b.path().join(d)),
            "{d} differs between identical runs"
        );
    }
}

fn similarity_file(dir: &Path) -> PathBuf {
    let sim = serde_json::json!({
        "front_model_id": "toy-large",
        "back_model_id": "toy-small",
        "front_units": ["conv0", "conv1", "pool2", "conv3", "pool4", "head"],
        "back_units": ["conv0", "pool1", "conv2", "head"],
        "repeats": 1,
        "batch_size": 8,
        "dataset_id": "hand",
        "values": [[0.9, 0.5, 0.4, 0.1], [0.6, 0.8, 0.5, 0.1], [0.5, 0.7, 0.6, 0.2],
                   [0.3, 0.4, 0.9, 0.3], [0.2, 0.3, 0.7, 0.4], [0.1, 0.2, 0.3, 0.9]],
        "sample_counts": vec![vec![8; 4]; 6],
    });
    let p = dir.join("similarity.json");
    fs::write(&p, serde_json::to_vec(&sim).unwrap()).unwrap();
    p
}

fn plan_args<'a>(sim: &'a str, out: &'a str, budget: &'a str) -> Vec<&'a str> {
    let large = Box::leak(specs().join("toy-large.json").into_boxed_path());
    let small = Box::leak(specs().join("toy-small.json").into_boxed_path());
    vec![
        "plan",
        "--similarity",
        sim,
        "--front-spec",
        s(large),
        "--back-spec",
        s(small),
        "--budget",
        budget,
        "--out",
        out,
    ]
}

#[test]
fn impossible_budget_exits_4_with_min_cost() {
    let t = tempfile::tempdir().unwrap();
    let sim = similarity_file(t.path());
    let out = t.path().join("plan");
    let r = restitch(&plan_args(s(&sim), s(&out), "10"), &[]);
    assert_eq!(r.status.code(), Some(4));
    let err = String::from_utf8(r.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[infeasible]:"), "{err}");
    assert!(err.contains("minimum achievable cost is"), "{err}");
    let min: u64 = err.trim_end().rsplit(' ').next().unwrap().parse().unwrap();

    // the reported minimum is itself feasible
    let out2 = t.path().join("plan2");
    let budget = min.to_string();
    let r = restitch(&plan_args(s(&sim), s(&out2), &budget), &[]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let plan = read_json(&out2.join("plan.json"));
    assert_eq!(plan["accounting"]["total"].as_u64(), Some(min));

    // the failed run still leaves a manifest
    let m = read_json(&out.join("run.json"));
    assert_eq!(m["status"], "failed");
    assert!(m["error"]
        .as_str()
        .unwrap()
        .contains("minimum achievable cost"));
}

#[test]
fn contract_violations_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let sim = similarity_file(t.path());
    let out = t.path().join("plan");
    let mut args = plan_args(s(&sim), s(&out), "100000");
    args.extend(["--metric", "watts"]);
    let r = restitch(&args, &[]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8(r.stderr).unwrap();
    assert!(
        err.starts_with("error[config]:") && err.trim_end().lines().count() == 1,
        "{err}"
    );

    let r = restitch(
        &[
            "gen-data",
            "--shape",
            "3x8",
            "--out",
            s(&t.path().join("d")),
        ],
        &[],
    );
    assert_eq!(r.status.code(), Some(2));
    let r = restitch(
        &["gen-data", "--out", s(&t.path().join("d"))],
        &[("RESTITCH_THREADS", "zero")],
    );
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn corrupted_inputs_exit_3() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&[
        "gen-data",
        "--classes",
        "2",
        "--per-class",
        "5",
        "--out",
        s(&data),
    ]);
    let blob = data.join("train_images.f32");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    fs::write(&blob, bytes).unwrap();
    let r = restitch(&["verify", s(&data)], &[]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("error[corruption]:"));

    let r = restitch(
        &[
            "eval",
            "--model",
            s(&t.path().join("missing")),
            "--data",
            s(&data),
        ],
        &[],
    );
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn seed_comes_from_flag_then_config_then_env() {
    let t = tempfile::tempdir().unwrap();
    let seed_of = |dir: &Path| read_json(&dir.join("data.json"))["seed"].as_u64().unwrap();
    let cfg = t.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 11, "per_class": 5, "classes": 2}"#).unwrap();

    let d = t.path().join("env");
    let r = restitch(
        &[
            "gen-data",
            "--classes",
            "2",
            "--per-class",
            "5",
            "--out",
            s(&d),
        ],
        &[("RESTITCH_SEED", "42")],
    );
    assert!(r.status.success());
    assert_eq!(seed_of(&d), 42);

    let d = t.path().join("cfg");
    let r = restitch(
        &["gen-data", "--config", s(&cfg), "--out", s(&d)],
        &[("RESTITCH_SEED", "42")],
    );
    assert!(r.status.success());
    assert_eq!(seed_of(&d), 11);
    assert_eq!(read_json(&d.join("run.json"))["config"]["per-class"], 5);

    let d = t.path().join("flag");
    let r = restitch(
        &[
            "gen-data",
            "--config",
            s(&cfg),
            "--seed",
            "5",
            "--out",
            s(&d),
        ],
        &[("RESTITCH_SEED", "42")],
    );
    assert!(r.status.success());
    assert_eq!(seed_of(&d), 5);
}

#[test]
fn sweep_writes_all_tables() {
    let t = tempfile::tempdir().unwrap();
    let sim = similarity_file(t.path());
    let out = t.path().join("sweep");
    ok(&[
        "sweep",
        "--similarity",
        s(&sim),
        "--front-spec",
        s(&specs().join("toy-small.json")),
        "--back-spec",
        s(&specs().join("toy-large.json")),
        "--budgets",
        "10,5000,100000",
        "--out",
        s(&out),
    ]);
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    assert!(
        sweep.lines().last().unwrap().contains("infeasible"),
        "{sweep}"
    );
    let trade = fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    assert_eq!(trade.lines().count(), 3);
    assert!(trade
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("toy-large,toy-small,"));
    let cands = fs::read_to_string(out.join("candidates.csv")).unwrap();
    // 4x2 interior grid
    assert_eq!(cands.lines().count(), 1 + 4 * 2);
    verify(&out);
}

#[test]
fn live_cka_and_trained_sweep() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path();
    let data = root.join("data");
    ok(&[
        "gen-data",
        "--classes",
        "4",
        "--per-class",
        "20",
        "--out",
        s(&data),
    ]);
    for (spec, out) in [("toy-large.json", "large"), ("toy-small.json", "small")] {
        ok(&[
            "train-base",
            "--spec",
            s(&specs().join(spec)),
            "--data",
            s(&data),
            "--epochs",
            "2",
            "--batch-size",
            "16",
            "--out",
            s(&root.join(out)),
        ]);
    }
    let cka = root.join("cka");
    ok(&[
        "cka",
        "--front-spec",
        s(&root.join("large")),
        "--back-spec",
        s(&root.join("small")),
        "--data",
        s(&data),
        "--batch-size",
        "16",
        "--repeats",
        "2",
        "--out",
        s(&cka),
    ]);
    let sim = read_json(&cka.join("similarity.json"));
    assert_eq!(sim["repeats"], 2);
    assert_eq!(sim["values"].as_array().unwrap().len(), 6);
    assert!(fs::read_to_string(cka.join("heatmap.gp"))
        .unwrap()
        .contains("heatmap.csv"));

    let out = root.join("sweep");
    ok(&[
        "sweep",
        "--similarity",
        s(&cka.join("similarity.json")),
        "--front-spec",
        s(&root.join("large")),
        "--back-spec",
        s(&root.join("small")),
        "--budgets",
        "3000,100000",
        "--train-each",
        "--data",
        s(&data),
        "--epochs",
        "1",
        "--out",
        s(&out),
    ]);
    let cands = fs::read_to_string(out.join("candidates.csv")).unwrap();
    for line in cands.lines().skip(1) {
        let acc: f64 = line.split(',').nth(9).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc), "{line}");
    }
    let trade = fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    assert!(
        trade
            .lines()
            .skip(1)
            .all(|l| !l.split(',').nth(5).unwrap().is_empty()),
        "{trade}"
    );
    verify(&out);
    verify(&cka);
}
