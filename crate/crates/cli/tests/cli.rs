use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: [&str; 9] = [
    "model.omics.d_pre=6",
    "model.omics.experts=2",
    "model.fusion.d_model=8",
    "model.fusion.heads=2",
    "model.fusion.ff_hidden=8",
    "model.fusion.encoder_layers=1",
    "model.head.bins=6",
    "model.head.gate_hidden=8",
    "model.head.risk_hidden=8",
];

fn survmix(args: &[&str], sets: &[String]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_survmix"));
    cmd.args(args);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_sets(data: &Path, extra: &[&str]) -> Vec<String> {
    let mut sets: Vec<String> = SMALL.iter().map(|s| s.to_string()).collect();
    sets.push(format!("data.dir=\"{}\"", data.display()));
    sets.extend(extra.iter().map(|s| s.to_string()));
    sets
}

fn simulate(dir: &Path, n: usize, extra: &[&str]) -> PathBuf {
    let out = dir.join("cohort");
    let mut sets = vec![
        format!("simulation.n={n}"),
        "simulation.dims.clinical=3".into(),
        "simulation.dims.paraclinical=3".into(),
        "simulation.dims.demographic=2".into(),
    ];
    sets.extend(extra.iter().map(|s| s.to_string()));
    ok(survmix(&["simulate", "--seed", "3", "--out", p(&out)], &sets));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_owned).collect())
        .collect()
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    ok(survmix(
        &["train", "--seed", "3", "--out", p(out)],
        &small_sets(data, extra),
    ));
}

#[test]
fn uncensored_simulation_reports_every_event() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), 100, &["simulation.censor_rate=0"]);
    let summary = read_json(&data.join("summary.json"));
    assert_eq!(summary["n"], 100.0);
    assert_eq!(summary["events"], 100.0);
}

#[test]
fn simulation_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(&dir.path().join("a"), 80, &[]);
    let b = simulate(&dir.path().join("b"), 80, &[]);
    for name in [
        "clinical.csv",
        "paraclinical.csv",
        "demographic.csv",
        "omics_1.csv",
        "truth.csv",
        "summary.json",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn realized_censoring_tracks_request() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), 2000, &["simulation.censor_rate=0.4"]);
    let rate = read_json(&data.join("summary.json"))["censor_rate"].as_f64().unwrap();
    assert!((rate - 0.4).abs() <= 0.05, "censor rate {rate}");
}

#[test]
fn untrained_checkpoint_round_trips_through_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), 150, &[]);
    let zero = ["train.phase1.epochs=0", "train.phase2.epochs=0"];
    let run = dir.path().join("run");
    train(&data, &run, &zero);
    let metrics = read_json(&run.join("metrics.json"));
    assert!(metrics["best_phase1_epoch"].is_null());
    let ctd = metrics["validation"]["ctd"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ctd));

    let again = dir.path().join("again");
    train(&data, &again, &zero);
    assert_eq!(
        fs::read(run.join("model.ckpt")).unwrap(),
        fs::read(again.join("model.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(run.join("metrics.json")).unwrap(),
        fs::read(again.join("metrics.json")).unwrap()
    );

    let sets = small_sets(&data, &[]);
    ok(survmix(&["eval", "--out", p(&run)], &sets));
    let report = read_json(&run.join("evaluation.json"));
    let text = fs::read_to_string(run.join("evaluation.json")).unwrap();
    let order: Vec<usize> = [
        "\"n\"",
        "\"events\"",
        "\"ctd\"",
        "\"comparable_pairs\"",
        "\"ibs\"",
        "\"grid\"",
        "\"brier\"",
    ]
    .iter()
    .map(|k| text.find(k).unwrap())
    .collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(report["n"], 150);
    assert_eq!(rows(&run.join("brier.csv")).len(), 100);
    assert_eq!(rows(&run.join("curves.csv")).len(), 150 * 100);

    ok(survmix(&["embed", "--out", p(&run)], &sets));
    let embed = rows(&run.join("embed.csv"));
    assert_eq!(embed.len(), 3 * 150);
    for space in ["X", "Z-logits", "Phi-logits"] {
        assert_eq!(embed.iter().filter(|r| r[1] == space).count(), 150);
    }
    assert_eq!(
        read_json(&run.join("embed.json"))["spaces"].as_array().unwrap().len(),
        3
    );
}

#[test]
fn predictions_are_monotone_and_override_ignores_stored_arm() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), 150, &[]);
    let run = dir.path().join("run");
    train(&data, &run, &["train.phase1.epochs=3", "train.phase2.epochs=3"]);
    ok(survmix(
        &["predict", "--out", p(&run)],
        &small_sets(&data, &["predict.treatment=0"]),
    ));
    let first = rows(&run.join("predictions.csv"));
    let mut by_curve: std::collections::BTreeMap<(String, String), Vec<f64>> = Default::default();
    for r in &first {
        by_curve
            .entry((r[0].clone(), r[1].clone()))
            .or_default()
            .push(r[3].parse().unwrap());
    }
    for (key, s) in &by_curve {
        assert_eq!(s[0], 1.0, "{key:?}");
        assert!(s.windows(2).all(|w| w[1] <= w[0] && w[1] >= 0.0), "{key:?}");
    }
    let treated = by_curve.keys().filter(|k| k.1 == "1").count();
    assert_eq!(by_curve.keys().filter(|k| k.1 == "0").count(), 150);
    assert!(treated > 0);

    let flipped = dir.path().join("flipped");
    fs::create_dir_all(&flipped).unwrap();
    for entry in fs::read_dir(&data).unwrap() {
        let path = entry.unwrap().path();
        fs::copy(&path, flipped.join(path.file_name().unwrap())).unwrap();
    }
    let mut r = csv::Reader::from_path(data.join("clinical.csv")).unwrap();
    let mut w = csv::Writer::from_path(flipped.join("clinical.csv")).unwrap();
    w.write_record(r.headers().unwrap()).unwrap();
    for rec in r.records() {
        let mut rec: Vec<String> = rec.unwrap().iter().map(str::to_owned).collect();
        rec[3] = if rec[3] == "1" { "0".into() } else { "1".into() };
        w.write_record(&rec).unwrap();
    }
    w.flush().unwrap();
    let out2 = dir.path().join("run2");
    let sets = small_sets(
        &flipped,
        &[
            "predict.treatment=0",
            &format!("checkpoint=\"{}\"", run.join("model.ckpt").display()),
        ],
    );
    ok(survmix(&["predict", "--out", p(&out2)], &sets));
    let arm0 = |rs: &[Vec<String>]| -> Vec<Vec<String>> { rs.iter().filter(|r| r[1] == "0").cloned().collect() };
    assert_eq!(arm0(&first), arm0(&rows(&out2.join("predictions.csv"))));
}

#[test]
fn single_response_group_covers_everyone() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), 120, &[]);
    let run = dir.path().join("run");
    let extra = [
        "model.head.m_groups=1",
        "bounds.m_min=1",
        "train.phase1.epochs=2",
        "train.phase2.epochs=2",
    ];
    train(&data, &run, &extra);
    ok(survmix(&["phenotype", "--out", p(&run)], &small_sets(&data, &extra)));
    let report = read_json(&run.join("phenotype.json"));
    let groups = report["response_groups"].as_array().unwrap();
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0]["count"], 120);
    assert_eq!(groups[0]["ids"].as_array().unwrap().len(), 120);
    let table = rows(&run.join("phenotype.csv"));
    assert_eq!(table.len(), 120);
    assert!(table.iter().all(|r| r[2] == "1"));
}

#[test]
fn training_fit_is_not_worse_than_validation() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), 300, &[]);
    let run = dir.path().join("run");
    train(&data, &run, &["train.phase1.epochs=30"]);
    let val = read_json(&run.join("metrics.json"))["validation"]["ctd"]
        .as_f64()
        .unwrap();
    ok(survmix(
        &["eval", "--seed", "3", "--out", p(&run)],
        &small_sets(&data, &["data.subset=train"]),
    ));
    let fit = read_json(&run.join("evaluation.json"))["ctd"].as_f64().unwrap();
    assert!(fit >= val - 0.05, "train {fit} vs validation {val}");
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = survmix(&["train"], &["modle.head.bins=3".into()]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("modle.head.bins"));

    let bad_doc = dir.path().join("bad.json");
    fs::write(&bad_doc, r#"{"version": 1, "model": {"head": {"binz": 4}}}"#).unwrap();
    assert_eq!(survmix(&["train", "--config", p(&bad_doc)], &[]).status.code(), Some(2));

    let data = simulate(dir.path(), 120, &[]);
    let run = dir.path().join("run");
    train(&data, &run, &["train.phase1.epochs=0", "train.phase2.epochs=0"]);
    let other = simulate(&dir.path().join("other"), 120, &["simulation.dims.paraclinical=2"]);
    let mismatch = survmix(&["eval", "--out", p(&run)], &small_sets(&other, &[]));
    assert_eq!(mismatch.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("paraclinical"));

    let missing = survmix(
        &["eval", "--out", p(&dir.path().join("nowhere"))],
        &small_sets(&data, &[]),
    );
    assert_eq!(missing.status.code(), Some(3));

    let diverge = survmix(
        &["train", "--out", p(&dir.path().join("diverge"))],
        &small_sets(&data, &["train.phase1.optimizer.lr=1e300", "train.phase1.epochs=5"]),
    );
    assert_eq!(
        diverge.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&diverge.stderr)
    );
}
