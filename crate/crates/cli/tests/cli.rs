use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use discgrade::grade::{Assessment, GradeRecord, GraderRole, Item, Round};
use discgrade::io::{write_grades, write_outputs};
use discgrade::ModelOutput;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_discgrade"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["metrics", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["adjudicate", "--grades", p(&dir.path().join("nope.csv")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("adjudicate:"), "{msg}");
}

#[test]
fn one_class_labels_are_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let outputs: Vec<ModelOutput> = (0..4)
        .map(|i| ModelOutput::new(format!("i{i}"), "m", [0.25; 4], BTreeMap::new()).unwrap())
        .collect();
    write_outputs(&d.join("scores.csv"), &outputs).unwrap();
    fs::write(d.join("labels.csv"), "image_id,refer\ni0,1\ni1,1\ni2,1\ni3,1\n").unwrap();
    let out = run(&[
        "metrics",
        "--scores",
        p(&d.join("scores.csv")),
        "--labels",
        p(&d.join("labels.csv")),
        "--out",
        p(&d.join("m")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_then_metrics_brackets_analytic_auc() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = d.join("sim");
    let out = run(&["simulate", "--n-images", "600", "--n-tuning", "200", "--seed", "3", "--out", p(&sim)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let analytic = json(&sim.join("cohort.json"))["analytic_auc"].as_f64().unwrap();

    let met = d.join("met");
    let inputs = ["scores.csv", "truth.csv", "tuning_scores.csv", "tuning_truth.csv"].map(|f| sim.join(f));
    let args = [
        "metrics",
        "--scores",
        p(&inputs[0]),
        "--labels",
        p(&inputs[1]),
        "--tuning-scores",
        p(&inputs[2]),
        "--tuning-labels",
        p(&inputs[3]),
        "--bootstrap-n",
        "500",
        "--seed",
        "3",
        "--out",
        p(&met),
    ];
    assert!(run(&args).status.success());
    let m = json(&met.join("metrics.json"));
    let (lo, hi) = (m["auc"]["lower"].as_f64().unwrap(), m["auc"]["upper"].as_f64().unwrap());
    assert!(lo <= analytic && analytic <= hi, "{lo} {analytic} {hi}");
    assert_eq!(m["provenance"]["config"]["seed"], 3);
    assert_eq!(m["evaluations"].as_array().unwrap().len(), 3);
    for f in ["roc.csv", "roc.svg", "metrics.txt"] {
        assert!(met.join(f).exists(), "{f}");
    }

    let first = fs::read(met.join("metrics.json")).unwrap();
    assert!(run(&args).status.success());
    assert_eq!(first, fs::read(met.join("metrics.json")).unwrap());
}

#[test]
fn consensus_only_log_resolves_in_round_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = r#"{
        "n_images": 50,
        "n_tuning": 10,
        "panel": [
            {"id": "a", "role": "GlaucomaSpecialist", "sens": 1.0, "spec": 1.0, "ungradable_rate": 0.0},
            {"id": "b", "role": "GlaucomaSpecialist", "sens": 1.0, "spec": 1.0, "ungradable_rate": 0.0},
            {"id": "c", "role": "GlaucomaSpecialist", "sens": 1.0, "spec": 1.0, "ungradable_rate": 0.0}
        ]
    }"#;
    fs::write(d.join("spec.json"), spec).unwrap();
    let sim = d.join("sim");
    let out = run(&["simulate", "--spec", p(&d.join("spec.json")), "--out", p(&sim)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let adj = d.join("adj");
    assert!(run(&["adjudicate", "--grades", p(&sim.join("panel_grades.csv")), "--out", p(&adj)])
        .status
        .success());
    let summary = &json(&adj.join("adjudication.json"))["summary"];
    assert_eq!(summary["consensus_round1"], 50);
    let reference = fs::read_to_string(adj.join("reference.csv")).unwrap();
    assert_eq!(reference.lines().skip(1).filter(|l| l.contains(",consensus_round1,")).count(), 50);
}

#[test]
fn grader_matching_the_algorithm_has_unit_p_values() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let refer = [true, true, true, false, false, false, true, false];
    let mut labels = String::from("image_id,refer\n");
    let mut outputs = Vec::new();
    let mut log = Vec::new();
    for (i, &r) in refer.iter().enumerate() {
        let id = format!("img{i}");
        labels.push_str(&format!("{id},{}\n", u8::from(r)));
        let probs = if r { [0.0, 0.1, 0.4, 0.5] } else { [0.6, 0.3, 0.1, 0.0] };
        outputs.push(ModelOutput::new(id.as_str(), "m", probs, BTreeMap::new()).unwrap());
        // grader agrees with the algorithm except on the last two images,
        // where both make the same mistake
        let call = if i >= 6 { !r } else { r };
        let level = if call { 3 } else { 2 };
        log.push(
            GradeRecord::new(id.as_str(), "g1", GraderRole::Optometrist, Round::One, 1)
                .unwrap()
                .with(Item::Gon, Assessment::Graded(level))
                .unwrap(),
        );
        if i >= 6 {
            let flipped = if r { [0.6, 0.3, 0.1, 0.0] } else { [0.0, 0.1, 0.4, 0.5] };
            *outputs.last_mut().unwrap() = ModelOutput::new(id.as_str(), "m", flipped, BTreeMap::new()).unwrap();
        }
    }
    fs::write(d.join("labels.csv"), labels).unwrap();
    write_outputs(&d.join("scores.csv"), &outputs).unwrap();
    write_grades(&d.join("readers.csv"), &log).unwrap();
    let out = run(&[
        "compare-graders",
        "--scores",
        p(&d.join("scores.csv")),
        "--labels",
        p(&d.join("labels.csv")),
        "--readers",
        p(&d.join("readers.csv")),
        "--threshold",
        "0.5",
        "--mode",
        "ungradable-as-refer",
        "--out",
        p(&d.join("cmp")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let c = json(&d.join("cmp/grader_comparison.json"));
    let g = &c["graders"][0];
    assert_eq!(g["p_sens"], 1.0);
    assert_eq!(g["p_spec"], 1.0);
    assert_eq!(g["sens"]["k"], 3);
    assert!(d.join("cmp/grader_comparison.txt").exists());
    assert!(d.join("cmp/roc_graders.svg").exists());
}
