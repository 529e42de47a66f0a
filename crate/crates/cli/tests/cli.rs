use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use featmoments::synthgen::TrajectorySpec;
use featmoments::tensor_store::{
    write_tensor_file, Dims, FeatureTensor, ManifestEntry, RunManifest,
};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_featmoments"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(!stderr.contains("panicked"), "{stderr}");
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A run with one tensor per value list, all shaped T=1, B=1, C=len.
fn write_run(dir: &Path, epochs: &[Vec<f64>], scores: Option<&[f64]>) {
    let mut m = RunManifest::new(dir);
    for (i, values) in epochs.iter().enumerate() {
        let name = format!("ep{i}.fst");
        let t = FeatureTensor::from_f64(Dims::new(1, 1, values.len()), values.clone()).unwrap();
        write_tensor_file(&t, &dir.join(&name)).unwrap();
        let mut e = ManifestEntry::new(i as u64, name);
        if let Some(s) = scores {
            e.scores = Some([("spider".to_string(), s[i])].into());
        }
        m.push(e).unwrap();
    }
    let mut f = fs::File::create(dir.join("manifest.jsonl")).unwrap();
    m.write_to(&mut f).unwrap();
}

fn write_spec(dir: &Path, spec: &TrajectorySpec) -> std::path::PathBuf {
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string(spec).unwrap()).unwrap();
    path
}

#[test]
fn stats_rows_per_epoch() {
    let d = tempfile::tempdir().unwrap();
    let spec = TrajectorySpec::linear(3, (0.0, 1.0), (0.0, 0.3), 0.0, 1);
    let spec_path = write_spec(d.path(), &spec);
    let run_dir = d.path().join("run");
    assert!(run(&[
        "synth",
        p(&spec_path),
        "--dims",
        "2x12x16",
        "--out-dir",
        p(&run_dir)
    ])
    .status
    .success());
    let o = run(&["stats", p(&run_dir.join("manifest.jsonl"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "epoch,kurtosis,skewness,degenerate_frames");
}

#[test]
fn stats_missing_tensor_names_epoch() {
    let d = tempfile::tempdir().unwrap();
    write_run(d.path(), &[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 4.0]], None);
    fs::remove_file(d.path().join("ep1.fst")).unwrap();
    let o = run(&["stats", p(&d.path().join("manifest.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch 1"), "{}", stderr(&o));
}

#[test]
fn stats_pearson_definition() {
    let d = tempfile::tempdir().unwrap();
    write_run(d.path(), &[vec![1.0, 2.0, 3.0, 4.0, 5.0]], None);
    let out = d.path().join("stats.csv");
    let o = run(&[
        "stats",
        p(&d.path().join("manifest.jsonl")),
        "--definition",
        "pearson-beta2",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(out).unwrap(),
        "epoch,kurtosis,skewness,degenerate_frames\n0,1.7,0,0\n"
    );
    let o = run(&[
        "stats",
        p(&d.path().join("manifest.jsonl")),
        "--definition",
        "kurtosis-ish",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_lenient_skips_non_finite() {
    let d = tempfile::tempdir().unwrap();
    let t = FeatureTensor::from_f32(
        Dims::new(2, 1, 4),
        vec![1.0, 2.0, 3.0, 4.0, f32::NAN, 0.0, 1.0, 2.0],
    )
    .unwrap();
    write_tensor_file(&t, &d.path().join("ep0.fst")).unwrap();
    fs::write(
        d.path().join("manifest.jsonl"),
        "{\"epoch\":0,\"tensor\":\"ep0.fst\"}\n",
    )
    .unwrap();
    let m = d.path().join("manifest.jsonl");
    assert_eq!(run(&["stats", p(&m)]).status.code(), Some(2));
    let o = run(&["stats", p(&m), "--lenient", "--definition", "pearson-beta2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("\n0,1.64,0,0\n"), "{}", stdout(&o));
}

fn write_corpus(dir: &Path, lines: &[&str]) -> std::path::PathBuf {
    let path = dir.join("corpus.jsonl");
    fs::write(&path, lines.join("\n")).unwrap();
    path
}

const IDENTITY: [&str; 2] = [
    r#"{"id":"a","hyp":"a dog barks loudly outside","refs":["a dog barks loudly outside"]}"#,
    r#"{"id":"b","hyp":"rain falls on a tin roof","refs":["rain falls on a tin roof"]}"#,
];

#[test]
fn eval_identity_corpus() {
    let d = tempfile::tempdir().unwrap();
    let c = write_corpus(d.path(), &IDENTITY);
    let o = run(&["eval", p(&c), "--metrics", "bleu4,rouge_l"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    assert_eq!(v, serde_json::json!({"bleu4": 1.0, "rouge_l": 1.0}));
}

#[test]
fn eval_spider_with_and_without_spice() {
    let d = tempfile::tempdir().unwrap();
    let c = write_corpus(d.path(), &IDENTITY);
    let v = json(&run(&["eval", p(&c), "--metrics", "cider,spider"]));
    assert_eq!(v["spider_lite"], v["cider"]);
    assert!(v.get("spider").is_none());

    let spice = d.path().join("spice.json");
    fs::write(&spice, r#"{"a": 0.2, "b": 0.4}"#).unwrap();
    let v = json(&run(&[
        "eval",
        p(&c),
        "--metrics",
        "cider,spider",
        "--spice",
        p(&spice),
    ]));
    let cider = v["cider"].as_f64().unwrap();
    assert!((v["spider"].as_f64().unwrap() - (cider + 0.3) / 2.0).abs() < 1e-12);
    assert!(v.get("spider_lite").is_none());

    fs::write(&spice, r#"{"a": 0.2}"#).unwrap();
    let o = run(&["eval", p(&c), "--metrics", "spider", "--spice", p(&spice)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("\"b\""), "{}", stderr(&o));
}

#[test]
fn eval_malformed_line_reports_line_number() {
    let d = tempfile::tempdir().unwrap();
    let c = write_corpus(d.path(), &[IDENTITY[0], "{not json"]);
    let o = run(&["eval", p(&c)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let o = run(&["eval", p(&c), "--metrics", "meteor"]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_stats(dir: &Path, kurt: &[f64], skew: &[f64]) -> std::path::PathBuf {
    let path = dir.join("stats.csv");
    let mut s = String::from("epoch,kurtosis,skewness,degenerate_frames\n");
    for (i, (k, sk)) in kurt.iter().zip(skew).enumerate() {
        s.push_str(&format!("{i},{k},{sk},0\n"));
    }
    fs::write(&path, s).unwrap();
    path
}

#[test]
fn correlate_aligns_epochs() {
    let d = tempfile::tempdir().unwrap();
    let k: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let s: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
    let stats = write_stats(d.path(), &k, &s);
    let scores = d.path().join("scores.csv");
    fs::write(
        &scores,
        "epoch,spider,cider\n0,0.1,1\n2,0.2,0.5\n4,0.3,0.7\n",
    )
    .unwrap();
    let v = json(&run(&["correlate", p(&stats), p(&scores)]));
    assert_eq!(v["kurtosis"]["spearman"], 1.0);
    assert_eq!(v["kurtosis"]["n_points"], 3);
    assert_eq!(v["skewness"]["n_points"], 3);
    let v = json(&run(&[
        "correlate",
        p(&stats),
        p(&scores),
        "--metric",
        "cider",
        "--method",
        "pearson",
    ]));
    assert!(v["kurtosis"]["pearson"].as_f64().unwrap() < 0.0);
    assert!(v["kurtosis"].get("spearman").is_none());

    fs::write(&scores, "epoch,spider\n0,0.1\n").unwrap();
    let o = run(&["correlate", p(&stats), p(&scores)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("only 1 epochs"), "{}", stderr(&o));
}

#[test]
fn stopcheck_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let stats = write_stats(d.path(), &[5.0, 4.0, 3.0, 2.0, 2.02, 1.98, 2.01], &[1.0; 7]);
    let o = run(&["stopcheck", p(&stats), "--epsilon", "0.05", "--window", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&o), serde_json::json!({"stop": true, "epoch": 6}));

    let steps: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let stats = write_stats(d.path(), &steps, &steps);
    let o = run(&["stopcheck", p(&stats)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json(&o), serde_json::json!({"stop": false}));

    fs::write(&stats, "epoch,kurtosis\n0,abc\n").unwrap();
    assert_eq!(run(&["stopcheck", p(&stats)]).status.code(), Some(2));
    let stats = write_stats(d.path(), &[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]);
    assert_eq!(
        run(&["stopcheck", p(&stats), "--window", "1"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn config_supplies_defaults_and_flags_win() {
    let d = tempfile::tempdir().unwrap();
    let stats = write_stats(d.path(), &[5.0, 4.0, 3.0, 2.0, 2.02, 1.98, 2.01], &[1.0; 7]);
    let cfg = d.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"epsilon": 0.05, "window": 3, "metrics": "bleu1"}"#,
    )
    .unwrap();
    let o = run(&["--config", p(&cfg), "stopcheck", p(&stats)]);
    assert_eq!(json(&o), serde_json::json!({"stop": true, "epoch": 6}));
    let o = run(&["--config", p(&cfg), "stopcheck", p(&stats), "--window", "4"]);
    assert_eq!(o.status.code(), Some(1));

    fs::write(&cfg, "[1, 2]").unwrap();
    assert_eq!(
        run(&["--config", p(&cfg), "stopcheck", p(&stats)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn rank_orders_runs() {
    let d = tempfile::tempdir().unwrap();
    let heavy = d.path().join("heavy");
    let light = d.path().join("light");
    fs::create_dir_all(&heavy).unwrap();
    fs::create_dir_all(&light).unwrap();
    write_run(
        &heavy,
        &[vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 10.0]],
        None,
    );
    write_run(
        &light,
        &[vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]],
        None,
    );
    let o = run(&[
        "rank",
        p(&light.join("manifest.jsonl")),
        p(&heavy.join("manifest.jsonl")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    assert_eq!(v["statistic"], "kurtosis");
    assert_eq!(v["ranking"][0]["encoder"], "heavy");
    assert_eq!(v["ranking"][1]["encoder"], "light");
    assert_eq!(v["ranking"][0]["rank"], 1);

    let o = run(&["rank", p(&light.join("manifest.jsonl"))]);
    assert_eq!(json(&o)["ranking"].as_array().unwrap().len(), 1);

    let o = run(&[
        "rank",
        p(&light.join("manifest.jsonl")),
        p(&d.path().join("missing/manifest.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["rank", p(&light.join("manifest.jsonl")), "--at", "7"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_stats_correlate_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let spec = TrajectorySpec::linear(10, (0.0, 3.0), (0.0, 1.0), 0.0, 8);
    let spec_path = write_spec(d.path(), &spec);
    let run_dir = d.path().join("run");
    let o = run(&["synth", p(&spec_path), "--out-dir", p(&run_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stats = d.path().join("stats.csv");
    assert!(run(&[
        "stats",
        p(&run_dir.join("manifest.jsonl")),
        "--out",
        p(&stats)
    ])
    .status
    .success());
    let v = json(&run(&[
        "correlate",
        p(&stats),
        p(&run_dir.join("scores.csv")),
    ]));
    assert_eq!(v["kurtosis"]["spearman"], 1.0);
    assert_eq!(v["skewness"]["spearman"], 1.0);
}

#[test]
fn synth_rejects_bad_specs() {
    let d = tempfile::tempdir().unwrap();
    let spec = d.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"epochs":2,"kurtosis_path":[0],"skewness_path":[0,0]}"#,
    )
    .unwrap();
    let o = run(&["synth", p(&spec), "--out-dir", p(&d.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(
        &spec,
        r#"{"epochs":1,"kurtosis_path":[-2.5],"skewness_path":[0]}"#,
    )
    .unwrap();
    let o = run(&["synth", p(&spec), "--out-dir", p(&d.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("infeasible"), "{}", stderr(&o));
    let o = run(&[
        "synth",
        p(&spec),
        "--dims",
        "3x0x4",
        "--out-dir",
        p(&d.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_twenty_epochs() {
    let d = tempfile::tempdir().unwrap();
    let spec = TrajectorySpec::linear(20, (0.0, 2.0), (0.0, 0.5), 0.05, 2);
    let spec_path = write_spec(d.path(), &spec);
    let run_dir = d.path().join("run");
    assert!(run(&[
        "synth",
        p(&spec_path),
        "--dims",
        "4x12x32",
        "--out-dir",
        p(&run_dir)
    ])
    .status
    .success());
    let out = d.path().join("report");
    let o = run(&["report", p(&run_dir), "--out-dir", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let index: Value =
        serde_json::from_str(&fs::read_to_string(out.join("index.json")).unwrap()).unwrap();
    let mut files = vec![
        index["stats"].as_str().unwrap(),
        index["scores"].as_str().unwrap(),
    ];
    files.push(index["correlation"].as_str().unwrap());
    files.extend(
        index["charts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_str().unwrap()),
    );
    for f in files {
        assert!(out.join(f).is_file(), "{f}");
    }
    let svg = fs::read_to_string(out.join("kurtosis.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    for e in 0..20 {
        assert!(svg.contains(&format!(">{e}</text>")), "epoch {e}");
    }
    assert!(!svg.contains(">20</text>"));

    let again = d.path().join("report2");
    assert!(run(&["report", p(&run_dir), "--out-dir", p(&again)])
        .status
        .success());
    for f in [
        "stats.csv",
        "scores.json",
        "correlation.json",
        "kurtosis.svg",
        "skewness.svg",
        "index.json",
    ] {
        assert_eq!(
            fs::read(out.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn report_without_scores() {
    let d = tempfile::tempdir().unwrap();
    write_run(
        d.path(),
        &[vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 9.0]],
        None,
    );
    let out = d.path().join("report");
    let o = run(&["report", p(d.path()), "--out-dir", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(out.join("skewness.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    let index: Value =
        serde_json::from_str(&fs::read_to_string(out.join("index.json")).unwrap()).unwrap();
    assert!(index["correlation"].is_null());
    assert!(!out.join("correlation.json").exists());
}

#[test]
fn malformed_inputs_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let junk = d.path().join("junk");
    fs::write(&junk, [0xffu8, 0x00, 0x13, 0x37]).unwrap();
    for args in [
        vec!["stats", p(&junk)],
        vec!["eval", p(&junk)],
        vec!["correlate", p(&junk), p(&junk)],
        vec!["stopcheck", p(&junk)],
        vec!["rank", p(&junk)],
        vec!["synth", p(&junk), "--out-dir", p(d.path())],
        vec!["report", p(d.path())],
        vec!["stats"],
        vec!["frobnicate"],
    ] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    let fst = d.path().join("bad.fst");
    fs::write(&fst, b"FSTF\x01\x00\x01\x03").unwrap();
    fs::write(
        d.path().join("manifest.jsonl"),
        "{\"epoch\":0,\"tensor\":\"bad.fst\"}\n",
    )
    .unwrap();
    let o = run(&["stats", p(&d.path().join("manifest.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch 0"), "{}", stderr(&o));
}
