use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use freqscan_harness::config::OUTPUT_ROOT_ENV;
use freqscan_harness::invariants::CaseResult;
use freqscan_harness::records::read_records;
use freqscan_harness::scan_report::parse_csv;
use freqscan_harness::train::MetricsReport;

const TINY: &[&str] = &[
    "-s",
    "train.dataset_size=10",
    "-s",
    "train.epochs=1",
    "-s",
    "train.batch_size=4",
    "-s",
    "model.widths=[8, 8, 8, 8]",
    "-s",
    "model.depths=[1, 1, 1, 1]",
    "-s",
    "model.d_state=2",
    "-s",
    "model.fpn_width=8",
];

fn freqscan(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqscan")).env(OUTPUT_ROOT_ENV, root).args(args).output().unwrap()
}

fn with_tiny<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(TINY).chain(tail).copied().collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn scan_report_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = freqscan(tmp.path(), &["scan-report", "--size", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = parse_csv(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(rows.len(), 1 + 2 + 4 + 4 + 4 + 2 + 4);
    assert!(rows.iter().any(|r| r.variant.name() == "raster-bi-dir" && r.mean_rank_gap == 2.5));
    let out = tmp.path().join("loc.csv");
    assert!(freqscan(tmp.path(), &["scan-report", "--size", "8", "--out", out.to_str().unwrap()]).status.success());
    assert_eq!(parse_csv(&fs::read_to_string(out).unwrap()).unwrap().len(), rows.len());
    assert!(!freqscan(tmp.path(), &["scan-report", "--size", "6"]).status.success());
}

#[test]
fn invalid_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    for bad in ["train.image_size=100", "model.scan=spiral", "optim.lr=0", "train.bogus=1", "nodot=3"] {
        let o = freqscan(tmp.path(), &["train", "-s", bad]);
        assert!(!o.status.success(), "{bad} accepted");
        assert!(stderr(&o).starts_with("error:"), "{bad}: {}", stderr(&o));
    }
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[model]\nwidths = [8, 8]\n").unwrap();
    assert!(!freqscan(tmp.path(), &["train", "-c", cfg.to_str().unwrap()]).status.success());
    assert!(!freqscan(tmp.path(), &["eval", "-s", "output.dir=\"missing\""]).status.success());
}

#[test]
fn train_then_eval_share_metric_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let o = freqscan(root, &with_tiny(&["train", "--quiet"], &["-s", "output.dir=\"run\""]));
    assert!(o.status.success(), "{}", stderr(&o));
    let run = root.join("run");
    let keys = |p: &Path| -> Vec<String> {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    };
    let o = freqscan(root, &with_tiny(&["eval", "--split", "val"], &["-s", "output.dir=\"run\""]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(keys(&run.join("metrics.json")), keys(&run.join("metrics_val.json")));
    let gt = read_records(&run.join("gt_val.jsonl")).unwrap();
    assert!(!gt.is_empty() && gt.iter().all(|r| r.score == 1.0));
    read_records(&run.join("predictions_val.jsonl")).unwrap();

    // ground truth scored against itself
    let gtp = run.join("gt_val.jsonl");
    let o = freqscan(
        root,
        &["eval", "-s", "output.dir=\"self\"", "--predictions", gtp.to_str().unwrap(), "--gt", gtp.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: MetricsReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((rep.metrics.map, rep.metrics.mar), (1.0, 1.0));

    // a checkpoint from a different architecture is refused
    let o = freqscan(
        root,
        &with_tiny(&["eval"], &["-s", "output.dir=\"run\"", "-s", "model.widths=[8, 8, 8, 16]"]),
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));
}

#[test]
fn erf_maps_are_normalised_and_distinct() {
    let tmp = tempfile::tempdir().unwrap();
    let o = freqscan(tmp.path(), &with_tiny(&["erf"], &["-s", "output.dir=\"e\""]));
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("e").join("erf");
    let mut grids = Vec::new();
    for v in ["hilbert-uni-dir", "hilbert-bi-dir", "hilbert-four-dir1"] {
        let text = fs::read_to_string(dir.join(format!("erf_{v}.csv"))).unwrap();
        let vals: Vec<f64> = text.lines().flat_map(|l| l.split(',').map(|x| x.parse::<f64>().unwrap())).collect();
        assert_eq!(vals.len(), 64 * 64);
        assert!(vals.iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(vals.iter().cloned().fold(0.0, f64::max), 1.0);
        let pgm = fs::read(dir.join(format!("erf_{v}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n64 64\n255\n") && pgm.len() == 13 + 64 * 64);
        grids.push(vals);
    }
    for i in 0..3 {
        for j in i + 1..3 {
            let l1: f64 = grids[i].iter().zip(&grids[j]).map(|(a, b)| (a - b).abs()).sum();
            assert!(l1 > 0.0);
        }
    }
}

#[test]
fn gen_data_writes_images_and_records() {
    let tmp = tempfile::tempdir().unwrap();
    let o = freqscan(tmp.path(), &["gen-data", "-s", "train.dataset_size=20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let data = tmp.path().join("data");
    for (split, n) in [("train", 14), ("test", 4), ("val", 2)] {
        let pgms = fs::read_dir(data.join(split)).unwrap().filter(|e| {
            e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")
        });
        assert_eq!(pgms.count(), n);
        let recs = read_records(&data.join(split).join("gt.jsonl")).unwrap();
        assert!(recs.len() >= n);
    }
}

#[test]
fn invariants_report_covers_every_module() {
    let tmp = tempfile::tempdir().unwrap();
    let json = tmp.path().join("inv.json");
    let o = freqscan(tmp.path(), &["invariants", "--json", json.to_str().unwrap()]);
    let cases: Vec<CaseResult> = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    for suite in
        ["tensor-autodiff", "hilbert-scan", "ssm-core", "freq-sep", "hsfa-block", "vssm-block", "detect-fcos", "harness-cli"]
    {
        assert!(cases.iter().any(|c| c.suite == suite), "{suite}");
    }
    let failed: Vec<&CaseResult> = cases.iter().filter(|c| !c.passed()).collect();
    assert_eq!(o.status.success(), failed.is_empty());
    // the Hilbert-versus-raster locality ordering is the one known failure
    assert!(failed.iter().all(|c| c.case.starts_with("Hilbert rank gap below raster")), "{failed:?}");
}

#[test]
fn ablate_runs_every_row() {
    let tmp = tempfile::tempdir().unwrap();
    let o = freqscan(
        tmp.path(),
        &with_tiny(&["ablate", "--quiet"], &["-s", "output.dir=\"abl\"", "-s", "train.eval_val_each_epoch=false"]),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("abl/ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 10);
    for r in &rows {
        for k in ["run", "split", "AP50", "AP60", "AP70", "mAP", "AR50", "AR60", "AR70", "mAR"] {
            assert!(r.get(k).is_some(), "{k}");
        }
    }
    assert!(fs::read_to_string(tmp.path().join("abl/ablation.txt")).unwrap().lines().count() == 11);
}
