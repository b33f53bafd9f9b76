use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mage_core::costmodel::{step_latency, CostParams, StepKind};
use mage_core::decoder::{DenoiseTrace, StepRecord};
use mage_core::plan::{LayerPlan, PlanSource, SelectionPlan};
use mage_core::trace::write_jsonl;

fn mage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mage"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = mage(args);
    assert!(
        out.status.success(),
        "mage {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn exact_summary_has_empty_recall() {
    let d = tempfile::tempdir().unwrap();
    ok(&["simulate", "--method", "exact", "--blocks", "2", "--prompt-len", "32", "--out", &path(d.path(), "o")]);
    let summary = fs::read_to_string(d.path().join("o/summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("method,K,tokens_per_step,mean_recall,modeled_step_latency"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "exact");
    assert_eq!(row[3], "");
    assert!(row[4].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn plan_dump_respects_kmin() {
    let d = tempfile::tempdir().unwrap();
    ok(&["simulate", "--method", "mage", "--k", "32", "--kmin", "8", "--out", &path(d.path(), "o")]);
    let text = fs::read_to_string(d.path().join("o/plans.txt")).unwrap();
    let mut planned = 0;
    for chunk in text.split("## ").filter(|c| !c.is_empty()) {
        let body = chunk.split_once('\n').unwrap().1;
        let plan = SelectionPlan::from_text(body).unwrap();
        for l in plan.planned_layers() {
            assert!(plan.layers[l].budget >= 8);
            planned += 1;
        }
    }
    assert!(planned > 0);
}

#[test]
fn config_file_and_flag_override() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    fs::write(&cfg, "method = \"window\"\nk = 12\nprompt_len = 40\nnum_blocks = 1\nseed = 5\n").unwrap();
    ok(&["simulate", "--config", cfg.to_str().unwrap(), "--k", "20", "--out", &path(d.path(), "o")]);
    let summary = fs::read_to_string(d.path().join("o/summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("window,20,1,"));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = mage(&["simulate", "--method", "nope", "--out", &path(d.path(), "o")]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "unknown_key = 3\n").unwrap();
    let out = mage(&["simulate", "--config", cfg.to_str().unwrap(), "--out", &path(d.path(), "o")]);
    assert_eq!(out.status.code(), Some(2));
    let out = mage(&["simulate", "--k", "4", "--kmin", "8", "--out", &path(d.path(), "o")]);
    assert_eq!(out.status.code(), Some(2));
    let junk = d.path().join("junk.jsonl");
    fs::write(&junk, "not json\n").unwrap();
    let out = mage(&["analyze", "--trace", junk.to_str().unwrap(), "--analysis", "recall", "--out", &path(d.path(), "r.csv")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));
}

#[test]
fn truncated_binary_trace_names_missing_bytes() {
    let d = tempfile::tempdir().unwrap();
    let bin = path(d.path(), "t.bin");
    ok(&["trace", "export", "--method", "exact", "--prompt-len", "16", "--out", &bin]);
    let bytes = fs::read(&bin).unwrap();
    let cut = d.path().join("cut.bin");
    fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    let out = mage(&["analyze", "--trace", cut.to_str().unwrap(), "--analysis", "recall", "--out", &path(d.path(), "r.csv")]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("10 missing"), "{err}");
    assert!(!d.path().join("r.csv").exists());
}

#[test]
fn self_recall_first_row_is_one() {
    let d = tempfile::tempdir().unwrap();
    let bin = path(d.path(), "t.bin");
    ok(&["trace", "export", "--method", "mage", "--blocks", "2", "--prompt-len", "48", "--out", &bin]);
    for (trace, k) in [(bin.clone(), "8"), (path(d.path(), "o/trace.jsonl"), "32")] {
        if trace.ends_with("jsonl") {
            ok(&["simulate", "--method", "tidal", "--prompt-len", "48", "--out", &path(d.path(), "o")]);
        }
        let csv = path(d.path(), "recall.csv");
        ok(&["analyze", "--trace", &trace, "--analysis", "recall", "--k", k, "--out", &csv]);
        let text = fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,K,recall,label"));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!((first[0], first[2]), ("1", "1.000000"));
    }
}

#[test]
fn constant_oracle_trace_recalls_one() {
    let d = tempfile::tempdir().unwrap();
    let oracle = SelectionPlan {
        source: PlanSource::Oracle,
        context_len: 20,
        exact_prefix: 1,
        layers: vec![
            LayerPlan {
                budget: 20,
                heads: vec![(0..20).collect()],
            },
            LayerPlan {
                budget: 3,
                heads: vec![vec![2, 7, 11]],
            },
        ],
    };
    let synthetic = DenoiseTrace {
        block: 0,
        k: 3,
        steps: (1..=4).map(|t| StepRecord::synthetic(t, 20, Some(oracle.clone()))).collect(),
        built_plan: None,
        union_stats: None,
        attention: Vec::new(),
    };
    let mut lines = Vec::new();
    write_jsonl(&mut lines, "synthetic", &[synthetic]).unwrap();
    let trace = d.path().join("const.jsonl");
    fs::write(&trace, lines).unwrap();
    let csv = path(d.path(), "r.csv");
    ok(&["analyze", "--trace", trace.to_str().unwrap(), "--analysis", "recall", "--out", &csv]);
    let text = fs::read_to_string(&csv).unwrap();
    let recalls: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(recalls, vec!["1.000000"; 4]);
}

#[test]
fn single_cell_sweep_matches_step_latency() {
    let d = tempfile::tempdir().unwrap();
    let out = path(d.path(), "c");
    ok(&["cost", "--contexts", "16384", "--budgets", "2048", "--out", &out]);
    let text = fs::read_to_string(d.path().join("c/breakdown.csv")).unwrap();
    let p = CostParams::default();
    for kind in StepKind::all() {
        let want = step_latency(&p, 16384, 2048, kind).unwrap().total;
        let line = text
            .lines()
            .find(|l| l.starts_with(&format!("16384,2048,{},total,wall,", kind.as_str())))
            .unwrap();
        let got: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((got - want).abs() < 1e-6, "{kind:?}: {got} vs {want}");
    }
    let amort = fs::read_to_string(d.path().join("c/amortization.csv")).unwrap();
    assert!(amort.starts_with("context_len,K,baseline,baseline_step,first_step,rest_step,break_even\n"));
}

#[test]
fn default_sweep_speedup_increases() {
    let d = tempfile::tempdir().unwrap();
    ok(&["cost", "--out", &path(d.path(), "c")]);
    let text = fs::read_to_string(d.path().join("c/breakdown.csv")).unwrap();
    let totals = |method: &str| -> Vec<f64> {
        text.lines()
            .filter(|l| l.contains(&format!(",{method},total,wall,")))
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect()
    };
    let exact = totals("exact");
    let rest = totals("mage_rest");
    let speedup: Vec<f64> = exact.iter().zip(&rest).map(|(e, r)| e / r).collect();
    assert_eq!(speedup.len(), 4);
    assert!(speedup.windows(2).all(|w| w[1] > w[0]), "{speedup:?}");
}

#[test]
fn no_break_even_sentinel() {
    let d = tempfile::tempdir().unwrap();
    let params = d.path().join("p.toml");
    // with free memory traffic and compute a sparse step is no faster than an exact one
    fs::write(&params, "bandwidth = 1e300\ncompute_rate = 1e300\nother_per_layer = 0.0\n").unwrap();
    ok(&["cost", "--params", params.to_str().unwrap(), "--contexts", "4096", "--budgets", "256", "--out", &path(d.path(), "c")]);
    let amort = fs::read_to_string(d.path().join("c/amortization.csv")).unwrap();
    let exact_row = amort.lines().find(|l| l.contains(",exact,")).unwrap();
    assert!(exact_row.ends_with(",no-break-even"), "{amort}");
}

#[test]
fn ingest_then_analyze() {
    let d = tempfile::tempdir().unwrap();
    let bin = path(d.path(), "t.bin");
    ok(&["trace", "export", "--method", "quest", "--blocks", "2", "--prompt-len", "40", "--out", &bin]);
    let jsonl = path(d.path(), "t.jsonl");
    ok(&["trace", "ingest", "--input", &bin, "--k", "8", "--out", &jsonl]);
    let a = path(d.path(), "a.csv");
    let b = path(d.path(), "b.csv");
    ok(&["analyze", "--trace", &bin, "--analysis", "skew", "--k", "8", "--out", &a]);
    ok(&["analyze", "--trace", &jsonl, "--analysis", "skew", "--out", &b]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(fs::read_to_string(&a).unwrap().starts_with("layer,step_bucket,value\n"));
}
