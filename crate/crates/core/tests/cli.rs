//! End-to-end checks of the `ropelab` binary: exit codes, output schemas and
//! determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ropelab::attention::AttentionStack;
use ropelab::diagnostics::CSV_HEADER;
use ropelab::mask::{AttentionPlan, BatchLayout, PlanExport};

fn ropelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ropelab")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 10] = ["--layers", "1", "--heads", "2", "--d-model", "16", "-T", "24", "--num-sequences", "2"];

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&ropelab(&[])), 2);
    assert_eq!(code(&ropelab(&["shift-sweep", "--bogus"])), 2);
    assert_eq!(code(&ropelab(&["shift-sweep", "--policy", "bf15"])), 2);
    assert_eq!(code(&ropelab(&["mask", "--docs", "3,3", "--scheme", "nope"])), 2);
    assert_eq!(code(&ropelab(&["mask"])), 2);
    assert_eq!(code(&ropelab(&["shift-sweep", "--threads", "0"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 1, "delta": 3}"#).unwrap();
    let out = ropelab(&["shift-sweep", "--config", path(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("delta"));
}

#[test]
fn help_and_version_exit_0() {
    let out = ropelab(&["--help"]);
    assert_eq!(code(&out), 0);
    let help = String::from_utf8_lossy(&out.stdout);
    for cmd in ["shift-sweep", "per-token", "length-sweep", "mask", "cost", "pack", "interleave", "selftest"] {
        assert!(help.contains(cmd), "help lists {cmd}");
    }
    assert_eq!(code(&ropelab(&["--version"])), 0);
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    let out = ropelab(&["shift-sweep", "--weights", path(&missing)]);
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty());

    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a container").unwrap();
    assert_eq!(code(&ropelab(&["shift-sweep", "--weights", path(&junk)])), 1);

    // A document longer than the window.
    assert_eq!(code(&ropelab(&["mask", "--docs", "10", "--window", "4"])), 1);
}

#[test]
fn shift_sweep_csv_schema_and_json_mirror() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    let json = dir.path().join("d.json");
    let mut args = vec!["shift-sweep", "--delta1", "0,16,64", "--out", path(&csv), "--json", path(&json)];
    args.extend(SMALL);
    let out = ropelab(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("max D per policy"));

    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 9);
    for r in &rows {
        assert_eq!(r.len(), 7);
        assert_eq!((r[1], r[2], r[5]), ("16", "24", "D"));
        assert!(r[6].parse::<f64>().unwrap() >= 0.0);
    }
    // Equal shifts give exactly zero.
    assert!(rows.iter().filter(|r| r[0] == "16").all(|r| r[6].parse::<f64>().unwrap() == 0.0));

    let mirror: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(mirror["rows"].as_array().unwrap().len(), 9);
    assert_eq!(mirror["rows"][0]["mean_per_token"].as_array().unwrap().len(), 24);
}

#[test]
fn exact_policy_sweep_stays_below_tolerance() {
    let out = ropelab(&["shift-sweep", "--policy", "exact", "--seed", "7", "-T", "256"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let values: Vec<f64> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 19);
    assert!(values.iter().all(|&d| (0.0..=1e-6).contains(&d)), "{values:?}");
}

#[test]
fn per_token_rows_sum_to_d() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    let sweep = dir.path().join("s.csv");
    let mut a = vec!["per-token", "--delta1", "0", "--policy", "fa2-bf16", "--out", path(&csv)];
    a.extend(SMALL);
    assert_eq!(code(&ropelab(&a)), 0);
    let mut b = vec!["shift-sweep", "--delta1", "0", "--policy", "fa2-bf16", "--out", path(&sweep)];
    b.extend(SMALL);
    assert_eq!(code(&ropelab(&b)), 0);

    let text = fs::read_to_string(&csv).unwrap();
    let values: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert!(f[5].starts_with("per_token["));
            f[6].parse().unwrap()
        })
        .collect();
    assert_eq!(values.len(), 24);
    let d: f64 = fs::read_to_string(&sweep).unwrap().lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    let sum: f64 = values.iter().sum();
    assert!((sum - d).abs() <= 1e-12 * d.abs().max(1e-300), "{sum} vs {d}");
}

#[test]
fn length_sweep_respects_max_t() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("l.csv");
    let out = ropelab(&[
        "length-sweep", "--layers", "1", "--heads", "2", "--d-model", "16", "--num-sequences", "2",
        "--lengths", "8,16,32,64", "--max-T", "32", "--policy", "exact,fa2-bf16", "--out", path(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[5] == "D_logit" && r[2].parse::<usize>().unwrap() <= 32));
    assert_eq!(code(&ropelab(&["length-sweep", "--lengths", "64,8"])), 2);
}

#[test]
fn weights_file_matches_random_init() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.bin");
    AttentionStack::init_random(1, 2, 16, 3).unwrap().export(&weights).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let common = ["shift-sweep", "--delta1", "0,8", "-T", "16", "--num-sequences", "1", "--seed", "3"];
    let mut x: Vec<&str> = common.to_vec();
    x.extend(["--layers", "1", "--heads", "2", "--d-model", "16", "--out", path(&a)]);
    let mut y: Vec<&str> = common.to_vec();
    y.extend(["--weights", path(&weights), "--out", path(&b)]);
    assert_eq!(code(&ropelab(&x)), 0);
    assert_eq!(code(&ropelab(&y)), 0);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn mask_plan_export_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let layout = dir.path().join("layout.json");
    fs::write(&layout, r#"{"window": 7, "docs": [{"id": 0, "len": 3}, {"id": 1, "len": 3}], "scheme": "anchor"}"#)
        .unwrap();
    let out = ropelab(&["mask", "--layout", path(&layout)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let export: PlanExport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(export.pair_count, 19);
    assert_eq!(export.position_ids, vec![0, 1, 2, 3, 4, 5, 6]);
    assert_eq!(export.loss_mask, vec![false, true, true, true, true, true, true]);
    let plan = AttentionPlan::from_export(&export).unwrap();
    assert!(plan.allows(6, 0) && !plan.allows(6, 3));

    let out = ropelab(&["mask", "--docs", "3,3", "--scheme", "intra_doc_reset", "--render"]);
    assert_eq!(code(&out), 0);
    let picture = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = picture.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[3], "...#..");
    assert_eq!(lines[5], "...###");
    assert!(String::from_utf8_lossy(&out.stderr).contains("[0, 1, 2, 0, 1, 2]"));
}

#[test]
fn cost_csv_lists_every_scheme() {
    let out = ropelab(&["cost", "--docs", "4,4,4,4"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("scheme,windows,tokens,pair_count,full_causal_pairs,ratio"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.contains(&"anchor,1,17,57,153,0.37254901960784315"));
    assert!(rows.iter().any(|r| r.starts_with("full_causal,1,16,136,136,")));

    let single = String::from_utf8(ropelab(&["cost", "--docs", "8"]).stdout).unwrap();
    assert!(single.lines().skip(1).all(|r| r.ends_with(",1.0")), "{single}");
}

#[test]
fn pack_and_interleave_emit_valid_layouts() {
    let out = ropelab(&["pack", "--docs", "5,9,3", "--window", "8", "--scheme", "anchor_tag"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let windows: Vec<BatchLayout> = serde_json::from_slice(&out.stdout).unwrap();
    assert!(windows.iter().all(|w| w.len() <= 8 && w.has_anchor()));
    let doc_tokens: usize = windows.iter().map(|w| w.document_lengths().values().sum::<usize>()).sum();
    let tags: usize = windows.iter().map(BatchLayout::num_documents).sum();
    assert_eq!(doc_tokens, 17 + tags);

    let run = |seed: &str| ropelab(&["interleave", "--docs", "6,6,6", "--seed", seed]).stdout;
    let a: BatchLayout = serde_json::from_slice(&run("1")).unwrap();
    assert_eq!(a.len(), 19);
    assert_eq!(run("1"), run("1"));
    assert!((2..40).any(|s| run(&s.to_string()) != run("1")));
}

#[test]
fn selftest_reports_pass_lines() {
    let out = ropelab(&["selftest", "--samples", "20000", "--layouts", "50"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS ")).count(), 3);
}
