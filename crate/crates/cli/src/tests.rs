use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use budgetfusion::formats::{parse_metric_table, parse_series_table, read_bfem, write_bfem};
use budgetfusion::types::{EmbeddingVector, MetricKind};
use tempfile::TempDir;

use super::run_cli;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn p(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> u8 {
        let log = self.p("runs.log");
        let mut full = vec!["budgetfusion", "--run-log", log.as_str()];
        full.extend_from_slice(args);
        run_cli(full)
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.path(rel)).unwrap()
    }

    fn write_bfem(&self, rel: &str, records: &[(u64, Vec<f64>)]) {
        let recs: Vec<(u64, EmbeddingVector)> =
            records.iter().map(|(id, v)| (*id, EmbeddingVector::new(v.clone()).unwrap())).collect();
        let mut buf = Vec::new();
        write_bfem(&mut buf, recs[0].1.dim(), &recs).unwrap();
        fs::write(self.path(rel), buf).unwrap();
    }

    /// Fake extractor: 8-d embedding from character statistics.
    fn fake_extractor(&self, body: &str) -> String {
        let script = format!(
            r#"#!/usr/bin/env python3
import json, struct, sys
if sys.argv[1:] != ["embed", "--stdin-jsonl"]:
    sys.exit(3)
{body}
"#
        );
        let path = self.path("extractor.py");
        fs::write(&path, script).unwrap();
        fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
        path.to_string_lossy().into_owned()
    }
}

const EMBED_BODY: &str = r#"
rows = [json.loads(l) for l in sys.stdin if l.strip()]
out = bytearray(b"BFEM") + struct.pack("<III", 1, len(rows), 8)
for r in rows:
    t = r["text"]
    v = [((sum(ord(c) * (k + 1) for c in t) % 97) / 97.0) - 0.5 for k in range(8)]
    out += struct.pack("<Q", r["id"]) + struct.pack("<8f", *v)
sys.stdout.buffer.write(bytes(out))
"#;

#[test]
fn grid_prints_paper_grid() {
    let s = Sandbox::new();
    assert_eq!(s.run(&["grid", "--max-i", "8", "--extras", "22,27,42", "--include-one", "--out", &s.p("g.json")]), 0);
    assert_eq!(s.read("g.json"), "[1,2,3,5,9,17,22,27,33,42,65,129]\n");
    assert_eq!(s.run(&["grid", "--max-i", "3", "--extras", "", "--no-include-one", "--out", &s.p("g2.json")]), 0);
    assert_eq!(s.read("g2.json"), "[2,3,5]\n");
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let s = Sandbox::new();
    fs::write(s.path("cfg.json"), r#"{"grid": {"max_i": 4, "extras": []}, "rng_seed": 5}"#).unwrap();
    assert_eq!(s.run(&["--config", &s.p("cfg.json"), "grid", "--out", &s.p("a.json")]), 0);
    assert_eq!(s.read("a.json"), "[1,2,3,5,9]\n");
    assert_eq!(s.run(&["--config", &s.p("cfg.json"), "grid", "--max-i", "2", "--out", &s.p("b.json")]), 0);
    assert_eq!(s.read("b.json"), "[1,2,3]\n");
}

#[test]
fn exit_codes() {
    let s = Sandbox::new();
    assert_eq!(s.run(&["grid", "--bogus"]), 1);
    assert_eq!(s.run(&["frobnicate"]), 1);
    assert_eq!(s.run(&["train", "--metric", "FID", "--out", &s.p("x")]), 1);
    assert_eq!(s.run(&["--help"]), 0);
    assert_eq!(s.run(&["--threads", "0", "grid"]), 1);
    // missing input file
    assert_eq!(s.run(&["dedup", "--embeddings", &s.p("nope.bfem"), "--out", &s.p("k.txt")]), 2);
    assert_eq!(s.run(&["--config", &s.p("nope.json"), "grid"]), 2);
    // validation
    s.write_bfem("e.bfem", &[(1, vec![1.0, 0.0])]);
    assert_eq!(s.run(&["dedup", "--embeddings", &s.p("e.bfem"), "--threshold", "1.5", "--out", &s.p("k.txt")]), 1);
    fs::write(s.path("bad.json"), r#"{"grid": {"max_i": "eight"}}"#).unwrap();
    assert_eq!(s.run(&["--config", &s.p("bad.json"), "grid"]), 1);
    fs::write(s.path("typo.json"), r#"{"gird": {}}"#).unwrap();
    assert_eq!(s.run(&["--config", &s.p("typo.json"), "grid"]), 1);
    fs::write(s.path("broken.bfem"), b"BFEM\x01").unwrap();
    assert_eq!(s.run(&["dedup", "--embeddings", &s.p("broken.bfem"), "--out", &s.p("k.txt")]), 1);
}

#[test]
fn every_run_appends_provenance() {
    let s = Sandbox::new();
    assert_eq!(s.run(&["--seed", "9", "grid", "--out", &s.p("g.json")]), 0);
    assert_eq!(s.run(&["grid", "--max-i", "3", "--out", &s.p("g.json")]), 0);
    assert_eq!(s.run(&["dedup", "--embeddings", &s.p("missing.bfem")]), 2);
    let lines: Vec<serde_json::Value> = s.read("runs.log").lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["seed"], 9);
    assert_eq!(lines[0]["command"], "grid");
    assert_eq!(lines[0]["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(lines[2]["exit_code"], 2);
    let h0 = lines[0]["config_sha256"].as_str().unwrap();
    assert_eq!(h0.len(), 64);
    assert_ne!(h0, lines[1]["config_sha256"].as_str().unwrap(), "grid override changes the effective config");
}

#[test]
fn dedup_keeps_first_of_each_near_duplicate_group() {
    let s = Sandbox::new();
    s.write_bfem("e.bfem", &[(3, vec![1.0, 0.01, 0.0]), (1, vec![1.0, 0.0, 0.0]), (2, vec![0.0, 1.0, 0.0]), (4, vec![0.0, 0.9, 0.1])]);
    assert_eq!(s.run(&["dedup", "--embeddings", &s.p("e.bfem"), "--out", &s.p("kept.txt")]), 0);
    assert_eq!(s.read("kept.txt"), "1\n2\n");

    fs::write(s.path("p.jsonl"), "{\"id\":1,\"text\":\"a\"}\n{\"id\":2,\"text\":\"b\"}\n{\"id\":3,\"text\":\"c\"}\n{\"id\":4,\"text\":\"d\"}\n").unwrap();
    assert_eq!(s.run(&["dedup", "--embeddings", &s.p("e.bfem"), "--prompts", &s.p("p.jsonl"), "--out", &s.p("kept.jsonl")]), 0);
    assert_eq!(s.read("kept.jsonl"), "{\"id\":1,\"text\":\"a\"}\n{\"id\":2,\"text\":\"b\"}\n");
}

fn save_png(path: &Path, f: impl Fn(u32, u32) -> u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::GrayImage::from_fn(16, 12, |x, y| image::Luma([f(x, y)])).save(path).unwrap();
}

#[test]
fn lsnr_scores_an_image_tree() {
    let s = Sandbox::new();
    save_png(&s.path("img/1/0/1.png"), |x, y| if (x + y) % 2 == 0 { 255 } else { 0 });
    save_png(&s.path("img/1/0/2.png"), |_, _| 128);
    save_png(&s.path("img/2/0/1.png"), |x, _| (x * 16) as u8);
    save_png(&s.path("img/2/0/2.png"), |_, _| 7);
    fs::write(s.path("img/notes.txt"), "ignored").unwrap();
    assert_eq!(s.run(&["lsnr", "--images", &s.p("img"), "--out", &s.p("m.csv")]), 0);
    let rows = parse_metric_table(fs::File::open(s.path("m.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.metric == MetricKind::Lsnr && r.seed == 0));
    let at = |p: u64, t: u32| rows.iter().find(|r| r.prompt_id == p && r.timestep == t).unwrap().value;
    assert_eq!(at(1, 2), 1.0);
    assert_eq!(at(2, 2), 1.0);
    assert!(at(1, 1) < 0.2, "checkerboard is all detail");
    assert!(at(2, 1) > at(1, 1));

    assert_eq!(s.run(&["lsnr", &s.p("img/1/0/2.png"), "--out", &s.p("one.csv")]), 0);
    let text = s.read("one.csv");
    assert!(text.starts_with("path,l_snr_db,score\n"));
    assert!(text.trim_end().ends_with(",inf,1"), "{text}");
    assert_eq!(s.run(&["lsnr", "--out", &s.p("none.csv")]), 1);
}

fn tree_digest(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_is_idempotent_and_read_only() {
    let s = Sandbox::new();
    assert_eq!(s.run(&["--seed", "3", "synth", "--n", "10", "--dim", "8", "--out", &s.p("syn")]), 0);
    let before = tree_digest(&s.path("syn"));
    for out in ["d1", "d2"] {
        let code = s.run(&[
            "--seed", "3", "dataset", "--metrics", &s.p("syn/metrics.csv"), "--embeddings", &s.p("syn/embeddings.bfem"),
            "--prompts", &s.p("syn/prompts.jsonl"), "--dedup", "--split-fraction", "0.7", "--out", &s.p(out),
        ]);
        assert_eq!(code, 0);
    }
    assert_eq!(tree_digest(&s.path("syn")), before);
    for f in ["series.csv", "split.json", "grid.json", "prompts.jsonl"] {
        assert_eq!(fs::read(s.path(&format!("d1/{f}"))).unwrap(), fs::read(s.path(&format!("d2/{f}"))).unwrap(), "{f}");
    }
    let series = parse_series_table(fs::File::open(s.path("d1/series.csv")).unwrap()).unwrap();
    assert_eq!(series.len(), 30);
    assert!(series.iter().all(|x| x.is_dense() && x.last_step() == 129));
    let split: serde_json::Value = serde_json::from_str(&s.read("d1/split.json")).unwrap();
    assert_eq!(split["train"].as_array().unwrap().len(), 7);
}

#[test]
fn dataset_refuses_holes() {
    let s = Sandbox::new();
    assert_eq!(s.run(&["synth", "--n", "3", "--dim", "4", "--seeds", "1", "--out", &s.p("syn")]), 0);
    let text = s.read("syn/metrics.csv");
    let mut lines: Vec<&str> = text.lines().collect();
    lines.remove(5);
    fs::write(s.path("holey.csv"), lines.join("\n") + "\n").unwrap();
    assert_eq!(s.run(&["dataset", "--metrics", &s.p("holey.csv"), "--out", &s.p("d")]), 1);
}

/// Trains a tiny model on `dim`-wide synthetic prompts; returns the checkpoint dir.
fn tiny_checkpoints(s: &Sandbox, dim: &str) -> String {
    assert_eq!(s.run(&["--seed", "1", "synth", "--n", "6", "--dim", dim, "--out", &s.p("syn")]), 0);
    assert_eq!(s.run(&["--seed", "1", "dataset", "--metrics", &s.p("syn/metrics.csv"), "--out", &s.p("data")]), 0);
    let code = s.run(&[
        "--seed", "1", "train", "--dataset", &s.p("data"), "--embeddings", &s.p("syn/embeddings.bfem"), "--hidden", "3",
        "--embed-dim", "4", "--epochs", "1", "--out", &s.p("ckpt"),
    ]);
    assert_eq!(code, 0);
    s.p("ckpt")
}

#[test]
fn extractor_bridge_matches_precomputed_embeddings() {
    let s = Sandbox::new();
    let ckpt = tiny_checkpoints(&s, "8");
    let fake = s.fake_extractor(EMBED_BODY);

    let code = s.run(&[
        "suggest", "--checkpoints", &ckpt, "--prompt-text", "a red bicycle", "--prompt-text", "two cats on a sofa",
        "--extractor", &fake, "--out", &s.p("via_text.jsonl"),
    ]);
    assert_eq!(code, 0);
    let lines: Vec<serde_json::Value> =
        s.read("via_text.jsonl").lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["prompt_id"], 1);
    assert_eq!(lines[1]["prompt_id"], 2);
    for l in &lines {
        let t = l["t_star"].as_u64().unwrap();
        assert!((1..=129).contains(&t));
        let per = l["per_metric"].as_object().unwrap();
        assert_eq!(per.len(), 3);
        assert_eq!(per.values().map(|p| p["t"].as_u64().unwrap()).max(), Some(t));
    }

    // Same vectors through a file give the same suggestions.
    let out = std::process::Command::new(&fake)
        .args(["embed", "--stdin-jsonl"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut c| {
            use std::io::Write;
            c.stdin.take().unwrap().write_all(b"{\"id\":1,\"text\":\"a red bicycle\"}\n{\"id\":2,\"text\":\"two cats on a sofa\"}\n")?;
            c.wait_with_output()
        })
        .unwrap();
    assert_eq!(read_bfem(&out.stdout[..]).unwrap().records.len(), 2);
    fs::write(s.path("pre.bfem"), &out.stdout).unwrap();
    let code = s.run(&["suggest", "--checkpoints", &ckpt, "--prompt-embedding", &s.p("pre.bfem"), "--out", &s.p("via_file.jsonl")]);
    assert_eq!(code, 0);
    assert_eq!(s.read("via_text.jsonl"), s.read("via_file.jsonl"));

    fs::write(s.path("p.jsonl"), "{\"id\":1,\"text\":\"a red bicycle\"}\n{\"id\":2,\"text\":\"two cats on a sofa\"}\n").unwrap();
    let code = s.run(&["predict", "--checkpoints", &ckpt, "--prompts", &s.p("p.jsonl"), "--extractor", &fake, "--out", &s.p("pred.csv")]);
    assert_eq!(code, 0);
    assert_eq!(parse_series_table(fs::File::open(s.path("pred.csv")).unwrap()).unwrap().len(), 6);
}

#[test]
fn extractor_failures() {
    let s = Sandbox::new();
    let ckpt = tiny_checkpoints(&s, "8");
    let args = |fake: &str, out: &str| {
        vec![
            "suggest".to_string(), "--checkpoints".into(), ckpt.clone(), "--prompt-text".into(), "x".into(),
            "--extractor".into(), fake.to_string(), "--out".into(), s.p(out),
        ]
    };
    let run = |a: Vec<String>| s.run(&a.iter().map(String::as_str).collect::<Vec<_>>());

    let crash = s.fake_extractor("sys.stdin.read()\nsys.exit(1)");
    assert_eq!(run(args(&crash, "a.jsonl")), 2);

    let wrong_id = s.fake_extractor(
        "sys.stdin.read()\nsys.stdout.buffer.write(b'BFEM' + struct.pack('<III', 1, 1, 8) + struct.pack('<Q', 42) + struct.pack('<8f', *[0.1] * 8))",
    );
    assert_eq!(run(args(&wrong_id, "b.jsonl")), 1);

    let garbage = s.fake_extractor("sys.stdin.read()\nsys.stdout.write('not bfem')");
    assert_eq!(run(args(&garbage, "c.jsonl")), 1);

    assert_eq!(run(args(&s.p("no-such-extractor"), "d.jsonl")), 2);
    assert_eq!(s.run(&["suggest", "--checkpoints", &ckpt, "--prompt-text", "x", "--out", &s.p("e.jsonl")]), 1);
}

#[test]
fn checkpoint_dimension_mismatch_is_rejected() {
    let s = Sandbox::new();
    let ckpt = tiny_checkpoints(&s, "8");
    s.write_bfem("narrow.bfem", &[(1, vec![0.5; 4])]);
    assert_eq!(s.run(&["suggest", "--checkpoints", &ckpt, "--prompt-embedding", &s.p("narrow.bfem"), "--out", &s.p("o.jsonl")]), 1);
}

#[test]
fn desk_pipeline_reaches_small_validation_error() {
    let s = Sandbox::new();
    let steps: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--n".into(), "16".into(), "--out".into(), s.p("syn")],
        vec!["dataset".into(), "--metrics".into(), s.p("syn/metrics.csv"), "--out".into(), s.p("data")],
        vec![
            "train".into(), "--dataset".into(), s.p("data"), "--embeddings".into(), s.p("syn/embeddings.bfem"),
            "--hidden".into(), "16".into(), "--embed-dim".into(), "16".into(), "--epochs".into(), "25".into(),
            "--out".into(), s.p("ckpt"),
        ],
        vec![
            "predict".into(), "--checkpoints".into(), s.p("ckpt"), "--prompt-embedding".into(), s.p("syn/embeddings.bfem"),
            "--split".into(), s.p("data/split.json"), "--out".into(), s.p("pred.csv"),
        ],
        vec![
            "suggest".into(), "--checkpoints".into(), s.p("ckpt"), "--prompt-embedding".into(), s.p("syn/embeddings.bfem"),
            "--split".into(), s.p("data/split.json"), "--out".into(), s.p("sugg.jsonl"),
        ],
        vec![
            "eval".into(), "--suggestions".into(), s.p("sugg.jsonl"), "--truth".into(), s.p("syn/truth.csv"),
            "--predicted".into(), s.p("pred.csv"), "--seconds-per-step".into(), "0.1".into(), "--out".into(), s.p("eval"),
        ],
    ];
    for step in &steps {
        let mut args = vec!["--seed", "7"];
        args.extend(step.iter().map(String::as_str));
        assert_eq!(s.run(&args), 0, "{step:?}");
    }
    let report: serde_json::Value = serde_json::from_str(&s.read("eval/report.json")).unwrap();
    let maes = report["prediction_mae"].as_object().unwrap();
    assert_eq!(maes.len(), 3);
    for (m, v) in maes {
        let mean = v["mean"].as_f64().unwrap();
        assert!(mean < 0.05, "{m} held-out MAE {mean}");
    }
    let n_eval = serde_json::from_str::<serde_json::Value>(&s.read("data/split.json")).unwrap()["eval"].as_array().unwrap().len();
    assert_eq!(report["n_prompts"].as_u64().unwrap() as usize, n_eval);
    assert_eq!(report["quality_source"]["ground_truth"].as_u64().unwrap() as usize, n_eval);
    let reference = &report["conditions"]["REFERENCE"];
    assert_eq!(reference["mean_steps"], 65.0);
    assert!((reference["seconds_per_image"].as_f64().unwrap() - 6.5).abs() < 1e-9);

    let summary: serde_json::Value = serde_json::from_str(&s.read("ckpt/training_summary.json")).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 3);
    let log = s.read("ckpt/training_log.csv");
    assert_eq!(log.lines().count(), 1 + 3 * 25);
    assert!(s.read("eval/efficiency.csv").starts_with("prompt_id,condition,steps,eta_tflops,metric,quality,efficiency\n"));

    // Sparse plateau evaluation and ground-truth suggestions also run.
    assert_eq!(s.run(&["suggest", "--series", &s.p("syn/truth.csv"), "--sparse", "--out", &s.p("truth_sugg.jsonl")]), 0);
    assert_eq!(s.read("truth_sugg.jsonl").lines().count(), 16);
}
