//! Contradiction statistics for the fixture corpus against brute-force pair
//! enumeration straight from the raw fixture files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use personamem::config::Config;
use personamem::pipeline::Setting;
use personamem::report::StatsRow;
use personamem::run::{cmd_run, cmd_stats, RunRequest};
use personamem_core::memory::Policy;
use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn read_json(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join(name)).unwrap()).unwrap()
}

/// (dialogue, session, speaker, text) for every annotation in the corpus.
fn annotations() -> Vec<(String, u32, String, String)> {
    let text = std::fs::read_to_string(fixtures().join("corpus.jsonl")).unwrap();
    let mut out = Vec::new();
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let session = v["session"].as_u64().unwrap() as u32;
        for turn in v["turns"].as_array().unwrap() {
            for p in turn["personas"].as_array().into_iter().flatten() {
                out.push((
                    v["dialogue_id"].as_str().unwrap().to_string(),
                    session,
                    turn["speaker"].as_str().unwrap().to_string(),
                    p.as_str().unwrap().to_string(),
                ));
            }
        }
    }
    out
}

fn delta_table() -> impl Fn(&str, &str) -> f64 {
    let v = read_json("mock_nli.json");
    let default = v["default_delta"].as_f64().unwrap();
    let mut pairs = BTreeMap::new();
    for p in v["pairs"].as_array().unwrap() {
        let (a, b) = (
            p["a"].as_str().unwrap().to_string(),
            p["b"].as_str().unwrap().to_string(),
        );
        pairs.insert((a.clone(), b.clone()), p["delta"].as_f64().unwrap());
        pairs.insert((b, a), p["delta"].as_f64().unwrap());
    }
    let mut directed = BTreeMap::new();
    for p in v["directed"].as_array().unwrap() {
        directed.insert(
            (
                p["premise"].as_str().unwrap().to_string(),
                p["hypothesis"].as_str().unwrap().to_string(),
            ),
            p["delta"].as_f64().unwrap(),
        );
    }
    move |p: &str, h: &str| {
        let key = (p.to_string(), h.to_string());
        if p == h {
            0.0
        } else {
            directed
                .get(&key)
                .or_else(|| pairs.get(&key))
                .copied()
                .unwrap_or(default)
        }
    }
}

/// With no removal policy the memory after session s holds every annotation
/// of sessions 1..=s, so every same-speaker pair among them is scored.
fn oracle_gold_none() -> BTreeMap<u32, (u64, u64)> {
    let delta = delta_table();
    let all = annotations();
    let mut out = BTreeMap::new();
    for s in 1..=5 {
        let mut intra = 0;
        let mut inter = 0;
        let seen: Vec<_> = all.iter().filter(|a| a.1 <= s).collect();
        for (i, p) in seen.iter().enumerate() {
            for q in &seen[i + 1..] {
                if p.0 != q.0 || p.2 != q.2 {
                    continue;
                }
                if delta(&p.3, &q.3).max(delta(&q.3, &p.3)) >= 0.8 {
                    if p.1 == q.1 {
                        intra += 1;
                    } else {
                        inter += 1;
                    }
                }
            }
        }
        out.insert(s, (intra, inter));
    }
    out
}

fn run_fixture(policies: Vec<Policy>) -> (tempfile::TempDir, Vec<StatsRow>) {
    let tmp = tempfile::tempdir().unwrap();
    let config = Config::load(&fixtures().join("config.toml")).unwrap();
    let summary = cmd_run(&RunRequest {
        config,
        settings: vec![Setting::Gold, Setting::CometExp],
        policies,
        dry_run: true,
        out: Some(tmp.path().join("run")),
    })
    .unwrap();
    let rows = cmd_stats(&summary.dir).unwrap();
    (tmp, rows)
}

#[test]
fn gold_none_matches_brute_force() {
    let (_tmp, rows) = run_fixture(vec![Policy::None]);
    let oracle = oracle_gold_none();
    let got: BTreeMap<u32, (u64, u64)> = rows
        .iter()
        .filter(|r| r.setting == "gold" && r.policy == "none")
        .map(|r| (r.session, (r.intra_session, r.inter_session)))
        .collect();
    assert_eq!(got, oracle);
    assert!(oracle.values().any(|(intra, inter)| *intra > 0 && *inter > 0));
    assert_eq!(oracle[&1].1, 0, "one session cannot have inter-session pairs");
    for r in &rows {
        assert_eq!(r.total, r.intra_session + r.inter_session);
    }
}

#[test]
fn expanded_memory_has_at_least_as_many_contradictions() {
    let (_tmp, rows) = run_fixture(vec![Policy::None]);
    let total = |setting: &str, s: u32| {
        rows.iter()
            .find(|r| r.setting == setting && r.session == s)
            .map(|r| r.total)
            .unwrap()
    };
    for s in 1..=5 {
        assert!(total("comet-exp", s) >= total("gold", s), "session {s}");
    }
    assert!((1..=5).any(|s| total("comet-exp", s) > total("gold", s)));
}

#[test]
fn refine_never_costs_more_calls_than_all() {
    let tmp = tempfile::tempdir().unwrap();
    let config = Config::load(&fixtures().join("config.toml")).unwrap();
    let summary = cmd_run(&RunRequest {
        config,
        settings: vec![Setting::Gold, Setting::CometExp],
        policies: vec![Policy::Refine, Policy::All],
        dry_run: true,
        out: Some(tmp.path().join("run")),
    })
    .unwrap();
    let mut reader = csv::Reader::from_path(summary.dir.join("cost_ratio.csv")).unwrap();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let ours: u64 = rec[2].parse().unwrap();
        let all: u64 = rec[3].parse().unwrap();
        assert!(ours <= all, "{rec:?}");
        rows += 1;
    }
    assert_eq!(rows, 10);
}
