//! Run artifacts: metric, cost and contradiction CSVs plus JSON summaries.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use personamem_core::contradiction::ContradictionStats;
use personamem_core::memory::Policy;
use personamem_core::metrics::{call_ratio, BleuAggregation, MetricAccumulator, MetricSummary, SessionCost};
use personamem_core::refinery::StrategyCounts;
use serde::{Deserialize, Serialize};

use crate::config::Prices;
use crate::pipeline::{FilterCounts, JobKey, JobResult, Setting};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionAggregate {
    pub dialogues: u64,
    pub metrics: MetricAccumulator,
    pub over_length: u64,
    pub cost: SessionCost,
    pub refine_pairs: u64,
    pub stats: ContradictionStats,
    pub graph_nodes: u64,
    pub graph_edges: u64,
    pub memory_size: u64,
    pub removal_mismatches: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregate {
    pub sessions: BTreeMap<(JobKey, u32), SessionAggregate>,
    pub strategies: BTreeMap<JobKey, StrategyCounts>,
    pub filter: BTreeMap<JobKey, FilterCounts>,
    pub evaluated: BTreeMap<(JobKey, u32), bool>,
}

pub fn aggregate(results: &[JobResult]) -> Aggregate {
    let mut agg = Aggregate::default();
    for r in results {
        *agg.strategies.entry(r.key).or_default() += r.strategies;
        *agg.filter.entry(r.key).or_default() += r.filter;
        for s in &r.sessions {
            let a = agg.sessions.entry((r.key, s.session)).or_default();
            a.dialogues += 1;
            a.metrics.merge(&s.metrics);
            a.over_length += s.over_length;
            a.cost += s.cost;
            a.refine_pairs += s.refine_pairs;
            a.stats += s.stats;
            a.graph_nodes += s.graph_nodes as u64;
            a.graph_edges += s.graph_edges as u64;
            a.memory_size += s.memory_size as u64;
            a.removal_mismatches += u64::from(s.removal_matches_graph == Some(false));
            agg.evaluated.insert((r.key, s.session), s.evaluated);
        }
    }
    agg
}

fn csv_writer(path: &Path) -> std::io::Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

fn io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e.to_string())
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

/// One row per setting × policy × session × metric.
pub fn write_metrics(path: &Path, agg: &Aggregate, bleu: BleuAggregation) -> std::io::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["setting", "policy", "session", "metric", "value", "n", "degenerate"])
        .map_err(io)?;
    for ((key, session), a) in &agg.sessions {
        if !agg.evaluated[&(*key, *session)] {
            continue;
        }
        let m = a.metrics.summary(bleu);
        for (name, value) in [("bleu1", m.bleu1), ("rouge1", m.rouge1), ("rougeL", m.rouge_l)] {
            w.write_record([
                key.setting.as_str(),
                key.policy.as_str(),
                &session.to_string(),
                name,
                &f6(value),
                &m.n.to_string(),
                &m.degenerate.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()
}

fn row_label(key: JobKey) -> String {
    let base = match key.setting {
        Setting::Gold => "GOLD",
        Setting::CometExp => "COMET-EXP",
        Setting::NoMemory => return "No Memory".into(),
    };
    match key.policy {
        Policy::None => base.into(),
        Policy::NliRemove => format!("{base} + NLI-remove"),
        Policy::NliRecent => format!("{base} + NLI-recent"),
        Policy::Refine => format!("{base} + refine"),
        Policy::All => format!("{base} + ALL"),
    }
}

/// Results grid: one row per setting/policy, three columns (B-1, R-1, R-L,
/// in percent) per evaluated session.
pub fn write_table(path: &Path, agg: &Aggregate, bleu: BleuAggregation) -> std::io::Result<()> {
    let mut sessions: Vec<u32> = agg
        .evaluated
        .iter()
        .filter(|(_, e)| **e)
        .map(|((_, s), _)| *s)
        .collect();
    sessions.sort_unstable();
    sessions.dedup();
    let mut keys: Vec<JobKey> = agg.sessions.keys().map(|(k, _)| *k).collect();
    keys.dedup();
    let order = |k: &JobKey| {
        let setting = match k.setting {
            Setting::NoMemory => 0,
            Setting::Gold => 1,
            Setting::CometExp => 2,
        };
        let policy = match k.policy {
            Policy::None => 0,
            Policy::NliRemove => 1,
            Policy::NliRecent => 2,
            Policy::Refine => 3,
            Policy::All => 4,
        };
        (setting, policy)
    };
    keys.sort_by_key(order);
    let mut w = csv_writer(path)?;
    let mut header = vec!["row".to_string()];
    for s in &sessions {
        for m in ["B-1", "R-1", "R-L"] {
            header.push(format!("s{s} {m}"));
        }
    }
    w.write_record(&header).map_err(io)?;
    for key in keys {
        let mut row = vec![row_label(key)];
        for s in &sessions {
            match agg.sessions.get(&(key, *s)) {
                Some(a) => {
                    let m: MetricSummary = a.metrics.summary(bleu);
                    for v in [m.bleu1, m.rouge1, m.rouge_l] {
                        row.push(format!("{:.2}", v * 100.0));
                    }
                }
                None => row.extend(["", "", ""].map(String::from)),
            }
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush()
}

pub fn cost_usd(cost: &SessionCost, prices: &Prices) -> f64 {
    let chat = cost.refine + cost.generation + cost.commonsense;
    prices.chat.chat_cost(&chat) + prices.embedding.chat_cost(&cost.embedding)
}

pub fn write_cost(path: &Path, agg: &Aggregate, prices: &Prices) -> std::io::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "setting",
        "policy",
        "session",
        "dialogues",
        "refine_pairs",
        "refine_pairs_per_dialogue",
        "refine_requests",
        "rg_requests",
        "nli_requests",
        "nli_batches",
        "embed_texts",
        "embed_requests",
        "commonsense_requests",
        "prompt_tokens",
        "completion_tokens",
        "usd",
    ])
    .map_err(io)?;
    for ((key, session), a) in &agg.sessions {
        let c = &a.cost;
        let chat = c.refine + c.generation + c.commonsense;
        w.write_record([
            key.setting.as_str().to_string(),
            key.policy.as_str().to_string(),
            session.to_string(),
            a.dialogues.to_string(),
            a.refine_pairs.to_string(),
            f6(a.refine_pairs as f64 / a.dialogues.max(1) as f64),
            c.refine.calls.to_string(),
            c.generation.calls.to_string(),
            c.nli.items.to_string(),
            c.nli.calls.to_string(),
            c.embedding.items.to_string(),
            c.embedding.calls.to_string(),
            c.commonsense.calls.to_string(),
            (chat.prompt_tokens + c.embedding.prompt_tokens).to_string(),
            chat.completion_tokens.to_string(),
            f6(cost_usd(c, prices)),
        ])
        .map_err(io)?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub setting: Setting,
    pub session: u32,
    pub refine_pairs: u64,
    pub all_pairs: u64,
    pub ratio: Option<f64>,
}

/// Refinement calls of refining every edge versus graph refinement.
pub fn ratios(agg: &Aggregate) -> Vec<RatioRow> {
    let mut rows = Vec::new();
    for ((key, session), a) in &agg.sessions {
        if key.policy != Policy::Refine {
            continue;
        }
        let all_key = JobKey {
            setting: key.setting,
            policy: Policy::All,
        };
        if let Some(all) = agg.sessions.get(&(all_key, *session)) {
            rows.push(RatioRow {
                setting: key.setting,
                session: *session,
                refine_pairs: a.refine_pairs,
                all_pairs: all.refine_pairs,
                ratio: call_ratio(all.refine_pairs, a.refine_pairs),
            });
        }
    }
    rows
}

pub fn write_ratios(path: &Path, rows: &[RatioRow]) -> std::io::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["setting", "session", "refine_pairs", "all_pairs", "ratio"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.setting.as_str().to_string(),
            r.session.to_string(),
            r.refine_pairs.to_string(),
            r.all_pairs.to_string(),
            r.ratio.map(f6).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub setting: String,
    pub policy: String,
    pub session: u32,
    pub intra_session: u64,
    pub inter_session: u64,
    pub total: u64,
}

pub fn stats_rows(agg: &Aggregate) -> Vec<StatsRow> {
    agg.sessions
        .iter()
        .filter(|((k, _), _)| k.setting != Setting::NoMemory)
        .map(|((k, s), a)| StatsRow {
            setting: k.setting.as_str().into(),
            policy: k.policy.as_str().into(),
            session: *s,
            intra_session: a.stats.intra_session,
            inter_session: a.stats.inter_session,
            total: a.stats.total,
        })
        .collect()
}

pub fn write_stats(path: &Path, rows: &[StatsRow]) -> std::io::Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub setting: Setting,
    pub policy: Policy,
    pub counts: StrategyCounts,
    pub preservation_share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub setting: Setting,
    pub policy: Policy,
    pub expanded: u64,
    pub filtered: u64,
    pub filtered_ratio: f64,
    pub empty_generations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategies: Vec<StrategyReport>,
    pub filter: Vec<FilterReport>,
    pub ratios: Vec<RatioRow>,
    pub responses: u64,
    pub degenerate: u64,
    pub degenerate_ratio: f64,
    pub over_length: u64,
    pub removal_mismatches: u64,
    pub total_usd: f64,
}

pub fn run_report(agg: &Aggregate, prices: &Prices) -> RunReport {
    let strategies = agg
        .strategies
        .iter()
        .filter(|(k, _)| k.policy.refines())
        .map(|(k, c)| StrategyReport {
            setting: k.setting,
            policy: k.policy,
            counts: *c,
            preservation_share: c.preservation_share(),
        })
        .collect();
    let filter = agg
        .filter
        .iter()
        .filter(|(k, _)| k.setting == Setting::CometExp)
        .map(|(k, f)| FilterReport {
            setting: k.setting,
            policy: k.policy,
            expanded: f.expanded,
            filtered: f.filtered,
            filtered_ratio: f.ratio(),
            empty_generations: f.empty_generations,
        })
        .collect();
    let mut responses = 0;
    let mut degenerate = 0;
    let mut over_length = 0;
    let mut removal_mismatches = 0;
    let mut total_usd = 0.0;
    for a in agg.sessions.values() {
        responses += a.metrics.n;
        degenerate += a.metrics.degenerate;
        over_length += a.over_length;
        removal_mismatches += a.removal_mismatches;
        total_usd += cost_usd(&a.cost, prices);
    }
    RunReport {
        strategies,
        filter,
        ratios: ratios(agg),
        responses,
        degenerate,
        degenerate_ratio: if responses == 0 {
            0.0
        } else {
            degenerate as f64 / responses as f64
        },
        over_length,
        removal_mismatches,
        total_usd,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(std::io::Error::from)?;
    f.write_all(b"\n")
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, &r).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}
