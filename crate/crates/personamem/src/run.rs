//! Command implementations behind the CLI.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use personamem_core::memory::Policy;
use personamem_core::prompt::{Template, TemplateError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{hex, Config, ConfigError};
use crate::corpus::{load_corpus, summarize, CorpusError, CorpusSummary};
use crate::journal::{replay_file, snapshot, JournalError};
use crate::pipeline::{plan, run_all, GraphRow, JobError, RunContext, Setting};
use crate::providers::{live_providers, mock_providers, SetupError};
use crate::report;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("run directory {0} already exists")]
    RunExists(PathBuf),
    #[error("{0} is not a completed run: {1}")]
    IncompleteRun(PathBuf, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// 2 for configuration or input problems, 3 for provider failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Corpus(_) | RunError::Template(_) | RunError::RunExists(_) => 2,
            RunError::Setup(SetupError::Provider(_)) => 3,
            RunError::Setup(_) => 2,
            RunError::Job(e) if e.is_provider() => 3,
            RunError::IncompleteRun(..) => 2,
            _ => 1,
        }
    }
}

pub const EXIT_DEGENERATE: i32 = 4;

#[derive(Debug, Clone)]
pub struct RunRequest {
    pub config: Config,
    pub settings: Vec<Setting>,
    pub policies: Vec<Policy>,
    pub dry_run: bool,
    /// Exact run directory; must not exist.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub mu: f64,
    pub strict_threshold: bool,
    pub filter_threshold: f64,
    pub k: usize,
    pub refine_retries: u32,
    pub eval_sessions: (u32, u32),
    pub restore_isolated: bool,
    pub skip_preserved_pairs: bool,
    pub bleu: crate::config::BleuMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub corpus_sha256: String,
    pub dry_run: bool,
    pub settings: Vec<Setting>,
    pub policies: Vec<Policy>,
    pub thresholds: Thresholds,
    pub providers: BTreeMap<String, String>,
    pub templates: BTreeMap<String, String>,
    pub corpus: CorpusSummaryJson,
    pub jobs: usize,
    pub files: Vec<String>,
    pub config: Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummaryJson {
    pub dialogues: usize,
    pub transcripts: usize,
    pub turns: usize,
    pub annotations: usize,
}

impl From<CorpusSummary> for CorpusSummaryJson {
    fn from(s: CorpusSummary) -> Self {
        CorpusSummaryJson {
            dialogues: s.dialogues,
            transcripts: s.transcripts,
            turns: s.turns,
            annotations: s.annotations,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub report: report::RunReport,
    pub degenerate_exceeded: bool,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.degenerate_exceeded {
            EXIT_DEGENERATE
        } else {
            0
        }
    }
}

fn sha256(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Create a fresh run directory. An explicit path must not exist; otherwise
/// the first free `run-<hash>-NNN` under `out_dir` is used.
pub fn create_run_dir(out_dir: &Path, explicit: Option<&Path>, config_hash: &str) -> Result<PathBuf, RunError> {
    if let Some(p) = explicit {
        if p.exists() {
            return Err(RunError::RunExists(p.to_path_buf()));
        }
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::create_dir(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => RunError::RunExists(p.to_path_buf()),
            _ => RunError::Io(e),
        })?;
        return Ok(p.to_path_buf());
    }
    fs::create_dir_all(out_dir)?;
    for n in 1.. {
        let dir = out_dir.join(format!("run-{}-{n:03}", &config_hash[..12]));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("run directory numbering exhausted")
}

fn load_template(path: Option<&Path>, refine: bool) -> Result<Template, RunError> {
    let Some(path) = path else {
        return Ok(if refine {
            Template::default_refinement()
        } else {
            Template::default_response()
        });
    };
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let id = path
        .file_name()
        .map_or_else(|| "template".into(), |n| n.to_string_lossy().into_owned());
    Ok(if refine {
        Template::refinement(id, text)?
    } else {
        Template::response(id, text)?
    })
}

pub fn cmd_run(req: &RunRequest) -> Result<RunSummary, RunError> {
    let config = &req.config;
    config.validate()?;
    let corpus_bytes = fs::read(&config.run.corpus).map_err(|source| CorpusError::Missing {
        path: config.run.corpus.clone(),
        source,
    })?;
    let dialogues = crate::corpus::parse_corpus(&String::from_utf8_lossy(&corpus_bytes))?;
    let refine_template = load_template(config.templates.refine.as_deref(), true)?;
    let response_template = load_template(config.templates.response.as_deref(), false)?;
    let providers = if req.dry_run {
        mock_providers(&config.mock)?
    } else {
        live_providers(config)?
    };
    let config_hash = config.hash();
    let dir = create_run_dir(&config.run.out_dir, req.out.as_deref(), &config_hash)?;
    log::info!("run directory {}", dir.display());

    let keys = plan(&req.settings, &req.policies);
    let ctx = RunContext {
        run: &config.run,
        providers: &providers,
        refine_template: &refine_template,
        response_template: &response_template,
        config_hash: &config_hash,
        out: &dir,
    };
    let results = run_all(&ctx, &keys, &dialogues)?;

    let agg = report::aggregate(&results);
    let bleu = config.run.bleu.into();
    report::write_metrics(&dir.join("metrics.csv"), &agg, bleu)?;
    report::write_table(&dir.join("table.csv"), &agg, bleu)?;
    report::write_cost(&dir.join("cost.csv"), &agg, &config.prices)?;
    let ratios = report::ratios(&agg);
    report::write_ratios(&dir.join("cost_ratio.csv"), &ratios)?;
    report::write_stats(&dir.join("stats.csv"), &report::stats_rows(&agg))?;
    report::write_jsonl(&dir.join("responses.jsonl"), results.iter().flat_map(|r| &r.responses))?;
    report::write_jsonl(&dir.join("graphs.jsonl"), results.iter().flat_map(|r| &r.graphs))?;
    let cost_json: Vec<serde_json::Value> = agg
        .sessions
        .iter()
        .map(|((k, s), a)| {
            serde_json::json!({
                "setting": k.setting,
                "policy": k.policy,
                "session": s,
                "dialogues": a.dialogues,
                "refine_pairs": a.refine_pairs,
                "cost": a.cost,
                "usd": report::cost_usd(&a.cost, &config.prices),
            })
        })
        .collect();
    report::write_json(
        &dir.join("cost.json"),
        &serde_json::json!({"sessions": cost_json, "ratios": ratios}),
    )?;
    let run_report = report::run_report(&agg, &config.prices);
    report::write_json(&dir.join("report.json"), &run_report)?;

    let mut templates = BTreeMap::new();
    templates.insert(
        "refine".into(),
        format!(
            "{} sha256={}",
            refine_template.id,
            sha256(refine_template.text().as_bytes())
        ),
    );
    templates.insert(
        "response".into(),
        format!(
            "{} sha256={}",
            response_template.id,
            sha256(response_template.text().as_bytes())
        ),
    );
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash,
        corpus_sha256: sha256(&corpus_bytes),
        dry_run: req.dry_run,
        settings: req.settings.clone(),
        policies: req.policies.clone(),
        thresholds: Thresholds {
            mu: config.run.mu,
            strict_threshold: config.run.strict_threshold,
            filter_threshold: config.run.filter_threshold,
            k: config.run.k,
            refine_retries: config.run.refine_retries,
            eval_sessions: config.run.eval_sessions,
            restore_isolated: config.run.restore_isolated,
            skip_preserved_pairs: config.run.skip_preserved_pairs,
            bleu: config.run.bleu,
        },
        providers: providers.describe.clone(),
        templates,
        corpus: summarize(&dialogues).into(),
        jobs: results.len(),
        files: [
            "metrics.csv",
            "table.csv",
            "cost.csv",
            "cost_ratio.csv",
            "cost.json",
            "stats.csv",
            "report.json",
            "responses.jsonl",
            "graphs.jsonl",
        ]
        .map(String::from)
        .to_vec(),
        config: config.clone(),
    };
    report::write_json(&dir.join("manifest.json"), &manifest)?;

    let degenerate_exceeded = run_report.degenerate_ratio > config.run.max_degenerate_ratio;
    if degenerate_exceeded {
        log::warn!(
            "{:.1}% of scored responses were degenerate (limit {:.1}%)",
            run_report.degenerate_ratio * 100.0,
            config.run.max_degenerate_ratio * 100.0
        );
    }
    Ok(RunSummary {
        dir,
        report: run_report,
        degenerate_exceeded,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, RunError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| RunError::IncompleteRun(dir.to_path_buf(), e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| RunError::IncompleteRun(dir.to_path_buf(), e.to_string()))
}

/// Recount intra/inter-session contradictions from a run's graph log.
pub fn cmd_stats(dir: &Path) -> Result<Vec<report::StatsRow>, RunError> {
    read_manifest(dir)?;
    let path = dir.join("graphs.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| RunError::IncompleteRun(dir.to_path_buf(), e.to_string()))?;
    let mut counts: BTreeMap<(String, String, u32), (u64, u64)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: GraphRow = serde_json::from_str(line)
            .map_err(|e| RunError::IncompleteRun(dir.to_path_buf(), format!("graphs.jsonl line {}: {e}", i + 1)))?;
        let entry = counts
            .entry((row.setting.as_str().into(), row.policy.as_str().into(), row.session))
            .or_default();
        for e in &row.edges {
            if e.session_a == e.session_b {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|((setting, policy, session), (intra, inter))| report::StatsRow {
            setting,
            policy,
            session,
            intra_session: intra,
            inter_session: inter,
            total: intra + inter,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayCheck {
    pub journal: PathBuf,
    pub events: usize,
    pub active: usize,
    /// Replayed store serializes byte-identically to the saved snapshot.
    pub matches_snapshot: Option<bool>,
}

fn journals_under(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            journals_under(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "jsonl") {
            out.push(p);
        }
    }
    Ok(())
}

/// Replay one journal, or every journal of a run directory, and compare the
/// result with the stored snapshot when one exists.
pub fn cmd_replay(path: &Path) -> Result<Vec<ReplayCheck>, RunError> {
    let journals = if path.is_dir() {
        let mut v = Vec::new();
        journals_under(&path.join("memory"), &mut v)
            .map_err(|e| RunError::IncompleteRun(path.to_path_buf(), e.to_string()))?;
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut checks = Vec::new();
    for j in journals {
        let events = crate::journal::read_journal(&j)?.len();
        let store = replay_file(&j)?;
        let snap = j.with_extension("store.json");
        let matches_snapshot = snap
            .exists()
            .then(|| fs::read_to_string(&snap).map(|s| s == snapshot(&store)))
            .transpose()?;
        checks.push(ReplayCheck {
            journal: j,
            events,
            active: store.len(),
            matches_snapshot,
        });
    }
    Ok(checks)
}

pub fn cmd_validate_corpus(path: &Path) -> Result<CorpusSummary, RunError> {
    Ok(summarize(&load_corpus(path)?))
}
