//! Evaluation runs: one job per (setting, policy, dialogue).
//!
//! For every session a job first generates each turn (sessions inside the
//! evaluation range, context = earlier turns of the session, personas
//! retrieved from memory as it stood after the previous session), then
//! updates memory with the session's personas and applies the policy to the
//! contradiction graph.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use personamem_core::contradiction::{contradiction_stats, ContradictionError, ContradictionStats, GraphOptions};
use personamem_core::expansion::{expand_persona, ExpansionError, InitialFilter};
use personamem_core::generation::{dialogue_text, generate_response, partition_by_speaker, GenerationError};
use personamem_core::ingest::{human_personas, link_fragments, Dialogue};
use personamem_core::memory::{apply_policy, retrieve, MemoryStore, Policy, PolicyError, RetrievalError, StoreError};
use personamem_core::metrics::{MetricAccumulator, SessionCost};
use personamem_core::persona::{Persona, PersonaError, PersonaFactory, Speaker, Utterance};
use personamem_core::prompt::Template;
use personamem_core::provider::{CallCounts, Counted, ProviderError};
use personamem_core::refinery::{RefineError, RefineOutput, Refiner, StrategyCounts};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::journal::{snapshot, JournalError, JournalWriter};
use crate::providers::{EmbedCache, ProviderSet};

/// Which personas enter memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// Annotated personas only.
    Gold,
    /// Annotated personas plus filtered commonsense expansions.
    CometExp,
    /// No memory: responses are generated without personas.
    NoMemory,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Gold => "gold",
            Setting::CometExp => "comet-exp",
            Setting::NoMemory => "no-memory",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <Setting as clap::ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Error)]
pub enum JobError {
    #[error("provider failure: {0}")]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Persona(#[from] PersonaError),
    #[error(transparent)]
    Generation(GenerationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl JobError {
    pub fn is_provider(&self) -> bool {
        matches!(self, JobError::Provider(_))
    }
}

impl From<GenerationError> for JobError {
    fn from(e: GenerationError) -> Self {
        match e {
            GenerationError::Provider(p) => JobError::Provider(p),
            other => JobError::Generation(other),
        }
    }
}

impl From<RetrievalError> for JobError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Provider(p) => JobError::Provider(p),
            RetrievalError::ZeroK => JobError::Provider(ProviderError::BadResponse("k must be positive".into())),
        }
    }
}

impl From<ContradictionError> for JobError {
    fn from(e: ContradictionError) -> Self {
        match e {
            ContradictionError::Provider(p) => JobError::Provider(p),
            other => JobError::Provider(ProviderError::BadResponse(other.to_string())),
        }
    }
}

impl From<ExpansionError> for JobError {
    fn from(e: ExpansionError) -> Self {
        match e {
            ExpansionError::Provider(p) => JobError::Provider(p),
            ExpansionError::Persona(p) => JobError::Persona(p),
            other => JobError::Provider(ProviderError::BadResponse(other.to_string())),
        }
    }
}

impl From<RefineError> for JobError {
    fn from(e: RefineError) -> Self {
        match e {
            RefineError::Provider(p) => JobError::Provider(p),
            RefineError::Persona(p) => JobError::Persona(p),
            RefineError::SpeakerMismatch(..) => JobError::Provider(ProviderError::BadResponse(e.to_string())),
        }
    }
}

impl From<PolicyError<JobError>> for JobError {
    fn from(e: PolicyError<JobError>) -> Self {
        match e {
            PolicyError::Store(s) => JobError::Store(s),
            PolicyError::Refine(j) => j,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JobKey {
    pub setting: Setting,
    pub policy: Policy,
}

impl fmt::Display for JobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}__{}", self.setting, self.policy)
    }
}

/// Everything a job needs that is shared across the run.
pub struct RunContext<'a> {
    pub run: &'a RunConfig,
    pub providers: &'a ProviderSet,
    pub refine_template: &'a Template,
    pub response_template: &'a Template,
    pub config_hash: &'a str,
    /// Directory receiving `memory/<setting>/<policy>/<dialogue>.jsonl`.
    pub out: &'a Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRow {
    pub setting: Setting,
    pub policy: Policy,
    pub dialogue: String,
    pub session: u32,
    pub turn: usize,
    pub speaker: Speaker,
    pub reference: String,
    pub response: String,
    pub over_length: bool,
    pub retrieved: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRow {
    pub a: String,
    pub b: String,
    pub delta: f64,
    pub session_a: u32,
    pub session_b: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRow {
    pub setting: Setting,
    pub policy: Policy,
    pub dialogue: String,
    pub session: u32,
    pub nodes: usize,
    pub max_degree: usize,
    pub edges: Vec<EdgeRow>,
    pub stats: ContradictionStats,
    pub refine_pairs: usize,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub session: u32,
    pub evaluated: bool,
    pub metrics: MetricAccumulator,
    pub over_length: u64,
    pub cost: SessionCost,
    pub refine_pairs: u64,
    pub stats: ContradictionStats,
    pub graph_nodes: usize,
    pub graph_edges: usize,
    pub memory_size: usize,
    /// For NLI-remove: whether the removed set equals the graph's node set.
    pub removal_matches_graph: Option<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub expanded: u64,
    pub filtered: u64,
    pub empty_generations: u64,
}

impl std::ops::AddAssign for FilterCounts {
    fn add_assign(&mut self, o: Self) {
        self.expanded += o.expanded;
        self.filtered += o.filtered;
        self.empty_generations += o.empty_generations;
    }
}

impl FilterCounts {
    pub fn ratio(&self) -> f64 {
        if self.expanded == 0 {
            0.0
        } else {
            self.filtered as f64 / self.expanded as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobResult {
    pub key: JobKey,
    pub dialogue: String,
    pub sessions: Vec<SessionResult>,
    pub strategies: StrategyCounts,
    pub filter: FilterCounts,
    pub responses: Vec<ResponseRow>,
    pub graphs: Vec<GraphRow>,
    pub journal: PathBuf,
    pub snapshot: PathBuf,
}

/// Job list for the requested settings and policies. The memory-free
/// setting ignores policies and runs once.
pub fn plan(settings: &[Setting], policies: &[Policy]) -> Vec<JobKey> {
    let mut keys = Vec::new();
    for &setting in settings {
        if setting == Setting::NoMemory {
            keys.push(JobKey {
                setting,
                policy: Policy::None,
            });
        } else {
            keys.extend(policies.iter().map(|&policy| JobKey { setting, policy }));
        }
    }
    keys.sort();
    keys.dedup();
    keys
}

pub fn journal_path(out: &Path, key: JobKey, dialogue: &str) -> PathBuf {
    out.join("memory")
        .join(key.setting.as_str())
        .join(key.policy.as_str())
        .join(format!("{dialogue}.jsonl"))
}

struct Meters<'p> {
    refine: Counted<&'p (dyn personamem_core::ChatProvider + Send + Sync)>,
    response: Counted<&'p (dyn personamem_core::ChatProvider + Send + Sync)>,
    nli: Counted<&'p (dyn personamem_core::NliProvider + Send + Sync)>,
    embed: EmbedCache<Counted<&'p (dyn personamem_core::EmbeddingProvider + Send + Sync)>>,
    commonsense: Counted<&'p (dyn personamem_core::CommonsenseProvider + Send + Sync)>,
}

impl<'p> Meters<'p> {
    fn new(p: &'p ProviderSet) -> Self {
        Meters {
            refine: Counted::new(&*p.refine),
            response: Counted::new(&*p.response),
            nli: Counted::new(&*p.nli),
            embed: EmbedCache::new(Counted::new(&*p.embedder)),
            commonsense: Counted::new(&*p.commonsense),
        }
    }

    fn snapshot(&self) -> SessionCost {
        SessionCost {
            refine: self.refine.counts(),
            generation: self.response.counts(),
            nli: self.nli.counts(),
            embedding: self.embed.inner().counts(),
            commonsense: self.commonsense.counts(),
        }
    }
}

fn since(now: SessionCost, before: SessionCost) -> SessionCost {
    let d = |a: CallCounts, b: CallCounts| a.since(b);
    SessionCost {
        refine: d(now.refine, before.refine),
        generation: d(now.generation, before.generation),
        nli: d(now.nli, before.nli),
        embedding: d(now.embedding, before.embedding),
        commonsense: d(now.commonsense, before.commonsense),
    }
}

/// Run one dialogue under one (setting, policy).
pub fn run_job(ctx: &RunContext<'_>, key: JobKey, scope: u32, dialogue: &Dialogue) -> Result<JobResult, JobError> {
    let run = ctx.run;
    let meters = Meters::new(ctx.providers);
    let journal_file = journal_path(ctx.out, key, &dialogue.id);
    let snapshot_file = journal_file.with_extension("store.json");
    let mut store = MemoryStore::open(scope, ctx.config_hash);
    let mut journal = JournalWriter::create(&journal_file)?;
    journal.flush(&store)?;
    let mut factory = PersonaFactory::new(scope);
    let mut filter = InitialFilter::new(run.filter_threshold);
    let options = GraphOptions {
        mu: run.mu,
        mode: run.threshold_mode(),
        batch_size: run.nli_batch_size,
    };
    let refiner = Refiner {
        llm: &meters.refine,
        template: ctx.refine_template,
        max_retries: run.refine_retries,
        max_tokens: run.refine_max_tokens,
    };
    let (eval_lo, eval_hi) = run.eval_sessions;
    let mut result = JobResult {
        key,
        dialogue: dialogue.id.clone(),
        sessions: Vec::new(),
        strategies: StrategyCounts::default(),
        filter: FilterCounts::default(),
        responses: Vec::new(),
        graphs: Vec::new(),
        journal: journal_file.clone(),
        snapshot: snapshot_file.clone(),
    };

    for transcript in dialogue.sessions.iter().take_while(|t| t.session <= eval_hi) {
        let s = transcript.session;
        let before = meters.snapshot();
        let mut session = SessionResult {
            session: s,
            evaluated: s >= eval_lo,
            ..Default::default()
        };

        if session.evaluated {
            let utterances: Vec<Utterance> = transcript
                .turns
                .iter()
                .map(|t| Utterance {
                    speaker: t.speaker.clone(),
                    text: t.text.clone(),
                })
                .collect();
            let active: Vec<&Persona> = store.active().collect();
            for t in 1..utterances.len() {
                let context = &utterances[..t];
                let retrieved: Vec<&Persona> = if key.setting == Setting::NoMemory {
                    Vec::new()
                } else {
                    retrieve(&active, &dialogue_text(context), run.k, &meters.embed)?
                        .into_iter()
                        .map(|(p, _)| p)
                        .collect()
                };
                let (pa, pb) = partition_by_speaker(&retrieved, &"A".into(), &"B".into());
                let reply = generate_response(
                    ctx.response_template,
                    context,
                    &pa,
                    &pb,
                    &meters.response,
                    run.response_max_tokens,
                )?;
                let reference = &utterances[t];
                session.metrics.add(&reply.text, &reference.text);
                session.over_length += u64::from(reply.over_length);
                result.responses.push(ResponseRow {
                    setting: key.setting,
                    policy: key.policy,
                    dialogue: dialogue.id.clone(),
                    session: s,
                    turn: t,
                    speaker: reference.speaker.clone(),
                    reference: reference.text.clone(),
                    response: reply.text,
                    over_length: reply.over_length,
                    retrieved: retrieved.iter().map(|p| p.id.to_string()).collect(),
                });
            }
        }

        if key.setting != Setting::NoMemory {
            let mut linking = link_fragments(transcript);
            let humans = human_personas(&mut linking.fragments, &mut factory)?;
            for f in linking.fragments {
                store.add_fragment(f)?;
            }
            let mut candidates = humans.clone();
            if key.setting == Setting::CometExp {
                let mut expanded = Vec::new();
                for h in &humans {
                    let e = expand_persona(h, &meters.commonsense, &mut factory)?;
                    result.filter.empty_generations += e.empty.len() as u64;
                    expanded.extend(e.personas);
                }
                result.filter.expanded += expanded.len() as u64;
                let outcome = filter.apply(expanded, &humans, &meters.nli)?;
                result.filter.filtered += outcome.filtered.len() as u64;
                candidates.extend(outcome.kept);
            }
            for p in candidates {
                store.add(p)?;
            }
            journal.flush(&store)?;

            let mut graph = store.contradiction_graph(options, &meters.nli)?;
            if run.skip_preserved_pairs && key.policy.refines() {
                for (a, b) in store.preserved_pairs() {
                    graph.remove_edge(a, b);
                }
                graph.remove_isolated();
            }
            let session_of = |id| store.get(id).map(|p: &Persona| p.session);
            session.stats = contradiction_stats(&graph, session_of);
            session.graph_nodes = graph.node_count();
            session.graph_edges = graph.edge_count();
            let edges: Vec<EdgeRow> = graph
                .edges()
                .map(|(a, b, delta)| EdgeRow {
                    a: a.to_string(),
                    b: b.to_string(),
                    delta,
                    session_a: session_of(a).unwrap_or(0),
                    session_b: session_of(b).unwrap_or(0),
                })
                .collect();
            journal.flush(&store)?;

            let factory_ref = &mut factory;
            let journal_ref = &mut journal;
            let outcome = apply_policy(key.policy, &mut store, &graph, run.restore_isolated, |req, st| {
                journal_ref.flush(st)?;
                let out: RefineOutput = refiner.refine_pair(req, st, factory_ref, s)?;
                Ok::<_, JobError>(out)
            })?;
            if key.policy == Policy::NliRemove {
                let removed: BTreeSet<_> = outcome.removed.iter().copied().collect();
                let nodes: BTreeSet<_> = graph.nodes().collect();
                session.removal_matches_graph = Some(removed == nodes);
            }
            result.strategies += outcome.trace.strategies;
            session.refine_pairs = outcome.trace.refine_calls() as u64;
            store.end_session(s)?;
            journal.flush(&store)?;
            session.memory_size = store.len();
            result.graphs.push(GraphRow {
                setting: key.setting,
                policy: key.policy,
                dialogue: dialogue.id.clone(),
                session: s,
                nodes: graph.node_count(),
                max_degree: graph.max_degree(),
                edges,
                stats: session.stats,
                refine_pairs: outcome.trace.refine_calls(),
                removed: outcome.removed.iter().map(|id| id.to_string()).collect(),
            });
        }
        session.cost = since(meters.snapshot(), before);
        result.sessions.push(session);
    }
    journal.finish(&mut store)?;
    std::fs::write(&snapshot_file, snapshot(&store))?;
    log::info!("{key} {}: {store}", dialogue.id);
    Ok(result)
}

/// Run every job on a bounded worker pool. Results keep plan order.
pub fn run_all(ctx: &RunContext<'_>, keys: &[JobKey], dialogues: &[Dialogue]) -> Result<Vec<JobResult>, JobError> {
    let jobs: Vec<(usize, JobKey, &Dialogue)> = keys
        .iter()
        .flat_map(|k| dialogues.iter().map(move |d| (*k, d)))
        .enumerate()
        .map(|(i, (k, d))| (i, k, d))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.run.workers)
        .build()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(i, key, d)| run_job(ctx, *key, *i as u32, d))
            .collect()
    })
}
