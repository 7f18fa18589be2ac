//! Iterative graph refinement and the strategy-selecting refinement call.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contradiction::ContradictionGraph;
use crate::memory::{MemoryStore, PersonaContext, PolicyError};
use crate::persona::{Origin, Persona, PersonaError, PersonaFactory, PersonaId, RefinementRecord, Strategy};
use crate::prompt::{escape_inline, Template};
use crate::provider::{ChatProvider, ChatRequest, ProviderError};

/// A pair selected for refinement together with its edge weight.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineRequest {
    pub p1: Persona,
    pub p2: Persona,
    pub delta: f64,
}

/// Result of one refinement: the provenance record plus any new personas.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutput {
    pub record: RefinementRecord,
    pub personas: Vec<Persona>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmTrace {
    /// Pairs in the order they were refined.
    pub selections: Vec<(PersonaId, PersonaId)>,
    /// Graph nodes that became isolated and were not refined.
    pub isolated: Vec<PersonaId>,
    pub strategies: StrategyCounts,
}

impl AlgorithmTrace {
    pub fn refine_calls(&self) -> usize {
        self.selections.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyCounts {
    pub resolution: u64,
    pub disambiguation: u64,
    pub preservation: u64,
    /// Preservations forced by unparseable output (also counted in `preservation`).
    pub fallback: u64,
}

impl StrategyCounts {
    pub fn record(&mut self, record: &RefinementRecord) {
        match record.strategy {
            Strategy::Resolution => self.resolution += 1,
            Strategy::Disambiguation => self.disambiguation += 1,
            Strategy::Preservation => self.preservation += 1,
        }
        if record.fallback {
            self.fallback += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.resolution + self.disambiguation + self.preservation
    }

    /// Share of refinements that kept both personas unchanged.
    pub fn preservation_share(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| self.preservation as f64 / t as f64)
    }
}

impl core::ops::AddAssign for StrategyCounts {
    fn add_assign(&mut self, o: Self) {
        self.resolution += o.resolution;
        self.disambiguation += o.disambiguation;
        self.preservation += o.preservation;
        self.fallback += o.fallback;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("refinement graph is empty")]
pub struct EmptyGraph;

/// Pick the node with the largest sum of incident weights, then its heaviest
/// neighbor. Ties go to the smaller persona id.
pub fn select_pair(graph: &ContradictionGraph) -> Result<(PersonaId, PersonaId), EmptyGraph> {
    let mut best: Option<(PersonaId, f64)> = None;
    for (id, sum) in graph.weighted_degrees() {
        if graph.degree(id) == 0 {
            continue;
        }
        // ascending iteration: strict > keeps the smaller id on ties
        if best.is_none_or(|(_, b)| sum > b) {
            best = Some((id, sum));
        }
    }
    let (p1, _) = best.ok_or(EmptyGraph)?;
    let mut partner: Option<(PersonaId, f64)> = None;
    for (n, d) in graph.neighbors(p1) {
        if partner.is_none_or(|(_, b)| d > b) {
            partner = Some((n, d));
        }
    }
    Ok((p1, partner.ok_or(EmptyGraph)?.0))
}

fn request_for(
    graph: &ContradictionGraph,
    store: &MemoryStore,
    p1: PersonaId,
    p2: PersonaId,
) -> Result<RefineRequest, crate::memory::StoreError> {
    let get = |id| {
        store
            .get(id)
            .cloned()
            .ok_or(crate::memory::StoreError::UnknownPersona(id))
    };
    Ok(RefineRequest {
        p1: get(p1)?,
        p2: get(p2)?,
        delta: graph.weight(p1, p2).unwrap_or(f64::NAN),
    })
}

/// Iterative graph refinement.
///
/// Memory first loses every graph node; each iteration refines the selected
/// pair, adds the outputs to memory, removes the pair and any newly isolated
/// nodes from the graph. Isolated nodes stay out of memory unless
/// `restore_isolated` is set.
pub fn run_algorithm1<E, F>(
    mut graph: ContradictionGraph,
    store: &mut MemoryStore,
    restore_isolated: bool,
    mut refine: F,
) -> Result<AlgorithmTrace, PolicyError<E>>
where
    F: FnMut(&RefineRequest, &MemoryStore) -> Result<RefineOutput, E>,
{
    let mut trace = AlgorithmTrace::default();
    let stray = graph.remove_isolated();
    let nodes: Vec<PersonaId> = graph.nodes().collect();
    for id in &nodes {
        store.remove(*id)?;
    }
    for id in stray {
        log::debug!("ignoring edgeless graph node {id}");
    }
    while !graph.is_empty() {
        let (p1, p2) = select_pair(&graph).expect("graph without isolated nodes has an edge");
        let request = request_for(&graph, store, p1, p2)?;
        let output = refine(&request, store).map_err(PolicyError::Refine)?;
        trace.strategies.record(&output.record);
        store.commit_refinement(output)?;
        trace.selections.push((p1, p2));
        graph.remove_node(p1);
        graph.remove_node(p2);
        for id in graph.remove_isolated() {
            if restore_isolated {
                store.restore(id)?;
            }
            trace.isolated.push(id);
        }
    }
    Ok(trace)
}

/// Refine every edge independently: memory becomes `(M \ V) ∪ outputs`.
pub fn refine_all<E, F>(
    graph: &ContradictionGraph,
    store: &mut MemoryStore,
    mut refine: F,
) -> Result<AlgorithmTrace, PolicyError<E>>
where
    F: FnMut(&RefineRequest, &MemoryStore) -> Result<RefineOutput, E>,
{
    let mut trace = AlgorithmTrace::default();
    for id in graph.nodes() {
        store.remove(id)?;
    }
    for (a, b, _) in graph.edges() {
        let request = request_for(graph, store, a, b)?;
        let output = refine(&request, store).map_err(PolicyError::Refine)?;
        trace.strategies.record(&output.record);
        store.commit_refinement(output)?;
        trace.selections.push((a, b));
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRefinement {
    pub strategy: Strategy,
    pub rationale: String,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MalformedOutput {
    #[error("empty output")]
    Empty,
    #[error("no strategy marker found")]
    NoMarker,
    #[error("{strategy} expects {expected} sentence(s), found {found}")]
    SentenceCount {
        strategy: Strategy,
        expected: usize,
        found: usize,
    },
}

const MARKERS: [(&str, Strategy); 3] = [
    ("[resolution]", Strategy::Resolution),
    ("[disambiguation]", Strategy::Disambiguation),
    ("[no_conflict]", Strategy::Preservation),
];

fn strip_decoration(s: &str) -> &str {
    s.trim().trim_matches(|c: char| c == '*' || c == '`' || c == '_').trim()
}

fn strip_label<'a>(s: &'a str, labels: &[&str]) -> &'a str {
    let t = strip_decoration(s);
    for label in labels {
        if t.len() >= label.len() && t[..label.len()].eq_ignore_ascii_case(label) {
            return strip_decoration(&t[label.len()..]);
        }
    }
    t
}

/// Drop a leading `Persona N:` (optionally possessive, e.g. `B's Persona 2:`).
fn strip_persona_prefix(line: &str) -> &str {
    let lower = line.to_ascii_lowercase();
    if let Some(pos) = lower.find("persona ") {
        if pos <= 8 {
            let rest = &line[pos + "persona ".len()..];
            let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
            if digits > 0 {
                let after = strip_decoration(&rest[digits..]);
                if let Some(body) = after.strip_prefix(':') {
                    return strip_decoration(body);
                }
            }
        }
    }
    line
}

/// Parse a refinement completion: optional rationale, one strategy marker,
/// then the refined sentence(s).
pub fn parse_refinement(raw: &str) -> Result<ParsedRefinement, MalformedOutput> {
    if raw.trim().is_empty() {
        return Err(MalformedOutput::Empty);
    }
    let lower = raw.to_ascii_lowercase();
    let (pos, marker, strategy) = MARKERS
        .iter()
        .filter_map(|(m, s)| lower.find(m).map(|p| (p, *m, *s)))
        .min_by_key(|(p, _, _)| *p)
        .ok_or(MalformedOutput::NoMarker)?;

    let rationale = strip_label(&raw[..pos], &["rationale:", "explanation:"]).to_string();
    if strategy == Strategy::Preservation {
        return Ok(ParsedRefinement {
            strategy,
            rationale,
            sentences: Vec::new(),
        });
    }
    let body = raw[pos + marker.len()..].trim_start_matches(['*', '`', ':', ' ', '\t']);
    let sentences: Vec<String> = body
        .lines()
        .map(|l| {
            let l = strip_decoration(l);
            let l = l.trim_start_matches(['-', '*', '•']).trim();
            strip_persona_prefix(l).to_string()
        })
        .filter(|l| !l.is_empty())
        .collect();
    let expected = strategy.output_arity();
    if sentences.len() != expected {
        return Err(MalformedOutput::SentenceCount {
            strategy,
            expected,
            found: sentences.len(),
        });
    }
    Ok(ParsedRefinement {
        strategy,
        rationale,
        sentences,
    })
}

pub const FALLBACK_RATIONALE: &str = "fallback: unparseable";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RefineError {
    #[error("personas {0} and {1} belong to different speakers")]
    SpeakerMismatch(PersonaId, PersonaId),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Persona(#[from] PersonaError),
}

/// Strategy-selecting refinement through a chat model.
pub struct Refiner<'a, C: ?Sized> {
    pub llm: &'a C,
    pub template: &'a Template,
    /// Extra attempts after a malformed completion before falling back.
    pub max_retries: u32,
    pub max_tokens: u32,
}

fn fragment_text(ctx: &PersonaContext) -> String {
    if ctx.fragment.is_empty() {
        return "(no dialogue fragment)".to_string();
    }
    let lines: Vec<String> = ctx
        .fragment
        .iter()
        .map(|u| alloc::format!("{}: {}", u.speaker, escape_inline(&u.text)))
        .collect();
    lines.join("\n")
}

fn context_of(persona: &Persona, store: &MemoryStore) -> PersonaContext {
    store.context_for(persona.id).unwrap_or_else(|| PersonaContext {
        text: persona.text.clone(),
        source: persona.text.clone(),
        fragment: Vec::new(),
    })
}

impl<'a, C: ChatProvider + ?Sized> Refiner<'a, C> {
    pub fn prompt(&self, p1: &Persona, p2: &Persona, store: &MemoryStore) -> String {
        let c1 = context_of(p1, store);
        let c2 = context_of(p2, store);
        let (f1, f2) = (fragment_text(&c1), fragment_text(&c2));
        let (t1, t2) = (escape_inline(&c1.text), escape_inline(&c2.text));
        let (s1, s2) = (escape_inline(&c1.source), escape_inline(&c2.source));
        self.template.render(&[
            ("persona_1", Some(&t1)),
            ("fragment_1", Some(&f1)),
            ("source_1", Some(&s1)),
            ("persona_2", Some(&t2)),
            ("fragment_2", Some(&f2)),
            ("source_2", Some(&s2)),
        ])
    }

    pub fn refine_pair(
        &self,
        request: &RefineRequest,
        store: &MemoryStore,
        factory: &mut PersonaFactory,
        session: u32,
    ) -> Result<RefineOutput, RefineError> {
        let RefineRequest { p1, p2, delta } = request;
        if p1.speaker != p2.speaker {
            return Err(RefineError::SpeakerMismatch(p1.id, p2.id));
        }
        let chat = ChatRequest::user(self.prompt(p1, p2, store), self.max_tokens);
        let mut attempts = 0;
        let parsed = loop {
            attempts += 1;
            let reply = self.llm.complete(&chat)?;
            match parse_refinement(&reply.text) {
                Ok(parsed) => break Some(parsed),
                Err(e) if attempts <= self.max_retries => {
                    log::warn!("refinement of ({}, {}) attempt {attempts}: {e}", p1.id, p2.id);
                }
                Err(e) => {
                    log::warn!(
                        "refinement of ({}, {}) unparseable after {attempts} attempts: {e}",
                        p1.id,
                        p2.id
                    );
                    break None;
                }
            }
        };
        let (strategy, rationale, sentences, fallback) = match parsed {
            Some(p) => (p.strategy, p.rationale, p.sentences, false),
            None => (Strategy::Preservation, FALLBACK_RATIONALE.to_string(), Vec::new(), true),
        };
        let mut personas = Vec::new();
        let outputs = if strategy == Strategy::Preservation {
            alloc::vec![p1.id, p2.id]
        } else {
            for s in &sentences {
                personas.push(factory.new_persona(
                    p1.speaker.clone(),
                    session,
                    s,
                    Origin::Refined(strategy),
                    alloc::vec![p1.id, p2.id],
                    None,
                )?);
            }
            personas.iter().map(|p| p.id).collect()
        };
        Ok(RefineOutput {
            record: RefinementRecord {
                parents: (p1.id, p2.id),
                strategy,
                rationale,
                outputs,
                delta: *delta,
                session,
                fallback,
                attempts,
            },
            personas,
        })
    }
}
