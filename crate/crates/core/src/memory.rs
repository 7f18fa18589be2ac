//! Long-term memory store, its event journal, removal/refinement policies and
//! embedding retrieval.
//!
//! Every mutation goes through [`MemoryStore::apply`], which validates the
//! event, updates state and appends it to the pending journal. Replaying the
//! journal from an empty store reproduces the same state.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contradiction::{build_graph, ContradictionError, ContradictionGraph, GraphOptions, PairScoreCache};
use crate::persona::{
    DialogueFragment, FragmentId, Origin, Persona, PersonaId, RefinementRecord, Speaker, Strategy, Utterance,
};
use crate::provider::{EmbeddingProvider, NliProvider, ProviderError};
use crate::refinery::{refine_all, run_algorithm1, AlgorithmTrace, RefineOutput, RefineRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MemoryEvent {
    Opened { scope: u32, config: String },
    AddFragment { fragment: DialogueFragment },
    AddPersona { persona: Persona },
    RemovePersona { id: PersonaId },
    RestorePersona { id: PersonaId },
    Scored { a: PersonaId, b: PersonaId, delta: f64 },
    Refinement { record: RefinementRecord },
    SessionBoundary { session: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("persona {0} already exists")]
    DuplicatePersona(PersonaId),
    #[error("fragment {0} already exists")]
    DuplicateFragment(FragmentId),
    #[error("unknown persona {0}")]
    UnknownPersona(PersonaId),
    #[error("persona {0} is not in memory")]
    NotActive(PersonaId),
    #[error("refinement of ({0}, {1}) produced {2} outputs for {3}")]
    OutputArity(PersonaId, PersonaId, usize, Strategy),
    #[error("session boundary {got} does not follow {current}")]
    SessionOrder { current: u32, got: u32 },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MemoryStore {
    scope: u32,
    config: String,
    session: u32,
    personas: BTreeMap<PersonaId, Persona>,
    active: BTreeSet<PersonaId>,
    fragments: BTreeMap<FragmentId, DialogueFragment>,
    scores: PairScoreCache,
    refinements: Vec<RefinementRecord>,
    #[serde(skip)]
    journal: Vec<MemoryEvent>,
}

impl PartialEq for MemoryStore {
    fn eq(&self, o: &Self) -> bool {
        self.scope == o.scope
            && self.config == o.config
            && self.session == o.session
            && self.personas == o.personas
            && self.active == o.active
            && self.fragments == o.fragments
            && self.scores == o.scores
            && self.refinements == o.refinements
    }
}

/// Text and context used when a persona enters a refinement prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonaContext {
    pub text: String,
    /// The originating human persona for expansions, otherwise the persona itself.
    pub source: String,
    pub fragment: Vec<Utterance>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store whose journal starts with an `Opened` event.
    pub fn open(scope: u32, config: impl Into<String>) -> Self {
        let mut s = MemoryStore::new();
        s.apply(MemoryEvent::Opened {
            scope,
            config: config.into(),
        })
        .expect("opening an empty store cannot fail");
        s
    }

    pub fn replay<I: IntoIterator<Item = MemoryEvent>>(events: I) -> Result<Self, (usize, StoreError)> {
        let mut s = MemoryStore::new();
        for (i, e) in events.into_iter().enumerate() {
            s.apply(e).map_err(|err| (i, err))?;
        }
        s.journal.clear();
        Ok(s)
    }

    pub fn apply(&mut self, event: MemoryEvent) -> Result<(), StoreError> {
        match &event {
            MemoryEvent::Opened { scope, config } => {
                self.scope = *scope;
                self.config = config.clone();
            }
            MemoryEvent::AddFragment { fragment } => {
                if self.fragments.contains_key(&fragment.id) {
                    return Err(StoreError::DuplicateFragment(fragment.id));
                }
                self.fragments.insert(fragment.id, fragment.clone());
            }
            MemoryEvent::AddPersona { persona } => {
                if self.personas.contains_key(&persona.id) {
                    return Err(StoreError::DuplicatePersona(persona.id));
                }
                self.personas.insert(persona.id, persona.clone());
                self.active.insert(persona.id);
            }
            MemoryEvent::RemovePersona { id } => {
                if !self.active.remove(id) {
                    return Err(StoreError::NotActive(*id));
                }
            }
            MemoryEvent::RestorePersona { id } => {
                if !self.personas.contains_key(id) {
                    return Err(StoreError::UnknownPersona(*id));
                }
                self.active.insert(*id);
            }
            MemoryEvent::Scored { a, b, delta } => self.scores.insert(*a, *b, *delta),
            MemoryEvent::Refinement { record } => {
                let (p1, p2) = record.parents;
                for id in [p1, p2] {
                    if !self.personas.contains_key(&id) {
                        return Err(StoreError::UnknownPersona(id));
                    }
                }
                if record.outputs.len() != record.strategy.output_arity() {
                    return Err(StoreError::OutputArity(p1, p2, record.outputs.len(), record.strategy));
                }
                self.refinements.push(record.clone());
            }
            MemoryEvent::SessionBoundary { session } => {
                if *session < self.session {
                    return Err(StoreError::SessionOrder {
                        current: self.session,
                        got: *session,
                    });
                }
                self.session = *session;
            }
        }
        self.journal.push(event);
        Ok(())
    }

    /// Events applied since the last drain.
    pub fn pending(&self) -> &[MemoryEvent] {
        &self.journal
    }

    pub fn drain_pending(&mut self) -> Vec<MemoryEvent> {
        core::mem::take(&mut self.journal)
    }

    pub fn scope(&self) -> u32 {
        self.scope
    }

    pub fn config(&self) -> &str {
        &self.config
    }

    pub fn session(&self) -> u32 {
        self.session
    }

    pub fn get(&self, id: PersonaId) -> Option<&Persona> {
        self.personas.get(&id)
    }

    pub fn is_active(&self, id: PersonaId) -> bool {
        self.active.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    /// Personas currently in memory, ascending by id.
    pub fn active(&self) -> impl Iterator<Item = &Persona> + '_ {
        self.active.iter().map(move |id| &self.personas[id])
    }

    pub fn active_ids(&self) -> BTreeSet<PersonaId> {
        self.active.clone()
    }

    pub fn active_for(&self, speaker: &Speaker) -> Vec<&Persona> {
        self.active().filter(|p| &p.speaker == speaker).collect()
    }

    /// Every persona ever recorded, including removed ones.
    pub fn all_personas(&self) -> impl Iterator<Item = &Persona> + '_ {
        self.personas.values()
    }

    pub fn last_id(&self) -> Option<PersonaId> {
        self.personas.keys().next_back().copied()
    }

    pub fn fragment(&self, id: FragmentId) -> Option<&DialogueFragment> {
        self.fragments.get(&id)
    }

    pub fn scores(&self) -> &PairScoreCache {
        &self.scores
    }

    pub fn refinements(&self) -> &[RefinementRecord] {
        &self.refinements
    }

    pub fn add_fragment(&mut self, fragment: DialogueFragment) -> Result<(), StoreError> {
        self.apply(MemoryEvent::AddFragment { fragment })
    }

    pub fn add(&mut self, persona: Persona) -> Result<(), StoreError> {
        self.apply(MemoryEvent::AddPersona { persona })
    }

    pub fn remove(&mut self, id: PersonaId) -> Result<(), StoreError> {
        self.apply(MemoryEvent::RemovePersona { id })
    }

    /// Re-activate a known persona. No event is recorded if it is already active.
    pub fn restore(&mut self, id: PersonaId) -> Result<(), StoreError> {
        if self.active.contains(&id) {
            return Ok(());
        }
        self.apply(MemoryEvent::RestorePersona { id })
    }

    pub fn end_session(&mut self, session: u32) -> Result<(), StoreError> {
        self.apply(MemoryEvent::SessionBoundary { session })
    }

    /// Journal every cache entry not yet known to the store.
    pub fn merge_scores(&mut self, cache: &PairScoreCache) {
        let fresh: Vec<(PersonaId, PersonaId, f64)> = cache
            .iter()
            .filter(|(a, b, _)| self.scores.get(*a, *b).is_none())
            .collect();
        for (a, b, delta) in fresh {
            self.apply(MemoryEvent::Scored { a, b, delta })
                .expect("score events always apply");
        }
    }

    /// Record a refinement: the record, then its new personas, then restored
    /// parents for preservation.
    pub fn commit_refinement(&mut self, out: RefineOutput) -> Result<(), StoreError> {
        let RefineOutput { record, personas } = out;
        let preserve = record.strategy == Strategy::Preservation;
        let parents = record.parents;
        self.apply(MemoryEvent::Refinement { record })?;
        for p in personas {
            self.add(p)?;
        }
        if preserve {
            self.restore(parents.0)?;
            self.restore(parents.1)?;
        }
        Ok(())
    }

    /// Pairs a previous refinement judged non-contradictory.
    pub fn preserved_pairs(&self) -> BTreeSet<(PersonaId, PersonaId)> {
        self.refinements
            .iter()
            .filter(|r| r.strategy == Strategy::Preservation && !r.fallback)
            .map(|r| {
                let (a, b) = r.parents;
                if a <= b {
                    (a, b)
                } else {
                    (b, a)
                }
            })
            .collect()
    }

    /// Build the refinement graph over all active personas, reusing and
    /// extending the store's score cache.
    pub fn contradiction_graph<N: NliProvider + ?Sized>(
        &mut self,
        options: GraphOptions,
        nli: &N,
    ) -> Result<ContradictionGraph, ContradictionError> {
        let personas: Vec<Persona> = self.active().cloned().collect();
        let mut cache = self.scores.clone();
        let result = build_graph(&personas, &[], options, &mut cache, nli);
        self.merge_scores(&cache);
        result
    }

    pub fn context_for(&self, id: PersonaId) -> Option<PersonaContext> {
        let p = self.personas.get(&id)?;
        let source = match p.origin {
            Origin::Expanded(_) => p
                .parents
                .first()
                .and_then(|parent| self.personas.get(parent))
                .map_or_else(|| p.text.clone(), |parent| parent.text.clone()),
            _ => p.text.clone(),
        };
        let fragment = p
            .fragment
            .and_then(|f| self.fragments.get(&f))
            .map(|f| f.utterances.clone())
            .unwrap_or_default();
        Some(PersonaContext {
            text: p.text.clone(),
            source,
            fragment,
        })
    }

    /// Check that following parents from every persona reaches human personas
    /// without cycles.
    pub fn provenance_is_acyclic(&self) -> bool {
        // ids are allocated in creation order, so parents must precede children
        self.personas.values().all(|p| {
            p.parents.len() == p.origin.expected_parents()
                && p.parents
                    .iter()
                    .all(|parent| *parent < p.id && self.personas.contains_key(parent))
        })
    }
}

impl fmt::Display for MemoryStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "scope {} session {}: {} active / {} known personas, {} fragments, {} scores, {} refinements",
            self.scope,
            self.session,
            self.active.len(),
            self.personas.len(),
            self.fragments.len(),
            self.scores.len(),
            self.refinements.len()
        )
    }
}

/// How the memory reacts to the contradiction graph at the end of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Iterative graph refinement (one refinement per selected pair).
    Refine,
    /// Drop every persona in the graph.
    NliRemove,
    /// For each edge drop the older endpoint.
    NliRecent,
    /// Refine every edge independently.
    All,
    /// Keep everything.
    None,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::Refine,
        Policy::NliRemove,
        Policy::NliRecent,
        Policy::All,
        Policy::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Refine => "refine",
            Policy::NliRemove => "nli-remove",
            Policy::NliRecent => "nli-recent",
            Policy::All => "all",
            Policy::None => "none",
        }
    }

    pub fn refines(self) -> bool {
        matches!(self, Policy::Refine | Policy::All)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown policy {0:?}")]
pub struct UnknownPolicy(pub String);

impl FromStr for Policy {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "refine" | "caffeine" => Ok(Policy::Refine),
            "nli-remove" | "nliremove" | "remove" => Ok(Policy::NliRemove),
            "nli-recent" | "nlirecent" | "recent" => Ok(Policy::NliRecent),
            "all" => Ok(Policy::All),
            "none" => Ok(Policy::None),
            _ => Err(UnknownPolicy(s.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum PolicyError<E> {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("refinement failed: {0}")]
    Refine(E),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyOutcome {
    pub removed: Vec<PersonaId>,
    pub trace: AlgorithmTrace,
}

/// Apply `policy` to `store` given the session's contradiction graph.
///
/// `refine` is only invoked by the refining policies; it receives the pair
/// and a read-only view of the store (already updated for every previous
/// iteration) so callers can flush the journal before paying for a call.
pub fn apply_policy<E, F>(
    policy: Policy,
    store: &mut MemoryStore,
    graph: &ContradictionGraph,
    restore_isolated: bool,
    refine: F,
) -> Result<PolicyOutcome, PolicyError<E>>
where
    F: FnMut(&RefineRequest, &MemoryStore) -> Result<RefineOutput, E>,
{
    let mut outcome = PolicyOutcome::default();
    match policy {
        Policy::None => {}
        Policy::NliRemove => {
            for id in graph.nodes() {
                store.remove(id)?;
                outcome.removed.push(id);
            }
        }
        Policy::NliRecent => {
            let doomed = nli_recent_removals(graph, |id| store.get(id).map(|p| p.session))?;
            for id in doomed {
                store.remove(id)?;
                outcome.removed.push(id);
            }
        }
        Policy::Refine => {
            outcome.trace = run_algorithm1(graph.clone(), store, restore_isolated, refine)?;
        }
        Policy::All => {
            outcome.trace = refine_all(graph, store, refine)?;
        }
    }
    Ok(outcome)
}

/// Endpoints removed by the recency rule: for each edge the persona from the
/// earlier session, or the smaller id on equal sessions.
pub fn nli_recent_removals(
    graph: &ContradictionGraph,
    session_of: impl Fn(PersonaId) -> Option<u32>,
) -> Result<BTreeSet<PersonaId>, StoreError> {
    let mut doomed = BTreeSet::new();
    for (a, b, _) in graph.edges() {
        let sa = session_of(a).ok_or(StoreError::UnknownPersona(a))?;
        let sb = session_of(b).ok_or(StoreError::UnknownPersona(b))?;
        let older = if (sa, a) < (sb, b) { a } else { b };
        doomed.insert(older);
    }
    Ok(doomed)
}

/// Cosine similarity; zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Top-`k` candidates by cosine similarity to `query`, ties broken by id.
pub fn rank_by_cosine(query: &[f64], candidates: &[(PersonaId, Vec<f64>)], k: usize) -> Vec<(PersonaId, f64)> {
    let mut scored: Vec<(PersonaId, f64)> = candidates.iter().map(|(id, v)| (*id, cosine(query, v))).collect();
    scored.sort_by(|(ia, sa), (ib, sb)| sb.total_cmp(sa).then(ia.cmp(ib)));
    scored.truncate(k);
    scored
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Retrieve the `k` personas most similar to `query` across all speakers.
pub fn retrieve<'a, E: EmbeddingProvider + ?Sized>(
    personas: &[&'a Persona],
    query: &str,
    k: usize,
    embedder: &E,
) -> Result<Vec<(&'a Persona, f64)>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if personas.is_empty() {
        return Ok(Vec::new());
    }
    let mut texts: Vec<&str> = Vec::with_capacity(personas.len() + 1);
    texts.push(query);
    texts.extend(personas.iter().map(|p| p.text.as_str()));
    let vectors = embedder.embed(&texts)?;
    if vectors.len() != texts.len() {
        return Err(ProviderError::BadResponse(alloc::format!(
            "embedder returned {} vectors for {} texts",
            vectors.len(),
            texts.len()
        ))
        .into());
    }
    let mut vectors = vectors.into_iter();
    let q = vectors.next().expect("query vector");
    let candidates: Vec<(PersonaId, Vec<f64>)> = personas.iter().map(|p| p.id).zip(vectors).collect();
    let by_id: BTreeMap<PersonaId, &'a Persona> = personas.iter().map(|p| (p.id, *p)).collect();
    Ok(rank_by_cosine(&q, &candidates, k)
        .into_iter()
        .map(|(id, s)| (by_id[&id], s))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persona::{PersonaFactory, RelationType};
    use alloc::vec;

    fn store_with(sessions: &[u32]) -> (MemoryStore, Vec<PersonaId>) {
        let mut f = PersonaFactory::new(0);
        let mut s = MemoryStore::open(0, "test");
        let mut ids = vec![];
        for (i, sess) in sessions.iter().enumerate() {
            let p = f
                .new_persona("A".into(), *sess, &alloc::format!("p{i}"), Origin::Human, vec![], None)
                .unwrap();
            ids.push(p.id);
            s.add(p).unwrap();
        }
        (s, ids)
    }

    fn never(_: &RefineRequest, _: &MemoryStore) -> Result<RefineOutput, ()> {
        panic!("not a refining policy")
    }

    #[test]
    fn nli_remove_drops_all_graph_nodes() {
        let (mut s, ids) = store_with(&[1, 1, 1, 1]);
        let g = ContradictionGraph::from_edges(0.8, [(ids[0], ids[1], 0.9), (ids[1], ids[2], 0.85)]);
        let out = apply_policy(Policy::NliRemove, &mut s, &g, false, never).unwrap();
        assert_eq!(out.removed, ids[..3].to_vec());
        assert_eq!(s.active_ids().into_iter().collect::<Vec<_>>(), vec![ids[3]]);
    }

    #[test]
    fn nli_recent_keeps_newer_endpoint() {
        let (mut s, ids) = store_with(&[1, 3]);
        let g = ContradictionGraph::from_edges(0.8, [(ids[0], ids[1], 0.9)]);
        apply_policy(Policy::NliRecent, &mut s, &g, false, never).unwrap();
        assert!(!s.is_active(ids[0]));
        assert!(s.is_active(ids[1]));
    }

    #[test]
    fn nli_recent_chain_keeps_hub() {
        // a: session 1, b: session 3, c: session 2
        let (mut s, ids) = store_with(&[1, 3, 2]);
        let (a, b, c) = (ids[0], ids[1], ids[2]);
        let g = ContradictionGraph::from_edges(0.8, [(a, b, 0.9), (b, c, 0.9)]);
        apply_policy(Policy::NliRecent, &mut s, &g, false, never).unwrap();
        assert_eq!(s.active_ids().into_iter().collect::<Vec<_>>(), vec![b]);
    }

    #[test]
    fn nli_recent_tie_removes_smaller_id() {
        let (mut s, ids) = store_with(&[2, 2]);
        let g = ContradictionGraph::from_edges(0.8, [(ids[1], ids[0], 0.9)]);
        apply_policy(Policy::NliRecent, &mut s, &g, false, never).unwrap();
        assert!(!s.is_active(ids[0]) && s.is_active(ids[1]));
    }

    #[test]
    fn none_policy_keeps_everything() {
        let (mut s, ids) = store_with(&[1, 1]);
        let g = ContradictionGraph::from_edges(0.8, [(ids[0], ids[1], 0.9)]);
        apply_policy(Policy::None, &mut s, &g, false, never).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn policy_names_parse() {
        for p in Policy::ALL {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
        assert_eq!("caffeine".parse::<Policy>().unwrap(), Policy::Refine);
        assert!("gold".parse::<Policy>().is_err());
    }

    #[test]
    fn replay_reproduces_state() {
        let (mut s, ids) = store_with(&[1, 1, 2]);
        s.remove(ids[1]).unwrap();
        s.end_session(1).unwrap();
        let events = s.drain_pending();
        let replayed = MemoryStore::replay(events).unwrap();
        assert_eq!(replayed, s);
        assert_eq!(replayed.len(), 2);
    }

    #[test]
    fn empty_replay_is_empty_store() {
        let s = MemoryStore::replay(Vec::new()).unwrap();
        assert!(s.is_empty());
        assert_eq!(s, MemoryStore::new());
    }

    #[test]
    fn invalid_events_rejected() {
        let (mut s, ids) = store_with(&[1]);
        let dup = s.get(ids[0]).unwrap().clone();
        assert_eq!(s.add(dup), Err(StoreError::DuplicatePersona(ids[0])));
        s.remove(ids[0]).unwrap();
        assert_eq!(s.remove(ids[0]), Err(StoreError::NotActive(ids[0])));
        assert_eq!(
            s.restore(PersonaId::new(0, 99)),
            Err(StoreError::UnknownPersona(PersonaId::new(0, 99)))
        );
    }

    #[test]
    fn expanded_context_uses_parent() {
        let mut f = PersonaFactory::new(0);
        let mut s = MemoryStore::new();
        let frag = DialogueFragment {
            id: FragmentId { session: 1, ordinal: 0 },
            session: 1,
            utterances: vec![Utterance {
                speaker: "A".into(),
                text: "I live on coffee.".into(),
            }],
            anchor_index: Some(0),
            annotations: vec!["I drink coffee.".into()],
            anchor_personas: vec![],
        };
        s.add_fragment(frag.clone()).unwrap();
        let parent = f
            .new_persona("A".into(), 1, "I drink coffee.", Origin::Human, vec![], Some(frag.id))
            .unwrap();
        let child = f
            .expansion_of(&parent, RelationType::XWant, "I want to stay awake.")
            .unwrap();
        s.add(parent).unwrap();
        s.add(child.clone()).unwrap();
        let ctx = s.context_for(child.id).unwrap();
        assert_eq!(ctx.source, "I drink coffee.");
        assert_eq!(ctx.fragment, frag.utterances);
        assert!(s.provenance_is_acyclic());
    }

    struct Table(Vec<(&'static str, Vec<f64>)>);
    impl EmbeddingProvider for Table {
        fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ProviderError> {
            Ok(texts
                .iter()
                .map(|t| self.0.iter().find(|(k, _)| k == t).map(|(_, v)| v.clone()).unwrap())
                .collect())
        }
    }

    #[test]
    fn exact_match_ranks_first_and_underfull_returns_all() {
        let mut f = PersonaFactory::new(0);
        let ps: Vec<Persona> = ["x", "y", "z"]
            .iter()
            .map(|t| f.new_persona("A".into(), 1, t, Origin::Human, vec![], None).unwrap())
            .collect();
        let emb = Table(vec![
            ("q", vec![0.0, 1.0, 0.0]),
            ("x", vec![1.0, 0.0, 0.0]),
            ("y", vec![0.0, 1.0, 0.0]),
            ("z", vec![0.0, 0.0, 1.0]),
        ]);
        let refs: Vec<&Persona> = ps.iter().collect();
        let top = retrieve(&refs, "q", 1, &emb).unwrap();
        assert_eq!(top[0].0.text, "y");
        assert_eq!(top[0].1, 1.0);
        let all = retrieve(&refs[..2], "q", 3, &emb).unwrap();
        assert_eq!(all.len(), 2);
        assert!(matches!(retrieve(&refs, "q", 0, &emb), Err(RetrievalError::ZeroK)));
    }

    proptest::proptest! {
        #[test]
        fn retrieval_invariant_under_positive_scaling(
            vecs in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 1..30),
            q in proptest::collection::vec(-1.0f64..1.0, 4),
            scale in 0.01f64..100.0,
            k in 1usize..40,
        ) {
            let cands: Vec<(PersonaId, Vec<f64>)> = vecs.iter().enumerate().map(|(i, v)| (PersonaId::new(0, i as u64), v.clone())).collect();
            let scaled: Vec<(PersonaId, Vec<f64>)> = cands.iter().map(|(id, v)| (*id, v.iter().map(|x| x * scale).collect())).collect();
            let a: Vec<PersonaId> = rank_by_cosine(&q, &cands, k).into_iter().map(|(id, _)| id).collect();
            let b: Vec<PersonaId> = rank_by_cosine(&q, &scaled, k).into_iter().map(|(id, _)| id).collect();
            // scaling can perturb the last ulp of a cosine; only compare when scores are well separated
            let scores: Vec<f64> = rank_by_cosine(&q, &cands, cands.len()).into_iter().map(|(_, s)| s).collect();
            let separated = scores.windows(2).all(|w| (w[0] - w[1]).abs() > 1e-9);
            if separated {
                proptest::prop_assert_eq!(a, b);
            }
        }
    }
}
