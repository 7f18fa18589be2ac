//! Pairwise contradiction scoring, the refinement graph, and contradiction
//! statistics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::persona::{Persona, PersonaId};
use crate::provider::{NliProvider, ProviderError};

/// Default graph threshold for contradiction probability.
pub const DEFAULT_MU: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContradictionError {
    #[error("personas {0} and {1} belong to different speakers")]
    SpeakerMismatch(PersonaId, PersonaId),
    #[error("cannot score persona {0} against itself")]
    SelfPair(PersonaId),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

fn ordered(a: PersonaId, b: PersonaId) -> (PersonaId, PersonaId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Symmetric cache of contradiction probabilities keyed by persona ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairScoreCache {
    scores: BTreeMap<(PersonaId, PersonaId), f64>,
}

impl PairScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, a: PersonaId, b: PersonaId) -> Option<f64> {
        self.scores.get(&ordered(a, b)).copied()
    }

    pub fn insert(&mut self, a: PersonaId, b: PersonaId, delta: f64) {
        self.scores.insert(ordered(a, b), delta);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PersonaId, PersonaId, f64)> + '_ {
        self.scores.iter().map(|(&(a, b), &d)| (a, b, d))
    }
}

#[derive(Serialize, Deserialize)]
struct CachedScore {
    a: PersonaId,
    b: PersonaId,
    delta: f64,
}

impl Serialize for PairScoreCache {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter().map(|(a, b, delta)| CachedScore { a, b, delta }))
    }
}

impl<'de> Deserialize<'de> for PairScoreCache {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries = Vec::<CachedScore>::deserialize(d)?;
        let mut cache = PairScoreCache::new();
        for e in entries {
            cache.insert(e.a, e.b, e.delta);
        }
        Ok(cache)
    }
}

/// How δ is compared with μ when deciding graph membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ThresholdMode {
    /// δ ≥ μ
    #[default]
    Inclusive,
    /// δ > μ
    Strict,
}

impl ThresholdMode {
    pub fn admits(self, delta: f64, mu: f64) -> bool {
        match self {
            ThresholdMode::Inclusive => delta >= mu,
            ThresholdMode::Strict => delta > mu,
        }
    }
}

/// Contradiction probability of a pair: the max over both NLI directions.
pub fn score_pair<N: NliProvider + ?Sized>(
    p: &Persona,
    q: &Persona,
    nli: &N,
    cache: &mut PairScoreCache,
) -> Result<f64, ContradictionError> {
    check_pair(p, q)?;
    if let Some(d) = cache.get(p.id, q.id) {
        return Ok(d);
    }
    let forward = nli.classify(&p.text, &q.text)?.validate()?.contradiction;
    let backward = nli.classify(&q.text, &p.text)?.validate()?.contradiction;
    let delta = forward.max(backward);
    cache.insert(p.id, q.id, delta);
    Ok(delta)
}

fn check_pair(p: &Persona, q: &Persona) -> Result<(), ContradictionError> {
    if p.id == q.id {
        return Err(ContradictionError::SelfPair(p.id));
    }
    if p.speaker != q.speaker {
        return Err(ContradictionError::SpeakerMismatch(p.id, q.id));
    }
    Ok(())
}

/// Refinement graph: personas as nodes, contradictory pairs as weighted edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContradictionGraph {
    pub mu: f64,
    nodes: BTreeSet<PersonaId>,
    #[serde(with = "edge_list")]
    edges: BTreeMap<(PersonaId, PersonaId), f64>,
}

mod edge_list {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Edge {
        a: PersonaId,
        b: PersonaId,
        delta: f64,
    }

    pub fn serialize<S: Serializer>(edges: &BTreeMap<(PersonaId, PersonaId), f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(edges.iter().map(|(&(a, b), &delta)| Edge { a, b, delta }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(PersonaId, PersonaId), f64>, D::Error> {
        Ok(Vec::<Edge>::deserialize(d)?
            .into_iter()
            .map(|e| (ordered(e.a, e.b), e.delta))
            .collect())
    }
}

impl ContradictionGraph {
    pub fn empty(mu: f64) -> Self {
        ContradictionGraph {
            mu,
            nodes: BTreeSet::new(),
            edges: BTreeMap::new(),
        }
    }

    /// Build from explicit edges. Self-loops are ignored; duplicate pairs keep
    /// the last weight.
    pub fn from_edges(mu: f64, edges: impl IntoIterator<Item = (PersonaId, PersonaId, f64)>) -> Self {
        let mut g = ContradictionGraph::empty(mu);
        for (a, b, d) in edges {
            if a != b {
                g.nodes.insert(a);
                g.nodes.insert(b);
                g.edges.insert(ordered(a, b), d);
            }
        }
        g
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = PersonaId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn contains(&self, id: PersonaId) -> bool {
        self.nodes.contains(&id)
    }

    /// Edges as `(a, b, δ)` with `a < b`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (PersonaId, PersonaId, f64)> + '_ {
        self.edges.iter().map(|(&(a, b), &d)| (a, b, d))
    }

    pub fn weight(&self, a: PersonaId, b: PersonaId) -> Option<f64> {
        self.edges.get(&ordered(a, b)).copied()
    }

    /// Neighbors of `id` with edge weights, in ascending id order.
    pub fn neighbors(&self, id: PersonaId) -> Vec<(PersonaId, f64)> {
        let mut out: Vec<(PersonaId, f64)> = self
            .edges
            .iter()
            .filter_map(|(&(a, b), &d)| {
                if a == id {
                    Some((b, d))
                } else if b == id {
                    Some((a, d))
                } else {
                    None
                }
            })
            .collect();
        out.sort_by_key(|(n, _)| *n);
        out
    }

    pub fn degree(&self, id: PersonaId) -> usize {
        self.edges.keys().filter(|(a, b)| *a == id || *b == id).count()
    }

    pub fn max_degree(&self) -> usize {
        let mut deg: BTreeMap<PersonaId, usize> = BTreeMap::new();
        for &(a, b) in self.edges.keys() {
            *deg.entry(a).or_default() += 1;
            *deg.entry(b).or_default() += 1;
        }
        deg.values().copied().max().unwrap_or(0)
    }

    /// Sum of incident edge weights per node, summed in ascending edge order.
    pub fn weighted_degrees(&self) -> BTreeMap<PersonaId, f64> {
        let mut out: BTreeMap<PersonaId, f64> = self.nodes.iter().map(|&n| (n, 0.0)).collect();
        for (&(a, b), &d) in &self.edges {
            *out.entry(a).or_default() += d;
            *out.entry(b).or_default() += d;
        }
        out
    }

    pub fn remove_node(&mut self, id: PersonaId) -> bool {
        self.edges.retain(|&(a, b), _| a != id && b != id);
        self.nodes.remove(&id)
    }

    pub fn remove_edge(&mut self, a: PersonaId, b: PersonaId) -> Option<f64> {
        self.edges.remove(&ordered(a, b))
    }

    /// Remove nodes with no incident edge; returns them in ascending order.
    pub fn remove_isolated(&mut self) -> Vec<PersonaId> {
        let mut touched = BTreeSet::new();
        for &(a, b) in self.edges.keys() {
            touched.insert(a);
            touched.insert(b);
        }
        let isolated: Vec<PersonaId> = self.nodes.difference(&touched).copied().collect();
        for id in &isolated {
            self.nodes.remove(id);
        }
        isolated
    }
}

/// Options for [`build_graph`].
#[derive(Debug, Clone, Copy)]
pub struct GraphOptions {
    pub mu: f64,
    pub mode: ThresholdMode,
    /// Pairs per NLI batch (each pair costs two directional requests).
    pub batch_size: usize,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            mu: DEFAULT_MU,
            mode: ThresholdMode::Inclusive,
            batch_size: 32,
        }
    }
}

/// Score every same-speaker pair over `candidates ∪ memory` and keep pairs
/// admitted by the threshold.
///
/// Pairs already in `cache` (from previous sessions) are not re-scored.
/// Uncached pairs are sent to the NLI provider in batches and the cache is
/// updated after each batch.
pub fn build_graph<N: NliProvider + ?Sized>(
    candidates: &[Persona],
    memory: &[Persona],
    options: GraphOptions,
    cache: &mut PairScoreCache,
    nli: &N,
) -> Result<ContradictionGraph, ContradictionError> {
    let mut pool: BTreeMap<PersonaId, &Persona> = BTreeMap::new();
    for p in memory.iter().chain(candidates) {
        pool.insert(p.id, p);
    }
    let personas: Vec<&Persona> = pool.values().copied().collect();

    let mut pending: Vec<(&Persona, &Persona)> = Vec::new();
    for (i, p) in personas.iter().enumerate() {
        for q in &personas[i + 1..] {
            if p.speaker == q.speaker && cache.get(p.id, q.id).is_none() {
                pending.push((p, q));
            }
        }
    }
    for chunk in pending.chunks(options.batch_size.max(1)) {
        let requests: Vec<(&str, &str)> = chunk
            .iter()
            .flat_map(|(p, q)| [(p.text.as_str(), q.text.as_str()), (q.text.as_str(), p.text.as_str())])
            .collect();
        let results = nli.classify_batch(&requests)?;
        if results.len() != requests.len() {
            return Err(ProviderError::BadResponse(alloc::format!(
                "NLI batch returned {} results for {} requests",
                results.len(),
                requests.len()
            ))
            .into());
        }
        for ((p, q), pair) in chunk.iter().zip(results.chunks(2)) {
            let forward = pair[0].validate()?.contradiction;
            let backward = pair[1].validate()?.contradiction;
            cache.insert(p.id, q.id, forward.max(backward));
        }
    }

    let mut graph = ContradictionGraph::empty(options.mu);
    for (i, p) in personas.iter().enumerate() {
        for q in &personas[i + 1..] {
            if p.speaker != q.speaker {
                continue;
            }
            let delta = cache.get(p.id, q.id).expect("scored above");
            if options.mode.admits(delta, options.mu) {
                graph.nodes.insert(p.id);
                graph.nodes.insert(q.id);
                graph.edges.insert(ordered(p.id, q.id), delta);
            }
        }
    }
    Ok(graph)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContradictionStats {
    pub intra_session: u64,
    pub inter_session: u64,
    pub total: u64,
}

impl core::ops::AddAssign for ContradictionStats {
    fn add_assign(&mut self, o: Self) {
        self.intra_session += o.intra_session;
        self.inter_session += o.inter_session;
        self.total += o.total;
    }
}

/// Count graph edges within one session versus spanning sessions.
pub fn contradiction_stats(
    graph: &ContradictionGraph,
    session_of: impl Fn(PersonaId) -> Option<u32>,
) -> ContradictionStats {
    let mut stats = ContradictionStats::default();
    for (a, b, _) in graph.edges() {
        if session_of(a) == session_of(b) {
            stats.intra_session += 1;
        } else {
            stats.inter_session += 1;
        }
    }
    stats.total = stats.intra_session + stats.inter_session;
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::MockNli;
    use crate::persona::{Origin, PersonaFactory};
    use alloc::vec;

    fn personas(texts: &[&str]) -> Vec<Persona> {
        let mut f = PersonaFactory::new(0);
        texts
            .iter()
            .map(|t| f.new_persona("A".into(), 1, t, Origin::Human, vec![], None).unwrap())
            .collect()
    }

    #[test]
    fn identical_text_scores_zero() {
        let ps = personas(&["I like tea.", "I like tea."]);
        let mut cache = PairScoreCache::new();
        assert_eq!(score_pair(&ps[0], &ps[1], &MockNli::new(0.5), &mut cache).unwrap(), 0.0);
    }

    #[test]
    fn max_over_directions() {
        let ps = personas(&["p", "q"]);
        let mut nli = MockNli::new(0.0);
        nli.insert_directed("p", "q", 0.7).insert_directed("q", "p", 0.9);
        let mut cache = PairScoreCache::new();
        assert_eq!(score_pair(&ps[0], &ps[1], &nli, &mut cache).unwrap(), 0.9);
        assert_eq!(cache.get(ps[1].id, ps[0].id), Some(0.9));
    }

    #[test]
    fn lazy_versus_tidy() {
        let ps = personas(&["I am lazy", "I clean my room every day"]);
        let mut nli = MockNli::new(0.1);
        nli.insert("I am lazy", "I clean my room every day", 0.95);
        let mut cache = PairScoreCache::new();
        assert_eq!(score_pair(&ps[0], &ps[1], &nli, &mut cache).unwrap(), 0.95);
    }

    #[test]
    fn speaker_mismatch_rejected() {
        let mut ps = personas(&["p", "q"]);
        ps[1].speaker = "B".into();
        let mut cache = PairScoreCache::new();
        assert!(matches!(
            score_pair(&ps[0], &ps[1], &MockNli::new(0.0), &mut cache),
            Err(ContradictionError::SpeakerMismatch(..))
        ));
    }

    #[test]
    fn threshold_applied_by_hand() {
        let ps = personas(&["a", "b", "c"]);
        let mut nli = MockNli::new(0.0);
        nli.insert("a", "b", 0.9).insert("a", "c", 0.5).insert("b", "c", 0.85);
        let mut cache = PairScoreCache::new();
        let g = build_graph(&ps, &[], GraphOptions::default(), &mut cache, &nli).unwrap();
        assert_eq!(g.node_count(), 3);
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, vec![(ps[0].id, ps[1].id, 0.9), (ps[1].id, ps[2].id, 0.85)]);
    }

    #[test]
    fn boundary_is_inclusive_unless_strict() {
        let ps = personas(&["a", "b", "c"]);
        let mut nli = MockNli::new(0.0);
        nli.insert("a", "b", 0.80).insert("b", "c", 0.79);
        let mut cache = PairScoreCache::new();
        let g = build_graph(&ps, &[], GraphOptions::default(), &mut cache, &nli).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(ps[0].id, ps[1].id, 0.80)]);
        let strict = GraphOptions {
            mode: ThresholdMode::Strict,
            ..GraphOptions::default()
        };
        let g = build_graph(&ps, &[], strict, &mut cache, &nli).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn no_contradictions_gives_empty_graph() {
        let ps = personas(&["a", "b", "c", "d"]);
        let mut cache = PairScoreCache::new();
        let g = build_graph(&ps, &[], GraphOptions::default(), &mut cache, &MockNli::new(0.79)).unwrap();
        assert!(g.is_empty());
        assert_eq!(cache.len(), 6);
    }

    #[test]
    fn cached_pairs_are_not_rescored() {
        let ps = personas(&["a", "b", "c"]);
        let counted = crate::provider::Counted::new(MockNli::new(0.9));
        let mut cache = PairScoreCache::new();
        let g1 = build_graph(&ps[2..], &ps[..2], GraphOptions::default(), &mut cache, &counted).unwrap();
        let first = counted.counts().items;
        assert_eq!(first, 6);
        let g2 = build_graph(&ps[2..], &ps[..2], GraphOptions::default(), &mut cache, &counted).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(counted.counts().items, first);
    }

    #[test]
    fn stats_split_by_session() {
        let mut ps = personas(&["a", "b", "c"]);
        ps[2].session = 2;
        let g = ContradictionGraph::from_edges(0.8, [(ps[0].id, ps[1].id, 0.9), (ps[1].id, ps[2].id, 0.9)]);
        let lookup = |id: PersonaId| ps.iter().find(|p| p.id == id).map(|p| p.session);
        let s = contradiction_stats(&g, lookup);
        assert_eq!((s.intra_session, s.inter_session, s.total), (1, 1, 2));
    }

    #[test]
    fn isolated_nodes_removed() {
        let ids: Vec<PersonaId> = (0..4).map(|i| PersonaId::new(0, i)).collect();
        let mut g = ContradictionGraph::from_edges(
            0.8,
            [(ids[0], ids[1], 0.9), (ids[0], ids[2], 0.85), (ids[2], ids[3], 0.8)],
        );
        g.remove_node(ids[0]);
        assert_eq!(g.remove_isolated(), vec![ids[1]]);
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.max_degree(), 1);
    }
}
