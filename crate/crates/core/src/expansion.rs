//! Commonsense expansion of human personas and the one-to-one filter that
//! drops expansions contradicting their source persona.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::persona::{Persona, PersonaError, PersonaFactory, PersonaId, RelationType};
use crate::provider::{CommonsenseProvider, NliProvider, ProviderError};

/// Expansions whose contradiction probability against their parent is
/// strictly above this value are filtered out.
pub const INITIAL_FILTER_THRESHOLD: f64 = 0.33;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExpansionError {
    #[error("only human personas are expanded (persona {0})")]
    NotHuman(PersonaId),
    #[error("expanded persona {0} has no known human parent")]
    MissingParent(PersonaId),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Persona(#[from] PersonaError),
}

/// Trim and ensure terminal punctuation. Returns `None` for blank output.
pub fn normalize_generation(raw: &str) -> Option<String> {
    let t = raw.trim();
    if t.is_empty() {
        return None;
    }
    let mut s = t.to_string();
    if !s.ends_with(['.', '!', '?']) {
        s.push('.');
    }
    Some(s)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expansion {
    /// At most one persona per relation, in relation order.
    pub personas: Vec<Persona>,
    /// Relations for which the provider returned nothing usable.
    pub empty: Vec<RelationType>,
}

pub fn expand_persona<C: CommonsenseProvider + ?Sized>(
    persona: &Persona,
    generator: &C,
    factory: &mut PersonaFactory,
) -> Result<Expansion, ExpansionError> {
    if !persona.is_human() {
        return Err(ExpansionError::NotHuman(persona.id));
    }
    let mut out = Expansion {
        personas: Vec::with_capacity(RelationType::ALL.len()),
        empty: Vec::new(),
    };
    for relation in RelationType::ALL {
        let generations = generator.generate(&persona.text, relation)?;
        match generations.iter().find_map(|g| normalize_generation(g)) {
            Some(text) => out.personas.push(factory.expansion_of(persona, relation, &text)?),
            None => {
                log::debug!("empty generation for persona {} relation {}", persona.id, relation);
                out.empty.push(relation);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<Persona>,
    pub filtered: Vec<Persona>,
}

impl FilterOutcome {
    pub fn filtered_ratio(&self) -> f64 {
        let total = self.kept.len() + self.filtered.len();
        if total == 0 {
            0.0
        } else {
            self.filtered.len() as f64 / total as f64
        }
    }
}

/// One-to-one filter between each expansion and its source persona.
///
/// The premise is the source persona and the hypothesis the expansion.
/// Scores are cached per (parent, child) so re-filtering is stable.
#[derive(Debug, Clone)]
pub struct InitialFilter {
    pub threshold: f64,
    cache: BTreeMap<(PersonaId, PersonaId), f64>,
}

impl Default for InitialFilter {
    fn default() -> Self {
        InitialFilter::new(INITIAL_FILTER_THRESHOLD)
    }
}

impl InitialFilter {
    pub fn new(threshold: f64) -> Self {
        InitialFilter {
            threshold,
            cache: BTreeMap::new(),
        }
    }

    pub fn cached(&self, parent: PersonaId, child: PersonaId) -> Option<f64> {
        self.cache.get(&(parent, child)).copied()
    }

    pub fn apply<N: NliProvider + ?Sized>(
        &mut self,
        expanded: Vec<Persona>,
        originals: &[Persona],
        nli: &N,
    ) -> Result<FilterOutcome, ExpansionError> {
        let by_id: BTreeMap<PersonaId, &Persona> = originals.iter().map(|p| (p.id, p)).collect();
        let mut outcome = FilterOutcome::default();
        for child in expanded {
            let parent = child
                .parents
                .first()
                .and_then(|id| by_id.get(id))
                .filter(|p| p.is_human())
                .ok_or(ExpansionError::MissingParent(child.id))?;
            let key = (parent.id, child.id);
            let delta = match self.cache.get(&key) {
                Some(d) => *d,
                None => {
                    let d = nli.classify(&parent.text, &child.text)?.validate()?.contradiction;
                    self.cache.insert(key, d);
                    d
                }
            };
            if delta > self.threshold {
                outcome.filtered.push(child);
            } else {
                outcome.kept.push(child);
            }
        }
        Ok(outcome)
    }
}
