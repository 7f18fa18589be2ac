//! Domain types shared across the engine: personas, dialogue fragments,
//! relation types, refinement strategies and their provenance records.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque speaker label ("A", "B", ...). Personas are never merged across speakers.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Speaker(pub String);

impl Speaker {
    pub fn new(label: impl Into<String>) -> Self {
        Speaker(label.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Speaker {
    fn from(s: &str) -> Self {
        Speaker(s.to_string())
    }
}

/// Persona identifier: a monotonically increasing counter within a scope.
///
/// Scopes keep ids unique when several dialogues are processed in one run;
/// the total order `(scope, seq)` drives every deterministic tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct PersonaId {
    pub scope: u32,
    pub seq: u64,
}

impl PersonaId {
    pub const fn new(scope: u32, seq: u64) -> Self {
        PersonaId { scope, seq }
    }
}

impl fmt::Display for PersonaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.scope, self.seq)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed persona id {0:?}")]
pub struct ParseIdError(pub String);

impl FromStr for PersonaId {
    type Err = ParseIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (scope, seq) = s.split_once('-').ok_or_else(|| ParseIdError(s.to_string()))?;
        Ok(PersonaId {
            scope: scope.parse().map_err(|_| ParseIdError(s.to_string()))?,
            seq: seq.parse().map_err(|_| ParseIdError(s.to_string()))?,
        })
    }
}

impl From<PersonaId> for String {
    fn from(id: PersonaId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for PersonaId {
    type Error = ParseIdError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Fragment identifier: session index plus ordinal within the session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct FragmentId {
    pub session: u32,
    pub ordinal: u32,
}

impl fmt::Display for FragmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}f{}", self.session, self.ordinal)
    }
}

impl FromStr for FragmentId {
    type Err = ParseIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ParseIdError(s.to_string());
        let rest = s.strip_prefix('s').ok_or_else(bad)?;
        let (session, ordinal) = rest.split_once('f').ok_or_else(bad)?;
        Ok(FragmentId {
            session: session.parse().map_err(|_| bad())?,
            ordinal: ordinal.parse().map_err(|_| bad())?,
        })
    }
}

impl From<FragmentId> for String {
    fn from(id: FragmentId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for FragmentId {
    type Error = ParseIdError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// The nine cause-effect relation types used for commonsense expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationType {
    #[serde(rename = "xAttr")]
    XAttr,
    #[serde(rename = "xEffect")]
    XEffect,
    #[serde(rename = "xIntent")]
    XIntent,
    #[serde(rename = "xNeed")]
    XNeed,
    #[serde(rename = "xReact")]
    XReact,
    #[serde(rename = "xWant")]
    XWant,
    #[serde(rename = "oEffect")]
    OEffect,
    #[serde(rename = "oReact")]
    OReact,
    #[serde(rename = "oWant")]
    OWant,
}

impl RelationType {
    pub const ALL: [RelationType; 9] = [
        RelationType::XAttr,
        RelationType::XEffect,
        RelationType::XIntent,
        RelationType::XNeed,
        RelationType::XReact,
        RelationType::XWant,
        RelationType::OEffect,
        RelationType::OReact,
        RelationType::OWant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationType::XAttr => "xAttr",
            RelationType::XEffect => "xEffect",
            RelationType::XIntent => "xIntent",
            RelationType::XNeed => "xNeed",
            RelationType::XReact => "xReact",
            RelationType::XWant => "xWant",
            RelationType::OEffect => "oEffect",
            RelationType::OReact => "oReact",
            RelationType::OWant => "oWant",
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationType {
    type Err = PersonaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RelationType::ALL
            .iter()
            .copied()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| PersonaError::UnknownRelation(s.to_string()))
    }
}

/// Refinement strategy chosen for a contradictory pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Merge both personas into one sentence.
    Resolution,
    /// Rewrite each persona with qualifying context.
    Disambiguation,
    /// Keep both personas unchanged.
    Preservation,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Resolution, Strategy::Disambiguation, Strategy::Preservation];

    /// Number of sentences the strategy produces.
    pub fn output_arity(self) -> usize {
        match self {
            Strategy::Resolution => 1,
            Strategy::Disambiguation | Strategy::Preservation => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Resolution => "resolution",
            Strategy::Disambiguation => "disambiguation",
            Strategy::Preservation => "preservation",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Human,
    Expanded(RelationType),
    Refined(Strategy),
}

impl Origin {
    pub fn expected_parents(self) -> usize {
        match self {
            Origin::Human => 0,
            Origin::Expanded(_) => 1,
            Origin::Refined(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PersonaError {
    #[error("persona text is empty")]
    EmptyText,
    #[error("origin {origin:?} requires {expected} parent(s), got {got}")]
    ParentArityMismatch {
        origin: Origin,
        expected: usize,
        got: usize,
    },
    #[error("unknown relation type {0:?}")]
    UnknownRelation(String),
    #[error("session index must be >= 1")]
    InvalidSession,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: PersonaId,
    pub speaker: Speaker,
    pub session: u32,
    pub text: String,
    pub origin: Origin,
    pub parents: Vec<PersonaId>,
    pub fragment: Option<FragmentId>,
}

impl Persona {
    pub fn is_human(&self) -> bool {
        matches!(self.origin, Origin::Human)
    }
}

/// Allocates persona ids in `(scope, seq)` order and validates construction.
#[derive(Debug, Clone)]
pub struct PersonaFactory {
    scope: u32,
    next: u64,
}

impl PersonaFactory {
    pub fn new(scope: u32) -> Self {
        PersonaFactory { scope, next: 0 }
    }

    /// Continue allocation after `last` (used when resuming from a journal).
    pub fn resume_after(scope: u32, last: Option<PersonaId>) -> Self {
        let next = last.filter(|id| id.scope == scope).map_or(0, |id| id.seq + 1);
        PersonaFactory { scope, next }
    }

    pub fn scope(&self) -> u32 {
        self.scope
    }

    pub fn new_persona(
        &mut self,
        speaker: Speaker,
        session: u32,
        text: &str,
        origin: Origin,
        parents: Vec<PersonaId>,
        fragment: Option<FragmentId>,
    ) -> Result<Persona, PersonaError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(PersonaError::EmptyText);
        }
        if session == 0 {
            return Err(PersonaError::InvalidSession);
        }
        let expected = origin.expected_parents();
        if parents.len() != expected {
            return Err(PersonaError::ParentArityMismatch {
                origin,
                expected,
                got: parents.len(),
            });
        }
        let id = PersonaId::new(self.scope, self.next);
        self.next += 1;
        Ok(Persona {
            id,
            speaker,
            session,
            text: text.to_string(),
            origin,
            parents,
            fragment,
        })
    }

    /// Build an expansion of `parent`; speaker, session and fragment are inherited.
    pub fn expansion_of(
        &mut self,
        parent: &Persona,
        relation: RelationType,
        text: &str,
    ) -> Result<Persona, PersonaError> {
        self.new_persona(
            parent.speaker.clone(),
            parent.session,
            text,
            Origin::Expanded(relation),
            alloc::vec![parent.id],
            parent.fragment,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

/// Consecutive utterances a persona was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueFragment {
    pub id: FragmentId,
    pub session: u32,
    pub utterances: Vec<Utterance>,
    /// Index (within `utterances`) of the annotated utterance, if any.
    pub anchor_index: Option<usize>,
    /// Persona sentences annotated on the anchor utterance.
    pub annotations: Vec<String>,
    /// Human personas created from `annotations`, in the same order.
    pub anchor_personas: Vec<PersonaId>,
}

impl DialogueFragment {
    pub fn anchor_speaker(&self) -> Option<&Speaker> {
        self.anchor_index
            .and_then(|i| self.utterances.get(i))
            .map(|u| &u.speaker)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub parents: (PersonaId, PersonaId),
    pub strategy: Strategy,
    pub rationale: String,
    pub outputs: Vec<PersonaId>,
    pub delta: f64,
    pub session: u32,
    /// True when the strategy was forced after repeated unparseable outputs.
    #[serde(default)]
    pub fallback: bool,
    #[serde(default)]
    pub attempts: u32,
}
