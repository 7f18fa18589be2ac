//! Session transcripts and their partition into dialogue fragments.
//!
//! Every utterance carrying persona annotations closes a fragment that
//! contains it and all unassigned utterances before it. Utterances after the
//! last annotated one are absorbed into the final fragment, so fragments
//! always partition the transcript.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::persona::{DialogueFragment, FragmentId, Origin, Persona, PersonaError, PersonaFactory, Speaker, Utterance};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    /// Persona sentences annotated on this utterance.
    #[serde(default)]
    pub personas: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub dialogue_id: String,
    pub session: u32,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranscriptError {
    #[error("dialogue {dialogue_id} session {session}: turn {turn} repeats speaker {speaker}")]
    NonAlternatingTurns {
        dialogue_id: String,
        session: u32,
        turn: usize,
        speaker: Speaker,
    },
    #[error("dialogue {dialogue_id}: expected session {expected}, found {found:?}")]
    MissingSession {
        dialogue_id: String,
        expected: u32,
        found: Option<u32>,
    },
    #[error("dialogue {dialogue_id} session {session} has no turns")]
    EmptySession { dialogue_id: String, session: u32 },
}

impl SessionTranscript {
    pub fn validate(&self) -> Result<(), TranscriptError> {
        if self.turns.is_empty() {
            return Err(TranscriptError::EmptySession {
                dialogue_id: self.dialogue_id.clone(),
                session: self.session,
            });
        }
        for (i, pair) in self.turns.windows(2).enumerate() {
            if pair[0].speaker == pair[1].speaker {
                return Err(TranscriptError::NonAlternatingTurns {
                    dialogue_id: self.dialogue_id.clone(),
                    session: self.session,
                    turn: i + 1,
                    speaker: pair[1].speaker.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn annotation_count(&self) -> usize {
        self.turns.iter().map(|t| t.personas.len()).sum()
    }
}

/// All sessions of one dialogue, sorted by session index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub sessions: Vec<SessionTranscript>,
}

impl Dialogue {
    /// Sort sessions and check each is valid and indices run 1..=N.
    pub fn new(id: String, mut sessions: Vec<SessionTranscript>) -> Result<Self, TranscriptError> {
        sessions.sort_by_key(|s| s.session);
        for (i, s) in sessions.iter().enumerate() {
            let expected = i as u32 + 1;
            if s.session != expected {
                return Err(TranscriptError::MissingSession {
                    dialogue_id: id,
                    expected,
                    found: Some(s.session),
                });
            }
            s.validate()?;
        }
        if sessions.is_empty() {
            return Err(TranscriptError::MissingSession {
                dialogue_id: id,
                expected: 1,
                found: None,
            });
        }
        Ok(Dialogue { id, sessions })
    }

    pub fn session(&self, index: u32) -> Option<&SessionTranscript> {
        self.sessions.get(index.checked_sub(1)? as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FragmentLinking {
    pub fragments: Vec<DialogueFragment>,
    /// Set when the transcript had no annotations and a single unanchored
    /// fragment covers it.
    pub no_annotations: bool,
}

pub fn link_fragments(transcript: &SessionTranscript) -> FragmentLinking {
    let mut fragments: Vec<DialogueFragment> = Vec::new();
    let mut window: Vec<Utterance> = Vec::new();
    for turn in &transcript.turns {
        window.push(Utterance {
            speaker: turn.speaker.clone(),
            text: turn.text.clone(),
        });
        if !turn.personas.is_empty() {
            let anchor_index = window.len() - 1;
            fragments.push(DialogueFragment {
                id: FragmentId {
                    session: transcript.session,
                    ordinal: fragments.len() as u32,
                },
                session: transcript.session,
                utterances: core::mem::take(&mut window),
                anchor_index: Some(anchor_index),
                annotations: turn.personas.clone(),
                anchor_personas: Vec::new(),
            });
        }
    }
    if fragments.is_empty() {
        log::info!(
            "dialogue {} session {} has no persona annotations",
            transcript.dialogue_id,
            transcript.session
        );
        return FragmentLinking {
            fragments: alloc::vec![DialogueFragment {
                id: FragmentId {
                    session: transcript.session,
                    ordinal: 0,
                },
                session: transcript.session,
                utterances: window,
                anchor_index: None,
                annotations: Vec::new(),
                anchor_personas: Vec::new(),
            }],
            no_annotations: true,
        };
    }
    if !window.is_empty() {
        fragments
            .last_mut()
            .expect("at least one fragment")
            .utterances
            .append(&mut window);
    }
    FragmentLinking {
        fragments,
        no_annotations: false,
    }
}

/// Create one human persona per annotation and record it on its fragment.
pub fn human_personas(
    fragments: &mut [DialogueFragment],
    factory: &mut PersonaFactory,
) -> Result<Vec<Persona>, PersonaError> {
    let mut out = Vec::new();
    for frag in fragments.iter_mut() {
        let Some(speaker) = frag.anchor_speaker().cloned() else {
            continue;
        };
        for text in &frag.annotations {
            let p = factory.new_persona(
                speaker.clone(),
                frag.session,
                text,
                Origin::Human,
                Vec::new(),
                Some(frag.id),
            )?;
            frag.anchor_personas.push(p.id);
            out.push(p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;

    fn transcript(annotated: &[usize], n: usize) -> SessionTranscript {
        SessionTranscript {
            dialogue_id: "d".into(),
            session: 1,
            turns: (0..n)
                .map(|i| Turn {
                    speaker: if i % 2 == 0 { "A".into() } else { "B".into() },
                    text: format!("u{}", i + 1),
                    personas: if annotated.contains(&i) {
                        vec![format!("persona of u{}", i + 1)]
                    } else {
                        vec![]
                    },
                })
                .collect(),
        }
    }

    fn texts(f: &DialogueFragment) -> Vec<&str> {
        f.utterances.iter().map(|u| u.text.as_str()).collect()
    }

    #[test]
    fn splits_on_annotated_utterances() {
        let linked = link_fragments(&transcript(&[1, 5], 6));
        assert_eq!(linked.fragments.len(), 2);
        assert_eq!(texts(&linked.fragments[0]), ["u1", "u2"]);
        assert_eq!(texts(&linked.fragments[1]), ["u3", "u4", "u5", "u6"]);
        assert!(!linked.no_annotations);
    }

    #[test]
    fn every_utterance_annotated() {
        let linked = link_fragments(&transcript(&[0, 1, 2, 3], 4));
        assert_eq!(linked.fragments.len(), 4);
        assert!(linked.fragments.iter().all(|f| f.utterances.len() == 1));
    }

    #[test]
    fn trailing_utterances_absorbed() {
        let linked = link_fragments(&transcript(&[0], 4));
        assert_eq!(linked.fragments.len(), 1);
        assert_eq!(texts(&linked.fragments[0]), ["u1", "u2", "u3", "u4"]);
        assert_eq!(linked.fragments[0].anchor_index, Some(0));
    }

    #[test]
    fn no_annotations_is_flagged() {
        let linked = link_fragments(&transcript(&[], 3));
        assert!(linked.no_annotations);
        assert_eq!(linked.fragments.len(), 1);
        assert_eq!(linked.fragments[0].anchor_index, None);
    }

    #[test]
    fn multiple_annotations_share_one_fragment() {
        let mut t = transcript(&[1], 2);
        t.turns[1].personas.push("second".to_string());
        let mut linked = link_fragments(&t);
        let mut factory = PersonaFactory::new(0);
        let personas = human_personas(&mut linked.fragments, &mut factory).unwrap();
        assert_eq!(personas.len(), 2);
        assert!(personas.iter().all(|p| p.fragment == Some(linked.fragments[0].id)));
        assert!(personas.iter().all(|p| p.speaker.as_str() == "B"));
        assert_eq!(
            linked.fragments[0].anchor_personas,
            vec![personas[0].id, personas[1].id]
        );
    }

    #[test]
    fn dialogue_requires_contiguous_sessions() {
        let mut s1 = transcript(&[0], 2);
        let mut s3 = transcript(&[0], 2);
        s1.session = 1;
        s3.session = 3;
        let err = Dialogue::new("d".into(), vec![s1, s3]).unwrap_err();
        assert!(matches!(err, TranscriptError::MissingSession { expected: 2, .. }));
    }

    #[test]
    fn repeated_speaker_rejected() {
        let mut t = transcript(&[], 3);
        t.turns[2].speaker = "B".into();
        assert!(matches!(
            t.validate(),
            Err(TranscriptError::NonAlternatingTurns { turn: 2, .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn fragments_partition_transcript(flags in proptest::collection::vec(proptest::bool::ANY, 1..40)) {
            let annotated: Vec<usize> = flags.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect();
            let t = transcript(&annotated, flags.len());
            let linked = link_fragments(&t);
            let joined: Vec<String> = linked.fragments.iter().flat_map(|f| f.utterances.iter().map(|u| u.text.clone())).collect();
            let original: Vec<String> = t.turns.iter().map(|u| u.text.clone()).collect();
            proptest::prop_assert_eq!(joined, original);
            proptest::prop_assert_eq!(linked.fragments.len(), annotated.len().max(1));
        }
    }
}
