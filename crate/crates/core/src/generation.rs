//! Persona-grounded response generation.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::persona::{Persona, Speaker, Utterance};
use crate::prompt::{bullet_list, escape_inline, Template};
use crate::provider::{ChatProvider, ChatRequest, ProviderError};

pub const MAX_RESPONSE_SENTENCES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenerationError {
    #[error("dialogue context is empty")]
    EmptyContext,
    #[error("model returned an empty completion")]
    EmptyCompletion,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedResponse {
    pub text: String,
    /// Set when the completion exceeds the sentence budget; it is not truncated.
    pub over_length: bool,
}

pub fn dialogue_text(context: &[Utterance]) -> String {
    let lines: Vec<String> = context
        .iter()
        .map(|u| alloc::format!("{}: {}", u.speaker, escape_inline(&u.text)))
        .collect();
    lines.join("\n")
}

/// Render the generation prompt. Empty persona lists omit their section.
pub fn render_prompt(
    template: &Template,
    context: &[Utterance],
    personas_a: &[&Persona],
    personas_b: &[&Persona],
) -> String {
    let section = |ps: &[&Persona]| (!ps.is_empty()).then(|| bullet_list(ps.iter().map(|p| p.text.as_str())));
    let a = section(personas_a);
    let b = section(personas_b);
    let dialogue = dialogue_text(context);
    template.render(&[
        ("personas_A", a.as_deref()),
        ("personas_B", b.as_deref()),
        ("dialogue", Some(&dialogue)),
    ])
}

/// Split retrieved personas by speaker label, preserving order.
pub fn partition_by_speaker<'a>(
    personas: &[&'a Persona],
    a: &Speaker,
    b: &Speaker,
) -> (Vec<&'a Persona>, Vec<&'a Persona>) {
    let pa = personas.iter().copied().filter(|p| &p.speaker == a).collect();
    let pb = personas.iter().copied().filter(|p| &p.speaker == b).collect();
    (pa, pb)
}

/// Count sentences as runs of text ending in `.`, `!` or `?` (or the end).
pub fn sentence_count(text: &str) -> usize {
    let mut count = 0;
    let mut in_sentence = false;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let boundary = chars.peek().is_none_or(|n| n.is_whitespace());
            if in_sentence && boundary {
                count += 1;
                in_sentence = false;
            }
        } else if !c.is_whitespace() {
            in_sentence = true;
        }
    }
    count + usize::from(in_sentence)
}

pub fn generate_response<C: ChatProvider + ?Sized>(
    template: &Template,
    context: &[Utterance],
    personas_a: &[&Persona],
    personas_b: &[&Persona],
    llm: &C,
    max_tokens: u32,
) -> Result<GeneratedResponse, GenerationError> {
    if context.is_empty() {
        return Err(GenerationError::EmptyContext);
    }
    for p in personas_a.iter().chain(personas_b) {
        log::debug!("persona {} ~{} tokens", p.id, p.text.split_whitespace().count());
    }
    let prompt = render_prompt(template, context, personas_a, personas_b);
    let reply = llm.complete(&ChatRequest::user(prompt, max_tokens))?;
    let text = reply.text.trim().to_string();
    if text.is_empty() {
        return Err(GenerationError::EmptyCompletion);
    }
    let over_length = sentence_count(&text) > MAX_RESPONSE_SENTENCES;
    if over_length {
        log::debug!("response exceeds {MAX_RESPONSE_SENTENCES} sentences");
    }
    Ok(GeneratedResponse { text, over_length })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::{EchoLastUtterance, ScriptedChat};
    use crate::persona::{Origin, PersonaFactory};
    use alloc::vec;

    fn utt(speaker: &str, text: &str) -> Utterance {
        Utterance {
            speaker: speaker.into(),
            text: text.into(),
        }
    }

    #[test]
    fn echo_mock_returns_last_utterance() {
        let ctx = [utt("A", "How was your trip?"), utt("B", "Great, I visited Madrid.")];
        let out = generate_response(&Template::default_response(), &ctx, &[], &[], &EchoLastUtterance, 64).unwrap();
        assert_eq!(out.text, "Great, I visited Madrid.");
        assert!(!out.over_length);
    }

    #[test]
    fn no_memory_prompt_omits_persona_sections() {
        let ctx = [utt("A", "hello")];
        let prompt = render_prompt(&Template::default_response(), &ctx, &[], &[]);
        assert!(!prompt.contains("Persona Statements of A"));
        assert!(!prompt.contains("Persona Statements of B"));
        assert!(prompt.contains("A: hello"));
    }

    #[test]
    fn refined_persona_reaches_prompt_once() {
        let mut f = PersonaFactory::new(0);
        let spanish = f
            .new_persona(
                "B".into(),
                2,
                "I started learning Spanish for my trip to Madrid.",
                Origin::Human,
                vec![],
                None,
            )
            .unwrap();
        let dogs = f
            .new_persona("A".into(), 1, "I have two labs.", Origin::Human, vec![], None)
            .unwrap();
        let ctx = [utt("A", "Any plans for the summer?")];
        let prompt = render_prompt(&Template::default_response(), &ctx, &[&dogs], &[&spanish]);
        assert_eq!(prompt.matches(spanish.text.as_str()).count(), 1);
        assert_eq!(prompt.matches(dogs.text.as_str()).count(), 1);
        assert!(prompt.contains("Persona Statements of B:\n- I started learning Spanish"));
    }

    #[test]
    fn flags_long_responses() {
        let chat = ScriptedChat::replies(["One. Two! Three? Four."]);
        let out = generate_response(&Template::default_response(), &[utt("A", "hi")], &[], &[], &chat, 64).unwrap();
        assert!(out.over_length);
        assert_eq!(out.text, "One. Two! Three? Four.");
    }

    #[test]
    fn empty_completion_and_context() {
        let chat = ScriptedChat::replies(["  "]);
        let t = Template::default_response();
        assert_eq!(
            generate_response(&t, &[utt("A", "hi")], &[], &[], &chat, 8),
            Err(GenerationError::EmptyCompletion)
        );
        assert_eq!(
            generate_response(&t, &[], &[], &[], &chat, 8),
            Err(GenerationError::EmptyContext)
        );
    }

    #[test]
    fn counts_sentences() {
        assert_eq!(sentence_count(""), 0);
        assert_eq!(sentence_count("Hi there"), 1);
        assert_eq!(sentence_count("It costs 3.50 dollars. Fine!"), 2);
        assert_eq!(sentence_count("Wait... what?"), 2);
    }
}
