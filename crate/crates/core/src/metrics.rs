//! Unigram overlap metrics (BLEU-1, ROUGE-1, ROUGE-L) and call accounting.
//!
//! Tokenization: lowercase the text, split on Unicode whitespace, and emit
//! every ASCII punctuation character as a token of its own. All three
//! metrics use a single reference per candidate.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::provider::CallCounts;

pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_ascii_punctuation() {
                if !word.is_empty() {
                    tokens.push(core::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            } else {
                word.extend(c.to_lowercase());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// A metric value plus a flag for degenerate inputs (empty candidate or reference).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn degenerate() -> Self {
        Score {
            value: 0.0,
            degenerate: true,
        }
    }

    fn ok(value: f64) -> Self {
        Score {
            value,
            degenerate: false,
        }
    }
}

fn counts<S: AsRef<str>>(tokens: &[S]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for t in tokens {
        *m.entry(t.as_ref()).or_insert(0) += 1;
    }
    m
}

fn clipped_overlap<S: AsRef<str>>(candidate: &[S], reference: &BTreeMap<&str, usize>) -> usize {
    counts(candidate)
        .into_iter()
        .map(|(w, c)| c.min(reference.get(w).copied().unwrap_or(0)))
        .sum()
}

fn f1(overlap: usize, cand_len: usize, ref_len: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand_len as f64;
    let r = overlap as f64 / ref_len as f64;
    2.0 * p * r / (p + r)
}

/// Reference length closest to the candidate length (shorter wins ties).
fn closest_ref_len(cand_len: usize, refs: &[usize]) -> usize {
    refs.iter()
        .copied()
        .min_by_key(|&r| (r.abs_diff(cand_len), r))
        .unwrap_or(0)
}

pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / cand_len as f64)
    }
}

/// Sentence BLEU-1 over pre-tokenized input: clipped unigram precision times
/// the brevity penalty.
pub fn bleu1_tokens<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> Score {
    if candidate.is_empty() || references.is_empty() {
        return Score::degenerate();
    }
    let mut max_ref: BTreeMap<&str, usize> = BTreeMap::new();
    for r in references {
        for (w, c) in counts(r) {
            let e = max_ref.entry(w).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let clipped = clipped_overlap(candidate, &max_ref);
    let ref_lens: Vec<usize> = references.iter().map(Vec::len).collect();
    let r = closest_ref_len(candidate.len(), &ref_lens);
    let precision = clipped as f64 / candidate.len() as f64;
    Score::ok(precision * brevity_penalty(candidate.len(), r))
}

pub fn bleu1(candidate: &str, references: &[&str]) -> Score {
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    bleu1_tokens(&tokenize(candidate), &refs)
}

pub fn rouge1_tokens<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Score {
    if candidate.is_empty() || reference.is_empty() {
        return Score::degenerate();
    }
    let overlap = clipped_overlap(candidate, &counts(reference));
    Score::ok(f1(overlap, candidate.len(), reference.len()))
}

pub fn rouge1(candidate: &str, reference: &str) -> Score {
    rouge1_tokens(&tokenize(candidate), &tokenize(reference))
}

/// Longest common subsequence length with a rolling row.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut row = alloc::vec![0usize; short.len() + 1];
    for x in long {
        let mut diag = 0;
        for (j, y) in short.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x.as_ref() == y.as_ref() {
                diag + 1
            } else {
                up.max(row[j])
            };
            diag = up;
        }
    }
    row[short.len()]
}

pub fn rouge_l_tokens<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Score {
    if candidate.is_empty() || reference.is_empty() {
        return Score::degenerate();
    }
    Score::ok(f1(lcs_len(candidate, reference), candidate.len(), reference.len()))
}

pub fn rouge_l(candidate: &str, reference: &str) -> Score {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BleuAggregation {
    /// Mean of sentence scores.
    #[default]
    SentenceAverage,
    /// Pooled clipped counts and lengths.
    Corpus,
}

/// Running aggregate of the three metrics over candidate/reference pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub n: u64,
    pub degenerate: u64,
    pub bleu1_sum: f64,
    pub rouge1_sum: f64,
    pub rouge_l_sum: f64,
    pub clipped: u64,
    pub cand_len: u64,
    pub ref_len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: u64,
    pub degenerate: u64,
    pub bleu1: f64,
    pub rouge1: f64,
    pub rouge_l: f64,
}

impl MetricAccumulator {
    pub fn add(&mut self, candidate: &str, reference: &str) {
        let c = tokenize(candidate);
        let r = tokenize(reference);
        let b = bleu1_tokens(&c, core::slice::from_ref(&r));
        let r1 = rouge1_tokens(&c, &r);
        let rl = rouge_l_tokens(&c, &r);
        self.n += 1;
        if b.degenerate || r1.degenerate || rl.degenerate {
            self.degenerate += 1;
        }
        self.bleu1_sum += b.value;
        self.rouge1_sum += r1.value;
        self.rouge_l_sum += rl.value;
        self.clipped += clipped_overlap(&c, &counts(&r)) as u64;
        self.cand_len += c.len() as u64;
        self.ref_len += r.len() as u64;
    }

    pub fn merge(&mut self, o: &MetricAccumulator) {
        self.n += o.n;
        self.degenerate += o.degenerate;
        self.bleu1_sum += o.bleu1_sum;
        self.rouge1_sum += o.rouge1_sum;
        self.rouge_l_sum += o.rouge_l_sum;
        self.clipped += o.clipped;
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    pub fn summary(&self, bleu: BleuAggregation) -> MetricSummary {
        let mean = |s: f64| if self.n == 0 { 0.0 } else { s / self.n as f64 };
        let bleu1 = match bleu {
            BleuAggregation::SentenceAverage => mean(self.bleu1_sum),
            BleuAggregation::Corpus if self.cand_len == 0 => 0.0,
            BleuAggregation::Corpus => {
                self.clipped as f64 / self.cand_len as f64
                    * brevity_penalty(self.cand_len as usize, self.ref_len as usize)
            }
        };
        MetricSummary {
            n: self.n,
            degenerate: self.degenerate,
            bleu1,
            rouge1: mean(self.rouge1_sum),
            rouge_l: mean(self.rouge_l_sum),
        }
    }
}

/// Provider usage attributed to one session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCost {
    pub refine: CallCounts,
    pub generation: CallCounts,
    pub nli: CallCounts,
    pub embedding: CallCounts,
    pub commonsense: CallCounts,
}

impl core::ops::AddAssign for SessionCost {
    fn add_assign(&mut self, o: Self) {
        self.refine += o.refine;
        self.generation += o.generation;
        self.nli += o.nli;
        self.embedding += o.embedding;
        self.commonsense += o.commonsense;
    }
}

/// Price per 1000 tokens, used for dollar estimates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub prompt_per_1k: f64,
    pub completion_per_1k: f64,
}

impl PriceTable {
    pub fn chat_cost(&self, c: &CallCounts) -> f64 {
        c.prompt_tokens as f64 / 1000.0 * self.prompt_per_1k
            + c.completion_tokens as f64 / 1000.0 * self.completion_per_1k
    }
}

/// Refinement-call ratio of refining every edge versus graph refinement.
pub fn call_ratio(all_calls: u64, refine_calls: u64) -> Option<f64> {
    (refine_calls > 0).then(|| all_calls as f64 / refine_calls as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", ",", "world", "!"]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
        assert_eq!(tokenize("don't"), vec!["don", "'", "t"]);
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu1("the cat sat", &["the cat sat"]).value, 1.0);
        assert!((bleu1("the the the", &["the cat"]).value - 1.0 / 3.0).abs() < 1e-12);
        let short = bleu1("the", &["the cat sat"]).value;
        assert!((short - libm::exp(-2.0)).abs() < 1e-12);
        assert_eq!(format_4(short), "0.1353");
        let empty = bleu1("", &["x"]);
        assert!(empty.degenerate && empty.value == 0.0);
    }

    fn format_4(x: f64) -> String {
        alloc::format!("{x:.4}")
    }

    #[test]
    fn rouge1_examples() {
        assert_eq!(rouge1("a b", "a b").value, 1.0);
        assert!((rouge1("a b", "b c").value - 0.5).abs() < 1e-12);
        assert_eq!(rouge1("a b", "c d").value, 0.0);
        assert!(rouge1("", "").degenerate);
    }

    #[test]
    fn rouge_l_examples() {
        assert_eq!(format_4(rouge_l("a b c d", "a c d").value), "0.8571");
        assert_eq!(rouge_l("x y z", "x y z").value, 1.0);
        assert!((rouge_l("b a", "a b").value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bleu_is_not_symmetric() {
        let ab = bleu1("the", &["the cat sat"]).value;
        let ba = bleu1("the cat sat", &["the"]).value;
        assert!((ab - ba).abs() > 0.1);
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let mut acc = MetricAccumulator::default();
        acc.add("the", "the cat sat");
        acc.add("a b c", "a b c");
        let s = acc.summary(BleuAggregation::Corpus);
        // clipped 4 of 4 candidate tokens, c=4 < r=6
        assert!((s.bleu1 - libm::exp(1.0 - 6.0 / 4.0)).abs() < 1e-12);
        let avg = acc.summary(BleuAggregation::SentenceAverage);
        assert!((avg.bleu1 - (libm::exp(-2.0) + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_is_reported() {
        assert_eq!(call_ratio(3, 2), Some(1.5));
        assert_eq!(call_ratio(3, 1), Some(3.0));
        assert_eq!(call_ratio(0, 0), None);
    }

    proptest::proptest! {
        #[test]
        fn scores_bounded_and_rouge_l_symmetric(
            a in proptest::collection::vec(0u8..6, 0..12),
            b in proptest::collection::vec(0u8..6, 0..12),
        ) {
            let ta: Vec<String> = a.iter().map(|x| alloc::format!("w{x}")).collect();
            let tb: Vec<String> = b.iter().map(|x| alloc::format!("w{x}")).collect();
            for s in [bleu1_tokens(&ta, core::slice::from_ref(&tb)), rouge1_tokens(&ta, &tb), rouge_l_tokens(&ta, &tb)] {
                proptest::prop_assert!((0.0..=1.0).contains(&s.value));
            }
            proptest::prop_assert_eq!(rouge_l_tokens(&ta, &tb).value, rouge_l_tokens(&tb, &ta).value);
            if !ta.is_empty() {
                proptest::prop_assert_eq!(rouge_l_tokens(&ta, &ta).value, 1.0);
                proptest::prop_assert_eq!(bleu1_tokens(&ta, core::slice::from_ref(&ta)).value, 1.0);
            }
        }
    }
}
