//! Comparison methods: prefix probing scored by word-level LCS with a fitted
//! threshold, and the token-probability scores PPL, compression-calibrated PPL
//! and Min-K%.

use std::io::Write as _;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::lm::{score_document, LmError, Scorer};
use crate::probe::{normalize_token, TemplateId};
use crate::scoring::f_beta;
use crate::target::{Completer, TargetError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("document {doc_id:?} has {words} words; more than {needed} are required")]
    TooShort { doc_id: String, words: usize, needed: usize },
    #[error("threshold fitting needs both classes")]
    SingleClass,
    #[error("scorer does not expose exact probabilities for {0:?}")]
    NoProbabilities(String),
    #[error("template {0} is not a prefix-probing template")]
    NotPrefixTemplate(TemplateId),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Lm(#[from] LmError),
}

fn normalized_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(normalize_token)
        .filter(|w| !w.is_empty())
        .collect()
}

/// Length of the longest common (not necessarily contiguous) subsequence of
/// two word sequences after normalization.
pub fn lcs_words<A: AsRef<str>, B: AsRef<str>>(a: &[A], b: &[B]) -> usize {
    let a: Vec<String> = a.iter().map(|w| normalize_token(w.as_ref())).filter(|w| !w.is_empty()).collect();
    let b: Vec<String> = b.iter().map(|w| normalize_token(w.as_ref())).filter(|w| !w.is_empty()).collect();
    lcs_len(&a, &b)
}

/// Row-rolling DP over two already-normalized sequences.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![0usize; short.len() + 1];
    let mut cur = vec![0usize; short.len() + 1];
    for x in long {
        for (j, y) in short.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixProbeResult {
    pub doc_id: String,
    pub prefix: String,
    pub generation: String,
    pub reference_suffix: String,
    pub lcs_words: usize,
}

/// Byte offset just past the `n`-th whitespace-delimited word.
fn end_of_word(text: &str, n: usize) -> Option<usize> {
    let mut count = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                count += 1;
                if count == n {
                    return Some(i);
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    (in_word && count + 1 == n).then_some(text.len())
}

/// Prompts `target` with the first `n_words` words of the document and scores
/// the continuation against the rest of the document.
pub fn prefix_probe(
    doc: &Document,
    target: &dyn Completer,
    n_words: usize,
    template: TemplateId,
) -> Result<PrefixProbeResult, BaselineError> {
    if template.is_cloze() {
        return Err(BaselineError::NotPrefixTemplate(template));
    }
    let words = doc.text.split_whitespace().count();
    if words <= n_words || n_words == 0 {
        return Err(BaselineError::TooShort {
            doc_id: doc.id.clone(),
            words,
            needed: n_words,
        });
    }
    let cut = end_of_word(&doc.text, n_words).expect("document has more than n_words words");
    let prefix = doc.text[..cut].trim_start().to_string();
    let reference_suffix = doc.text[cut..].trim().to_string();
    let generation = target.complete(&template.template().render(&prefix))?;
    let lcs = lcs_len(&normalized_words(&generation), &normalized_words(&reference_suffix));
    Ok(PrefixProbeResult {
        doc_id: doc.id.clone(),
        prefix,
        generation,
        reference_suffix,
        lcs_words: lcs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Positive when `score >= threshold`.
    Ge,
    /// Positive when `score <= threshold`.
    Le,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdClassifier {
    pub threshold: f64,
    pub direction: Direction,
    pub beta: f64,
}

impl ThresholdClassifier {
    pub fn predict(&self, score: f64) -> bool {
        match self.direction {
            Direction::Ge => score >= self.threshold,
            Direction::Le => score <= self.threshold,
        }
    }
}

/// F-beta (percent) of `clf` on labeled scores.
pub fn classifier_f_beta(clf: &ThresholdClassifier, scores: &[(f64, bool)]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for &(s, label) in scores {
        match (clf.predict(s), label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let p = if tp + fp > 0 { 100.0 * tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fn_ > 0 { 100.0 * tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    f_beta(p, r, clf.beta)
}

/// Picks the threshold and direction maximizing F-beta over all midpoints
/// between consecutive distinct scores. Ties go to the lower threshold, then
/// to `Ge`. With a single distinct score the classifier predicts the majority
/// class for every input.
pub fn fit_threshold(scores: &[(f64, bool)], beta: f64) -> Result<ThresholdClassifier, BaselineError> {
    let positives = scores.iter().filter(|(_, l)| *l).count();
    if positives == 0 || positives == scores.len() {
        return Err(BaselineError::SingleClass);
    }
    let mut distinct: Vec<f64> = scores.iter().map(|(s, _)| *s).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();

    if distinct.len() == 1 {
        let v = distinct[0];
        let threshold = if 2 * positives >= scores.len() { v } else { v + 1.0 };
        return Ok(ThresholdClassifier {
            threshold,
            direction: Direction::Ge,
            beta,
        });
    }

    let mut best: Option<(f64, ThresholdClassifier)> = None;
    for pair in distinct.windows(2) {
        let t = pair[0] + (pair[1] - pair[0]) / 2.0;
        for direction in [Direction::Ge, Direction::Le] {
            let clf = ThresholdClassifier {
                threshold: t,
                direction,
                beta,
            };
            let f = classifier_f_beta(&clf, scores);
            if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
                best = Some((f, clf));
            }
        }
    }
    Ok(best.expect("at least one midpoint").1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MiaMethod {
    #[serde(rename = "ppl")]
    Ppl,
    #[serde(rename = "ppl_compression")]
    PplCompression,
    #[serde(rename = "min_k")]
    MinK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaScore {
    pub doc_id: String,
    pub method: MiaMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_percent: Option<u32>,
    pub score: f64,
}

pub const MIN_K_PERCENTS: [u32; 5] = [5, 10, 20, 30, 40];

/// Mean of the lowest `ceil(k% * n)` log-probabilities.
pub fn min_k(logprobs: &[f64], k_percent: f64) -> f64 {
    assert!(!logprobs.is_empty(), "min_k needs at least one log-probability");
    let mut sorted = logprobs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let take = ((k_percent / 100.0 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[..take].iter().sum::<f64>() / take as f64
}

/// Raw DEFLATE (RFC 1951) size at the default compression level.
pub fn deflate_len(text: &str) -> usize {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(text.as_bytes()).expect("in-memory write");
    enc.finish().expect("in-memory write").len()
}

/// PPL, mean NLL over compressed size, and Min-K% for each k in
/// [`MIN_K_PERCENTS`]. PPL and the compression score fall for members;
/// Min-K% is a mean log-probability and rises.
pub fn mia_scores(doc: &Document, scorer: &dyn Scorer) -> Result<Vec<MiaScore>, BaselineError> {
    let scores = score_document(scorer, doc)?;
    if scores.iter().any(|s| s.rank_truncated) {
        return Err(BaselineError::NoProbabilities(doc.id.clone()));
    }
    let logprobs: Vec<f64> = scores.iter().map(|s| s.logprob).collect();
    let mean_nll = -logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    let mk = |method, k_percent, score| MiaScore {
        doc_id: doc.id.clone(),
        method,
        k_percent,
        score,
    };
    let mut out = vec![
        mk(MiaMethod::Ppl, None, mean_nll.exp()),
        mk(MiaMethod::PplCompression, None, mean_nll / deflate_len(&doc.text) as f64),
    ];
    out.extend(
        MIN_K_PERCENTS
            .iter()
            .map(|&k| mk(MiaMethod::MinK, Some(k), min_k(&logprobs, k as f64))),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::FixedResponder;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn lcs_basics() {
        let a: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        assert_eq!(lcs_words(&a, &a), 20);
        assert_eq!(lcs_words(&words("a b c"), &words("x y z")), 0);
        assert_eq!(lcs_words(&words("The cat, sat."), &words("the dog sat")), 2);
        assert_eq!(lcs_words::<&str, &str>(&[], &words("a")), 0);
    }

    #[test]
    fn min_k_examples() {
        assert_eq!(min_k(&[-1.0, -2.0, -10.0, -3.0], 25.0), -10.0);
        assert_eq!(min_k(&[-1.0, -2.0, -10.0, -3.0], 50.0), -6.5);
        assert!((min_k(&[-1.0, -2.0, -10.0, -3.0], 100.0) + 4.0).abs() < 1e-12);
        // ceil keeps at least one token
        assert_eq!(min_k(&[-1.0, -2.0], 5.0), -2.0);
    }

    #[test]
    fn deflate_is_raw_and_deterministic() {
        let text = "the quick brown fox ".repeat(50);
        let n = deflate_len(&text);
        assert_eq!(n, deflate_len(&text));
        assert!(n < text.len() / 5);
        assert!(deflate_len("") <= 2);
    }

    #[test]
    fn threshold_separable() {
        let scores = [(1.0, false), (2.0, false), (5.0, true), (7.0, true)];
        let clf = fit_threshold(&scores, 0.1).unwrap();
        assert_eq!((clf.threshold, clf.direction), (3.5, Direction::Ge));
        assert!((classifier_f_beta(&clf, &scores) - 100.0).abs() < 1e-9);

        let inverted = [(1.0, true), (2.0, true), (5.0, false)];
        let clf = fit_threshold(&inverted, 0.1).unwrap();
        assert_eq!((clf.threshold, clf.direction), (3.5, Direction::Le));
    }

    #[test]
    fn threshold_degenerate_and_errors() {
        let clf = fit_threshold(&[(3.0, true), (3.0, true), (3.0, false)], 0.1).unwrap();
        assert!(clf.predict(3.0));
        let clf = fit_threshold(&[(3.0, true), (3.0, false), (3.0, false)], 0.1).unwrap();
        assert!(!clf.predict(3.0));
        assert!(matches!(fit_threshold(&[(1.0, true)], 0.1), Err(BaselineError::SingleClass)));
        assert!(matches!(fit_threshold(&[], 0.1), Err(BaselineError::SingleClass)));
    }

    #[test]
    fn prefix_probe_requires_long_documents() {
        let doc = Document::new("d", "one two three");
        let t = FixedResponder::new("t", "whatever");
        assert!(matches!(
            prefix_probe(&doc, &t, 3, TemplateId::PrefixFiction),
            Err(BaselineError::TooShort { words: 3, .. })
        ));
        assert!(matches!(
            prefix_probe(&doc, &t, 1, TemplateId::FictionCloze),
            Err(BaselineError::NotPrefixTemplate(_))
        ));
    }

    #[test]
    fn prefix_probe_splits_at_word_boundary() {
        let doc = Document::new("d", "  one two\nthree four five");
        let t = FixedResponder::new("t", "Three, five!");
        let r = prefix_probe(&doc, &t, 2, TemplateId::PrefixNews).unwrap();
        assert_eq!(r.prefix, "one two");
        assert_eq!(r.reference_suffix, "three four five");
        assert_eq!(r.lcs_words, 2);
    }
}
