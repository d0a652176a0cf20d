//! Reference-model scoring: per-position token probabilities, surprisal and rank.
//!
//! Any model that can produce a probability distribution over its vocabulary at
//! a position, given the surrounding tokens, implements [`Scorer`]. The crate
//! ships an additive-smoothing n-gram model ([`NGramModel`]) and an adapter for
//! external scorers reached over HTTP ([`HttpScorer`]).
//!
//! All log-probabilities are natural logs.

mod http;
mod ngram;
mod tokenize;

pub use http::HttpScorer;
pub use ngram::{train_ngram, NGramModel, Vocab, UNK};
pub use tokenize::{detokenize, tokenize, tokenize_spans, Span};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("document {0:?} has no tokens")]
    EmptyDocument(String),
    #[error("position {position} out of range for {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("n-gram order must be in 1..=5, got {0}")]
    BadOrder(usize),
    #[error("smoothing alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("scorer request failed: {0}")]
    Transport(String),
    #[error("scorer returned an invalid response: {0}")]
    Protocol(String),
}

/// Probability evidence for the token at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub position: usize,
    pub token: String,
    /// Natural-log probability of `token` at `position`.
    pub logprob: f64,
    /// Number of vocabulary entries with strictly higher probability.
    pub rank: u64,
    /// Set when the scorer only returned a truncated distribution that did not
    /// contain the token: `rank` is then a lower bound and `logprob` an upper bound.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rank_truncated: bool,
}

/// A (possibly truncated) distribution over a scorer's vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub logprobs: Vec<(String, f64)>,
    /// False when the scorer returned only its top entries.
    pub complete: bool,
}

pub trait Scorer: Send + Sync {
    /// Distribution over the vocabulary at `position` given the surrounding tokens.
    fn distribution(&self, tokens: &[String], position: usize) -> Result<Distribution, LmError>;

    fn score_position(&self, tokens: &[String], position: usize) -> Result<TokenScore, LmError> {
        let dist = self.distribution(tokens, position)?;
        Ok(score_from_distribution(&dist, &tokens[position], position))
    }

    /// Short description used in reports.
    fn describe(&self) -> String;
}

/// Counts entries with probability strictly greater than `probs[index]`.
pub fn rank_of(probs: &[f64], index: usize) -> u64 {
    let p = probs[index];
    probs.iter().filter(|&&q| q > p).count() as u64
}

pub(crate) fn score_from_distribution(dist: &Distribution, token: &str, position: usize) -> TokenScore {
    match dist.logprobs.iter().find(|(t, _)| t == token) {
        Some(&(_, lp)) => TokenScore {
            position,
            token: token.to_string(),
            logprob: lp,
            rank: dist.logprobs.iter().filter(|(_, q)| *q > lp).count() as u64,
            rank_truncated: false,
        },
        None => {
            let seen_mass: f64 = dist.logprobs.iter().map(|(_, lp)| lp.exp()).sum();
            let residual = (1.0 - seen_mass).max(f64::MIN_POSITIVE).ln();
            let floor = dist
                .logprobs
                .iter()
                .map(|&(_, lp)| lp)
                .fold(residual, f64::min);
            TokenScore {
                position,
                token: token.to_string(),
                logprob: floor,
                rank: dist.logprobs.len() as u64,
                rank_truncated: true,
            }
        }
    }
}

/// One [`TokenScore`] per token of the document.
pub fn score_document(scorer: &dyn Scorer, doc: &Document) -> Result<Vec<TokenScore>, LmError> {
    let tokens = tokenize(&doc.text);
    if tokens.is_empty() {
        return Err(LmError::EmptyDocument(doc.id.clone()));
    }
    (0..tokens.len())
        .map(|i| scorer.score_position(&tokens, i))
        .collect()
}

/// `exp(-mean logprob)` over the document's tokens.
pub fn perplexity(scorer: &dyn Scorer, doc: &Document) -> Result<f64, LmError> {
    let scores = score_document(scorer, doc)?;
    Ok(perplexity_of(&scores))
}

pub fn perplexity_of(scores: &[TokenScore]) -> f64 {
    let mean = scores.iter().map(|s| s.logprob).sum::<f64>() / scores.len() as f64;
    (-mean).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<(&'static str, f64)>);

    impl Scorer for Fixed {
        fn distribution(&self, _: &[String], _: usize) -> Result<Distribution, LmError> {
            Ok(Distribution {
                logprobs: self.0.iter().map(|(t, p)| (t.to_string(), p.ln())).collect(),
                complete: true,
            })
        }
        fn describe(&self) -> String {
            "fixed".into()
        }
    }

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn rank_counts_strictly_greater() {
        let s = Fixed(vec![("a", 0.5), ("b", 0.3), ("c", 0.2)]);
        let t = toks("a b c");
        assert_eq!(s.score_position(&t, 0).unwrap().rank, 0);
        let c = s.score_position(&t, 2).unwrap();
        assert_eq!(c.rank, 2);
        assert!((c.logprob - 0.2f64.ln()).abs() < 1e-12);
        assert!((c.logprob - (-1.609)).abs() < 1e-3);
    }

    #[test]
    fn ties_do_not_raise_rank() {
        assert_eq!(rank_of(&[0.25, 0.25, 0.25, 0.25], 3), 0);
        assert_eq!(rank_of(&[0.4, 0.3, 0.3], 2), 1);
    }

    #[test]
    fn uniform_scores_and_perplexity() {
        let s = Fixed(vec![("a", 0.25), ("b", 0.25), ("c", 0.25), ("d", 0.25)]);
        let doc = Document::new("u", "a b c d d a");
        for sc in score_document(&s, &doc).unwrap() {
            assert!((sc.logprob + 4f64.ln()).abs() < 1e-12);
            assert_eq!(sc.rank, 0);
        }
        assert!((perplexity(&s, &doc).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn certain_token_has_unit_perplexity() {
        let s = Fixed(vec![("a", 1.0)]);
        assert_eq!(perplexity(&s, &Document::new("c", "a")).unwrap(), 1.0);
    }

    #[test]
    fn empty_document_is_rejected() {
        let s = Fixed(vec![("a", 1.0)]);
        assert!(matches!(
            score_document(&s, &Document::new("e", "   ")),
            Err(LmError::EmptyDocument(_))
        ));
    }

    #[test]
    fn missing_token_in_truncated_distribution_is_bounded() {
        let dist = Distribution {
            logprobs: vec![("a".into(), 0.6f64.ln()), ("b".into(), 0.3f64.ln())],
            complete: false,
        };
        let s = score_from_distribution(&dist, "z", 4);
        assert!(s.rank_truncated);
        assert_eq!(s.rank, 2);
        assert!((s.logprob - 0.1f64.ln()).abs() < 1e-9);
    }
}
