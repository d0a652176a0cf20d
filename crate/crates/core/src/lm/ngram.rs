use std::collections::HashMap;

use super::{tokenize, Distribution, LmError, Scorer, TokenScore};
use crate::corpus::Document;

/// Reserved entry for tokens never seen in training.
pub const UNK: &str = "<unk>";

/// Token vocabulary. Id 0 is [`UNK`]; the remaining ids are assigned by
/// descending training frequency, ties broken lexicographically.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_counts(counts: HashMap<String, u64>) -> Self {
        let mut entries: Vec<(String, u64)> = counts.into_iter().filter(|(t, _)| t != UNK).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = std::iter::once(UNK.to_string())
            .chain(entries.into_iter().map(|(t, _)| t))
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or the unknown-token id.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, Default)]
struct ContextStats {
    total: u64,
    followers: HashMap<u32, u64>,
}

/// Add-alpha smoothed n-gram model over left context.
///
/// `P(w | c) = (count(c, w) + alpha) / (count(c) + alpha * |V|)` where `c` is the
/// longest suffix of the preceding `order - 1` tokens observed in training.
/// Positions near the start of a document use the shorter context available,
/// down to the unigram distribution at position 0.
#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    alpha: f64,
    vocab: Vocab,
    /// `contexts[k]` maps length-`k` contexts to their follower counts.
    contexts: Vec<HashMap<Vec<u32>, ContextStats>>,
}

pub fn train_ngram(corpus: &[Document], order: usize, alpha: f64) -> Result<NGramModel, LmError> {
    if !(1..=5).contains(&order) {
        return Err(LmError::BadOrder(order));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(LmError::BadAlpha(alpha));
    }
    let docs: Vec<Vec<String>> = corpus.iter().map(|d| tokenize(&d.text)).collect();
    if docs.iter().all(|t| t.is_empty()) {
        return Err(LmError::EmptyCorpus);
    }

    let mut freq: HashMap<String, u64> = HashMap::new();
    for tok in docs.iter().flatten() {
        *freq.entry(tok.clone()).or_default() += 1;
    }
    let vocab = Vocab::from_counts(freq);

    let mut contexts: Vec<HashMap<Vec<u32>, ContextStats>> = vec![HashMap::new(); order];
    for doc in &docs {
        let ids: Vec<u32> = doc.iter().map(|t| vocab.id(t)).collect();
        for (i, &w) in ids.iter().enumerate() {
            for k in 0..=i.min(order - 1) {
                let stats = contexts[k].entry(ids[i - k..i].to_vec()).or_default();
                stats.total += 1;
                *stats.followers.entry(w).or_default() += 1;
            }
        }
    }

    Ok(NGramModel {
        order,
        alpha,
        vocab,
        contexts,
    })
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn ids(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.vocab.id(t)).collect()
    }

    fn context_for(&self, ids: &[u32], position: usize) -> &ContextStats {
        let mut k = position.min(self.order - 1);
        loop {
            if let Some(stats) = self.contexts[k].get(&ids[position - k..position]) {
                return stats;
            }
            // The empty context always exists for a non-empty corpus.
            k -= 1;
        }
    }

    fn check(tokens: &[String], position: usize) -> Result<(), LmError> {
        if position >= tokens.len() {
            return Err(LmError::PositionOutOfRange {
                position,
                len: tokens.len(),
            });
        }
        Ok(())
    }

    fn prob(&self, stats: &ContextStats, id: u32) -> f64 {
        let count = stats.followers.get(&id).copied().unwrap_or(0) as f64;
        (count + self.alpha) / (stats.total as f64 + self.alpha * self.vocab.len() as f64)
    }

    /// Probability vector indexed by vocabulary id.
    pub fn position_distribution(&self, tokens: &[String], position: usize) -> Result<Vec<f64>, LmError> {
        Self::check(tokens, position)?;
        let ids = self.ids(tokens);
        let stats = self.context_for(&ids, position);
        Ok((0..self.vocab.len() as u32).map(|id| self.prob(stats, id)).collect())
    }

    /// Probability of the token actually at `position`.
    pub fn token_prob(&self, tokens: &[String], position: usize) -> Result<f64, LmError> {
        Self::check(tokens, position)?;
        let ids = self.ids(tokens);
        Ok(self.prob(self.context_for(&ids, position), ids[position]))
    }

    /// Most probable known token at `position` (the unknown entry excluded);
    /// ties go to the lower id, i.e. the more frequent training token.
    pub fn argmax(&self, tokens: &[String], position: usize) -> Result<String, LmError> {
        if position > tokens.len() {
            return Err(LmError::PositionOutOfRange {
                position,
                len: tokens.len(),
            });
        }
        let ids = self.ids(tokens);
        let stats = self.context_for(&ids, position);
        let best = stats
            .followers
            .iter()
            .filter(|(&id, _)| id != 0)
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(&id, _)| id)
            .unwrap_or(if self.vocab.len() > 1 { 1 } else { 0 });
        Ok(self.vocab.token(best).to_string())
    }

    /// Greedy continuation of `tokens` by `n` tokens.
    pub fn greedy_continuation(&self, tokens: &[String], n: usize) -> Vec<String> {
        let mut seq = tokens.to_vec();
        for _ in 0..n {
            let next = self.argmax(&seq, seq.len()).expect("position == len is valid");
            seq.push(next);
        }
        seq.split_off(tokens.len())
    }
}

impl Scorer for NGramModel {
    fn distribution(&self, tokens: &[String], position: usize) -> Result<Distribution, LmError> {
        let probs = self.position_distribution(tokens, position)?;
        Ok(Distribution {
            logprobs: self
                .vocab
                .tokens()
                .iter()
                .cloned()
                .zip(probs.into_iter().map(f64::ln))
                .collect(),
            complete: true,
        })
    }

    fn score_position(&self, tokens: &[String], position: usize) -> Result<TokenScore, LmError> {
        Self::check(tokens, position)?;
        let ids = self.ids(tokens);
        let stats = self.context_for(&ids, position);
        let id = ids[position];
        let count = stats.followers.get(&id).copied().unwrap_or(0);
        // Smoothed probability is strictly increasing in the count, so rank is
        // the number of vocabulary entries with a larger count.
        let rank = stats.followers.values().filter(|&&c| c > count).count() as u64;
        Ok(TokenScore {
            position,
            token: tokens[position].clone(),
            logprob: self.prob(stats, id).ln(),
            rank,
            rank_truncated: false,
        })
    }

    fn describe(&self) -> String {
        format!(
            "ngram(order={}, alpha={}, vocab={})",
            self.order,
            self.alpha,
            self.vocab.len()
        )
    }
}
