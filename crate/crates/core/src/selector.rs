//! Candidate selection: which token positions of a document are surprising
//! enough to probe, and which of them survive the knowledge filters.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::lm::{tokenize, tokenize_spans, Span, TokenScore};
use crate::probe::{
    build_probe_unchecked, match_guess, normalize_token, parse_response, parse_word_list, PromptTemplate,
    TemplateId,
};
use crate::target::{parallel_map, Completer, TargetError};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("document {doc_id:?} has {tokens} tokens but {scores} scores")]
    LengthMismatch { doc_id: String, tokens: usize, scores: usize },
    #[error("strategy {0:?} is not threshold-based")]
    NotThresholdStrategy(Strategy),
    #[error("invalid selection config: {0}")]
    BadConfig(String),
    #[error("unparseable informative-word response for {doc_id:?}: {response:?}")]
    Unparseable { doc_id: String, response: String },
    #[error(transparent)]
    Target(#[from] TargetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Prob,
    Rank,
    Person,
    InformativeWord,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Prob => "prob",
            Strategy::Rank => "rank",
            Strategy::Person => "person",
            Strategy::InformativeWord => "informative_word",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Strategy::Prob, Strategy::Rank, Strategy::Person, Strategy::InformativeWord]
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| SelectError::BadConfig(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub logprob_threshold: f64,
    pub rank_threshold: u64,
    pub max_candidates: usize,
    pub min_matches_for_verdict: usize,
    pub content_word_filter: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            strategy: Strategy::Prob,
            logprob_threshold: -12.0,
            rank_threshold: 2000,
            max_candidates: 10,
            min_matches_for_verdict: 2,
            content_word_filter: true,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        if self.max_candidates == 0 {
            return Err(SelectError::BadConfig("max_candidates must be at least 1".into()));
        }
        if !self.logprob_threshold.is_finite() {
            return Err(SelectError::BadConfig("logprob_threshold must be finite".into()));
        }
        if self.min_matches_for_verdict == 0 || self.min_matches_for_verdict > self.max_candidates {
            return Err(SelectError::BadConfig(format!(
                "min_matches_for_verdict must be in 1..={}",
                self.max_candidates
            )));
        }
        Ok(())
    }
}

/// Which filter model guessed a candidate, and what it said.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReason {
    pub model: String,
    pub guess: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateToken {
    pub doc_id: String,
    pub position: usize,
    pub surface: String,
    /// Reference-model evidence; absent for Person and InformativeWord candidates.
    pub logprob: Option<f64>,
    pub rank: Option<u64>,
    pub strategy: Strategy,
    #[serde(default)]
    pub filtered_out: bool,
    #[serde(default)]
    pub filter_reason: Option<FilterReason>,
    /// Filter calls that failed; such a candidate is kept but flagged.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub filter_errors: Vec<String>,
}

impl CandidateToken {
    pub fn new(doc_id: &str, position: usize, surface: &str, strategy: Strategy) -> Self {
        CandidateToken {
            doc_id: doc_id.to_string(),
            position,
            surface: surface.to_string(),
            logprob: None,
            rank: None,
            strategy,
            filtered_out: false,
            filter_reason: None,
            filter_errors: Vec::new(),
        }
    }

    fn scored(doc_id: &str, score: &TokenScore, strategy: Strategy) -> Self {
        CandidateToken {
            logprob: Some(score.logprob),
            rank: Some(score.rank),
            ..CandidateToken::new(doc_id, score.position, &score.token, strategy)
        }
    }
}

// Closed-class words: pronouns, determiners, prepositions, conjunctions,
// auxiliaries and particles.
const STOPWORDS: &[&str] = &[
    "a", "about", "above", "across", "after", "against", "all", "along", "although", "am", "among", "an", "and",
    "another", "any", "anybody", "anyone", "anything", "are", "around", "as", "at", "be", "because", "been",
    "before", "behind", "being", "below", "beneath", "beside", "besides", "between", "beyond", "both", "but", "by",
    "can", "could", "despite", "did", "do", "does", "down", "during", "each", "either", "every", "everybody",
    "everyone", "everything", "except", "few", "for", "from", "had", "has", "have", "he", "her", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "inside", "into", "is", "it", "its", "itself", "least", "less",
    "many", "may", "me", "might", "mine", "more", "most", "much", "must", "my", "myself", "near", "neither", "no",
    "nobody", "none", "nor", "not", "nothing", "of", "off", "on", "once", "one", "onto", "or", "other", "others",
    "ought", "our", "ours", "ourselves", "out", "outside", "over", "past", "per", "several", "shall", "she",
    "should", "since", "so", "some", "somebody", "someone", "something", "such", "than", "that", "the", "their",
    "theirs", "them", "themselves", "then", "there", "these", "they", "this", "those", "though", "through",
    "throughout", "till", "to", "toward", "towards", "under", "underneath", "unless", "unlike", "until", "up",
    "upon", "us", "versus", "via", "was", "we", "were", "what", "whatever", "when", "whenever", "where",
    "whereas", "wherever", "whether", "which", "whichever", "while", "who", "whoever", "whom", "whose", "why",
    "will", "with", "within", "without", "would", "yet", "you", "your", "yours", "yourself", "yourselves", "s",
    "t", "d", "ll", "m", "re", "ve", "o",
];

// Frequent words that appear capitalized mid-sentence without being names.
const COMMON_CAPITALIZED: &[&str] = &[
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "january", "february", "march",
    "april", "june", "july", "august", "september", "october", "november", "december", "mr", "mrs", "ms", "miss",
    "dr", "sir", "madam", "god", "english", "french", "german", "american", "british", "christmas", "easter",
    "oh", "ah", "yes", "well", "ok", "okay", "chapter", "part", "book", "street", "road", "avenue", "north",
    "south", "east", "west", "king", "queen", "prince", "princess", "lord", "lady", "captain", "professor",
    "uncle", "aunt", "mother", "father", "mom", "dad", "mama", "papa", "grandma", "grandpa", "doctor", "sister",
    "brother", "saint", "st", "tv", "internet", "good", "great", "new", "old", "little", "first", "last",
    "said", "says", "just", "now", "here", "very", "never", "always", "also", "only", "even", "still", "again",
    "please", "thank", "thanks", "hello", "hi", "no", "not",
];

const TITLES: &[&str] = &["mr", "mrs", "ms", "dr", "st"];

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: std::sync::OnceLock<HashSet<&'static str>> = std::sync::OnceLock::new();
    SET.get_or_init(|| STOPWORDS.iter().copied().collect())
}

fn common_capitalized() -> &'static HashSet<&'static str> {
    static SET: std::sync::OnceLock<HashSet<&'static str>> = std::sync::OnceLock::new();
    SET.get_or_init(|| STOPWORDS.iter().chain(COMMON_CAPITALIZED).copied().collect())
}

/// Alphabetic and not a closed-class word.
pub fn is_content_word(surface: &str) -> bool {
    !surface.is_empty()
        && surface.chars().all(char::is_alphabetic)
        && !stopwords().contains(surface.to_lowercase().as_str())
}

/// Threshold-based selection for the Prob and Rank strategies.
///
/// Qualifying positions (never position 0) are ranked by extremity, ties going
/// to the earlier position, capped at `max_candidates`, and returned in
/// position order.
pub fn select_candidates(
    doc: &Document,
    scores: &[TokenScore],
    cfg: &SelectionConfig,
) -> Result<Vec<CandidateToken>, SelectError> {
    let n_tokens = tokenize(&doc.text).len();
    if scores.len() != n_tokens {
        return Err(SelectError::LengthMismatch {
            doc_id: doc.id.clone(),
            tokens: n_tokens,
            scores: scores.len(),
        });
    }
    let mut pool: Vec<&TokenScore> = scores
        .iter()
        .filter(|s| s.position > 0)
        .filter(|s| !cfg.content_word_filter || is_content_word(&s.token))
        .filter(|s| match cfg.strategy {
            Strategy::Prob => s.logprob < cfg.logprob_threshold,
            Strategy::Rank => s.rank > cfg.rank_threshold,
            _ => false,
        })
        .collect();
    match cfg.strategy {
        Strategy::Prob => pool.sort_by(|a, b| a.logprob.total_cmp(&b.logprob).then(a.position.cmp(&b.position))),
        Strategy::Rank => pool.sort_by(|a, b| b.rank.cmp(&a.rank).then(a.position.cmp(&b.position))),
        other => return Err(SelectError::NotThresholdStrategy(other)),
    }
    pool.truncate(cfg.max_candidates);
    pool.sort_by_key(|s| s.position);
    Ok(pool
        .into_iter()
        .map(|s| CandidateToken::scored(&doc.id, s, cfg.strategy))
        .collect())
}

/// Finds person-name tokens in a document.
pub trait NameDetector: Send + Sync {
    /// Token positions (into [`tokenize`] output) that are person names.
    fn detect(&self, tokens: &[Span<'_>]) -> Vec<usize>;
}

/// Flags capitalized tokens that do not start a sentence and are not common
/// words, plus any token listed in the optional gazetteer.
#[derive(Debug, Clone, Default)]
pub struct HeuristicNameDetector {
    gazetteer: HashSet<String>,
}

impl HeuristicNameDetector {
    pub fn with_gazetteer<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        HeuristicNameDetector {
            gazetteer: names.into_iter().map(Into::into).collect(),
        }
    }

    fn looks_like_name(tok: &str) -> bool {
        let mut chars = tok.chars();
        let Some(first) = chars.next() else { return false };
        let rest: Vec<char> = chars.collect();
        first.is_uppercase()
            && tok.chars().all(char::is_alphabetic)
            && !rest.is_empty()
            && rest.iter().any(|c| c.is_lowercase())
            && !common_capitalized().contains(tok.to_lowercase().as_str())
    }
}

impl NameDetector for HeuristicNameDetector {
    fn detect(&self, tokens: &[Span<'_>]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut sentence_start = true;
        for (i, tok) in tokens.iter().enumerate() {
            let t = tok.text;
            if self.gazetteer.contains(t) || (!sentence_start && Self::looks_like_name(t)) {
                out.push(i);
            }
            let after_title = i > 0 && TITLES.contains(&tokens[i - 1].text.to_lowercase().as_str());
            sentence_start = match t {
                "." if after_title => false,
                "." | "!" | "?" | ":" | "“" | "(" | "[" => true,
                // quotes and dashes keep the current state
                "\"" | "'" | "‘" | "’" | "”" | "—" | "-" => sentence_start,
                _ => false,
            };
        }
        out
    }
}

/// Person candidates, one per distinct surface form (first occurrence).
pub fn detect_person_tokens(doc: &Document) -> Vec<CandidateToken> {
    detect_person_tokens_with(doc, &HeuristicNameDetector::default())
}

pub fn detect_person_tokens_with(doc: &Document, detector: &dyn NameDetector) -> Vec<CandidateToken> {
    let spans = tokenize_spans(&doc.text);
    let mut seen = HashSet::new();
    let mut positions = detector.detect(&spans);
    positions.sort_unstable();
    positions
        .into_iter()
        .filter(|&i| seen.insert(spans[i].text))
        .map(|i| CandidateToken::new(&doc.id, i, spans[i].text, Strategy::Person))
        .collect()
}

/// Instruction used to ask a model for a passage's informative words.
pub fn informative_words_template() -> PromptTemplate {
    PromptTemplate::new(None, include_str!("../fixtures/templates/informative_words.txt"))
}

/// Asks `filter_model` for the document's informative words and keeps those
/// that occur verbatim in it (first occurrence, response order, capped).
pub fn select_informative_words(
    doc: &Document,
    filter_model: &dyn Completer,
    cfg: &SelectionConfig,
) -> Result<Vec<CandidateToken>, SelectError> {
    let response = filter_model.complete(&informative_words_template().render(&doc.text))?;
    informative_words_from_response(doc, &response, cfg)
}

pub fn informative_words_from_response(
    doc: &Document,
    response: &str,
    cfg: &SelectionConfig,
) -> Result<Vec<CandidateToken>, SelectError> {
    if response.trim().is_empty() {
        return Ok(Vec::new());
    }
    let words = parse_word_list(response);
    if words.is_empty() {
        return Err(SelectError::Unparseable {
            doc_id: doc.id.clone(),
            response: response.to_string(),
        });
    }
    let spans = tokenize_spans(&doc.text);
    let mut first_pos: HashMap<&str, usize> = HashMap::new();
    for (i, s) in spans.iter().enumerate() {
        first_pos.entry(s.text).or_insert(i);
    }
    let mut seen = HashSet::new();
    let mut out: Vec<CandidateToken> = words
        .iter()
        .filter_map(|w| first_pos.get(w.as_str()).map(|&p| (w, p)))
        .filter(|(w, _)| !cfg.content_word_filter || is_content_word(w))
        .filter(|(_, p)| seen.insert(*p))
        .take(cfg.max_candidates)
        .map(|(w, p)| CandidateToken::new(&doc.id, p, w, Strategy::InformativeWord))
        .collect();
    out.sort_by_key(|c| c.position);
    Ok(out)
}

/// A secondary model used to knock out guessable candidates.
#[derive(Clone)]
pub struct FilterModel {
    pub completer: Arc<dyn Completer>,
    /// [`TemplateId::FilterGuess`] expects one word back;
    /// [`TemplateId::FilterGuess100`] accepts a list and matches any entry.
    pub template: TemplateId,
}

impl FilterModel {
    pub fn new(completer: Arc<dyn Completer>, template: TemplateId) -> Self {
        FilterModel { completer, template }
    }

    fn judge(&self, response: &str, gold: &str) -> Option<String> {
        match self.template {
            TemplateId::FilterGuess100 => {
                let gold = normalize_token(gold);
                parse_word_list(response).into_iter().find(|w| normalize_token(w) == gold)
            }
            _ => {
                let parsed = parse_response(response);
                if match_guess(&parsed, gold) {
                    parsed.guess
                } else {
                    None
                }
            }
        }
    }
}

/// Candidates after knowledge filtering. Every input candidate ends up in
/// exactly one of the two lists, in input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterReport {
    pub survivors: Vec<CandidateToken>,
    pub dropped: Vec<CandidateToken>,
}

impl FilterReport {
    /// All candidates with their audit fields, in input order of survivors then dropped.
    pub fn all(&self) -> impl Iterator<Item = &CandidateToken> {
        self.survivors.iter().chain(&self.dropped)
    }
}

/// Drops every candidate that any filter model reconstructs from the masked
/// document. Failed filter calls keep the candidate and record the error;
/// only fatal endpoint errors abort.
pub fn apply_knowledge_filter(
    candidates: Vec<CandidateToken>,
    docs: &[Document],
    filters: &[FilterModel],
) -> Result<FilterReport, SelectError> {
    if filters.is_empty() {
        return Ok(FilterReport {
            survivors: candidates,
            dropped: Vec::new(),
        });
    }
    let by_id: HashMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();

    // (candidate index, filter index) jobs; results keyed back by index.
    let mut verdicts: BTreeMap<usize, Vec<Result<Option<String>, TargetError>>> = BTreeMap::new();
    for filter in filters {
        let jobs: Vec<usize> = (0..candidates.len()).collect();
        let results = parallel_map(&jobs, filter.completer.max_in_flight(), |&ci| {
            let cand = &candidates[ci];
            let doc = by_id
                .get(cand.doc_id.as_str())
                .ok_or_else(|| TargetError::Other(format!("unknown document {:?}", cand.doc_id)))?;
            let probe = build_probe_unchecked(doc, cand, filter.template)
                .map_err(|e| TargetError::Other(e.to_string()))?;
            let response = filter.completer.complete(&probe.prompt)?;
            Ok::<_, TargetError>(filter.judge(&response, &probe.gold))
        });
        for (ci, r) in results.into_iter().enumerate() {
            if let Err(e) = &r {
                if e.is_fatal() {
                    return Err(SelectError::Target(e.clone()));
                }
            }
            verdicts.entry(ci).or_default().push(r);
        }
    }

    let mut report = FilterReport::default();
    for (ci, mut cand) in candidates.into_iter().enumerate() {
        let results = verdicts.remove(&ci).unwrap_or_default();
        for (filter, r) in filters.iter().zip(results) {
            match r {
                Ok(Some(guess)) if cand.filter_reason.is_none() => {
                    cand.filtered_out = true;
                    cand.filter_reason = Some(FilterReason {
                        model: filter.completer.name().to_string(),
                        guess,
                    });
                }
                Ok(_) => {}
                Err(e) => cand
                    .filter_errors
                    .push(format!("{}: {e}", filter.completer.name())),
            }
        }
        if cand.filtered_out {
            report.dropped.push(cand);
        } else {
            report.survivors.push(cand);
        }
    }
    Ok(report)
}
