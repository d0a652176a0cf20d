//! Cloze probes: masking one candidate token, rendering prompts from the stored
//! templates, and turning free-form model answers into match decisions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::lm::tokenize_spans;
use crate::selector::CandidateToken;

/// Literal mask sentinel placed in probe text.
pub const MASK: &str = "[MASK]";

const PLACEHOLDER: &str = "{input}";

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("candidate {doc_id}:{position} was removed by a knowledge filter")]
    FilteredCandidate { doc_id: String, position: usize },
    #[error("candidate {doc_id}:{position} expects {expected:?} but the document has {found:?}")]
    Stale {
        doc_id: String,
        position: usize,
        expected: String,
        found: Option<String>,
    },
    #[error("document {0:?} already contains the mask sentinel")]
    SentinelInText(String),
    #[error("candidate belongs to {candidate:?}, not {document:?}")]
    WrongDocument { candidate: String, document: String },
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    FictionCloze,
    ContaminationSlot,
    FilterGuess,
    FilterGuess100,
    PrefixFiction,
    PrefixNews,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::FictionCloze,
        TemplateId::ContaminationSlot,
        TemplateId::FilterGuess,
        TemplateId::FilterGuess100,
        TemplateId::PrefixFiction,
        TemplateId::PrefixNews,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::FictionCloze => "fiction_cloze",
            TemplateId::ContaminationSlot => "contamination_slot",
            TemplateId::FilterGuess => "filter_guess",
            TemplateId::FilterGuess100 => "filter_guess100",
            TemplateId::PrefixFiction => "prefix_fiction",
            TemplateId::PrefixNews => "prefix_news",
        }
    }

    pub fn template(self) -> PromptTemplate {
        let text = match self {
            TemplateId::FictionCloze => include_str!("../fixtures/templates/fiction_cloze.txt"),
            TemplateId::ContaminationSlot => include_str!("../fixtures/templates/contamination_slot.txt"),
            TemplateId::FilterGuess => include_str!("../fixtures/templates/filter_guess.txt"),
            TemplateId::FilterGuess100 => include_str!("../fixtures/templates/filter_guess_100.txt"),
            TemplateId::PrefixFiction => include_str!("../fixtures/templates/prefix_fiction.txt"),
            TemplateId::PrefixNews => include_str!("../fixtures/templates/prefix_news.txt"),
        };
        PromptTemplate::new(Some(self), text)
    }

    /// True for templates whose input carries a mask.
    pub fn is_cloze(self) -> bool {
        !matches!(self, TemplateId::PrefixFiction | TemplateId::PrefixNews)
    }
}

impl std::fmt::Display for TemplateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TemplateId {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ProbeError::UnknownTemplate(s.to_string()))
    }
}

/// Prompt text with exactly one `{input}` placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: Option<TemplateId>,
    prefix: &'static str,
    suffix: &'static str,
}

impl PromptTemplate {
    pub(crate) fn new(id: Option<TemplateId>, text: &'static str) -> Self {
        let (prefix, suffix) = text
            .split_once(PLACEHOLDER)
            .expect("template fixture has an input placeholder");
        assert!(!suffix.contains(PLACEHOLDER), "template has a single placeholder");
        PromptTemplate { id, prefix, suffix }
    }

    pub fn render(&self, input: &str) -> String {
        let mut out = String::with_capacity(self.prefix.len() + input.len() + self.suffix.len());
        out.push_str(self.prefix);
        out.push_str(input);
        out.push_str(self.suffix);
        out
    }

    /// Recovers the input of a prompt rendered from this template.
    pub fn extract_input<'a>(&self, prompt: &'a str) -> Option<&'a str> {
        prompt
            .strip_prefix(self.prefix)
            .and_then(|rest| rest.strip_suffix(self.suffix))
    }

    /// Template text with the placeholder in place.
    pub fn text(&self) -> String {
        self.render(PLACEHOLDER)
    }
}

/// Identifies which stored template produced `prompt` and returns its input.
/// Longer template prefixes are tried first.
pub fn extract_prompt_input(prompt: &str) -> Option<(TemplateId, &str)> {
    let mut templates: Vec<PromptTemplate> = TemplateId::ALL.iter().map(|t| t.template()).collect();
    templates.sort_by_key(|t| std::cmp::Reverse(t.prefix.len() + t.suffix.len()));
    templates
        .into_iter()
        .find_map(|t| t.extract_input(prompt).map(|input| (t.id.expect("stored template"), input)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub doc_id: String,
    pub candidate: CandidateToken,
    pub masked_text: String,
    pub gold: String,
    pub prompt: String,
    pub template_id: TemplateId,
}

/// Flat export form of a [`Probe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub doc_id: String,
    pub position: usize,
    pub gold: String,
    pub masked_text: String,
    pub prompt: String,
    pub template_id: TemplateId,
}

impl From<&Probe> for ProbeRecord {
    fn from(p: &Probe) -> Self {
        ProbeRecord {
            doc_id: p.doc_id.clone(),
            position: p.candidate.position,
            gold: p.gold.clone(),
            masked_text: p.masked_text.clone(),
            prompt: p.prompt.clone(),
            template_id: p.template_id,
        }
    }
}

/// Replaces the candidate's token span with [`MASK`].
pub fn mask_document(doc: &Document, candidate: &CandidateToken) -> Result<String, ProbeError> {
    if candidate.doc_id != doc.id {
        return Err(ProbeError::WrongDocument {
            candidate: candidate.doc_id.clone(),
            document: doc.id.clone(),
        });
    }
    if doc.text.contains(MASK) {
        return Err(ProbeError::SentinelInText(doc.id.clone()));
    }
    let spans = tokenize_spans(&doc.text);
    let span = spans.get(candidate.position);
    match span {
        Some(s) if s.text == candidate.surface => {
            let mut masked = String::with_capacity(doc.text.len() + MASK.len());
            masked.push_str(&doc.text[..s.start]);
            masked.push_str(MASK);
            masked.push_str(&doc.text[s.end..]);
            Ok(masked)
        }
        _ => Err(ProbeError::Stale {
            doc_id: doc.id.clone(),
            position: candidate.position,
            expected: candidate.surface.clone(),
            found: span.map(|s| s.text.to_string()),
        }),
    }
}

pub fn build_probe(doc: &Document, candidate: &CandidateToken, template: TemplateId) -> Result<Probe, ProbeError> {
    if candidate.filtered_out {
        return Err(ProbeError::FilteredCandidate {
            doc_id: candidate.doc_id.clone(),
            position: candidate.position,
        });
    }
    build_probe_unchecked(doc, candidate, template)
}

/// Builds a probe without the filtered-out precondition; used by the knowledge
/// filter itself, which probes candidates before their status is known.
pub(crate) fn build_probe_unchecked(
    doc: &Document,
    candidate: &CandidateToken,
    template: TemplateId,
) -> Result<Probe, ProbeError> {
    let masked_text = mask_document(doc, candidate)?;
    let prompt = template.template().render(&masked_text);
    Ok(Probe {
        doc_id: doc.id.clone(),
        candidate: candidate.clone(),
        gold: candidate.surface.clone(),
        masked_text,
        prompt,
        template_id: template,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsePath {
    TaggedWord,
    QuotedWord,
    LastWordHeuristic,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedGuess {
    pub raw_response: String,
    pub guess: Option<String>,
    pub parse_path: ParsePath,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

fn strip_punct(s: &str) -> &str {
    s.trim_matches(is_punct)
}

fn first_word(s: &str) -> Option<&str> {
    s.split_whitespace().map(strip_punct).find(|w| !w.is_empty())
}

fn tagged_word(raw: &str) -> Option<&str> {
    const OPEN: &str = "<word>";
    const CLOSE: &str = "</word>";
    let start = raw.find(OPEN)? + OPEN.len();
    let end = raw[start..].find(CLOSE)? + start;
    first_word(&raw[start..end])
}

fn quoted_word(raw: &str) -> Option<&str> {
    let mut rest = raw;
    while let Some(open) = rest.find(['"', '“']) {
        let after = &rest[open + rest[open..].chars().next()?.len_utf8()..];
        let close = after.find(['"', '”'])?;
        let inner = after[..close].trim();
        let word = strip_punct(inner);
        if !word.is_empty() && !word.contains(char::is_whitespace) {
            return Some(word);
        }
        rest = &after[close + after[close..].chars().next()?.len_utf8()..];
    }
    None
}

fn last_alphabetic_word(raw: &str) -> Option<&str> {
    raw.split_whitespace()
        .rev()
        .map(strip_punct)
        .find(|w| w.chars().any(char::is_alphabetic))
}

/// Extracts a single-word guess: a `<word>` tag first, then a double-quoted
/// word, then the last alphabetic word of the response.
pub fn parse_response(raw: &str) -> ParsedGuess {
    let (guess, parse_path) = if let Some(w) = tagged_word(raw) {
        (Some(w), ParsePath::TaggedWord)
    } else if let Some(w) = quoted_word(raw) {
        (Some(w), ParsePath::QuotedWord)
    } else if let Some(w) = last_alphabetic_word(raw) {
        (Some(w), ParsePath::LastWordHeuristic)
    } else {
        (None, ParsePath::Unparseable)
    };
    ParsedGuess {
        raw_response: raw.to_string(),
        guess: guess.map(str::to_string),
        parse_path,
    }
}

/// Splits a list-style answer (comma, semicolon or line separated, optionally
/// numbered or bulleted) into words.
pub fn parse_word_list(raw: &str) -> Vec<String> {
    let raw = match (raw.find("<word>"), raw.rfind("</word>")) {
        (Some(s), Some(e)) if s < e => raw.replace("<word>", ",").replace("</word>", ","),
        _ => raw.to_string(),
    };
    raw.split([',', ';', '\n'])
        .flat_map(str::split_whitespace)
        .map(strip_punct)
        .filter(|w| w.chars().any(char::is_alphabetic))
        .map(str::to_string)
        .collect()
}

/// Lowercases, trims surrounding punctuation and whitespace, and collapses
/// internal whitespace to single spaces.
pub fn normalize_token(t: &str) -> String {
    let lower = t.to_lowercase();
    let trimmed = lower.trim_matches(|c: char| is_punct(c) || c.is_whitespace());
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn match_guess(guess: &ParsedGuess, gold: &str) -> bool {
    match &guess.guess {
        Some(g) => normalize_token(g) == normalize_token(gold),
        None => false,
    }
}
