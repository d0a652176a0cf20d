//! Seeded synthetic corpora for controlled contamination runs.
//!
//! Sentences come from a small fixed grammar, so a reference model trained on
//! a large grammar-only corpus finds every ordinary token predictable. Each
//! generated document additionally carries invented person names, which the
//! reference model has never seen, and optionally one "fact" sentence whose
//! final word is unknown to the reference model but predictable for any model
//! trained on the accompanying knowledge corpus.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, Document, Label, LabeledDataset};

const ADJECTIVES: &[&str] = &["old", "quiet", "bright", "small", "heavy", "green", "gentle", "brave"];
const NOUNS: &[&str] = &[
    "farmer", "river", "window", "garden", "teacher", "horse", "letter", "lantern", "bridge", "kettle", "sailor",
    "meadow", "basket", "miller", "orchard",
];
const VERBS: &[&str] = &[
    "found", "carried", "painted", "watched", "opened", "followed", "cleaned", "sold", "mended", "visited",
];
const PREPOSITIONS: &[&str] = &["near", "behind", "under", "beside", "across"];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "r", "s", "t", "v", "z", "br", "dr", "kr", "th"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ae", "ou"];
const CODAS: &[&str] = &["", "n", "r", "l", "th", "sk", "x", "m"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_docs: usize,
    /// Documents labeled as members (chosen by seed).
    pub n_members: usize,
    pub sentences_per_doc: usize,
    pub names_per_doc: usize,
    /// Share of documents that carry one fact sentence.
    pub fact_fraction: f64,
    pub reference_sentences: usize,
    /// How often each fact is repeated in the knowledge corpus.
    pub fact_repeats: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 200,
            n_members: 100,
            sentences_per_doc: 6,
            names_per_doc: 3,
            fact_fraction: 0.5,
            reference_sentences: 20_000,
            fact_repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    /// Grammar-only text for training the reference model.
    pub reference: Vec<Document>,
    /// Fact sentences known to the target and filter models.
    pub knowledge: Vec<Document>,
    pub dataset: LabeledDataset,
    /// Every planted person name.
    pub names: Vec<String>,
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

fn grammar_sentence(rng: &mut ChaCha8Rng) -> String {
    let n1 = pick(rng, NOUNS);
    let v = pick(rng, VERBS);
    let n2 = pick(rng, NOUNS);
    if rng.random_bool(0.5) {
        format!("the {} {n1} {v} the {n2} .", pick(rng, ADJECTIVES))
    } else {
        let (a, p, n3) = (pick(rng, ADJECTIVES), pick(rng, PREPOSITIONS), pick(rng, NOUNS));
        format!("the {n1} {v} the {a} {n2} {p} the {n3} .")
    }
}

fn name_sentence(rng: &mut ChaCha8Rng, name: &str) -> String {
    let (v, a, n) = (pick(rng, VERBS), pick(rng, ADJECTIVES), pick(rng, NOUNS));
    format!("{name} {v} the {a} {n} .")
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(pick(rng, ONSETS));
        w.push_str(pick(rng, VOWELS));
    }
    w.push_str(pick(rng, CODAS));
    w
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Invented words, distinct from each other and from the grammar.
fn fresh_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, CorpusError> {
    assert!(cfg.n_members <= cfg.n_docs, "n_members exceeds n_docs");
    assert!(cfg.sentences_per_doc >= 1, "documents need at least one sentence");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let reference_text: Vec<String> = (0..cfg.reference_sentences).map(|_| grammar_sentence(&mut rng)).collect();
    let reference = reference_text
        .chunks(50)
        .enumerate()
        .map(|(i, c)| Document::new(format!("ref-{i:05}"), c.join(" ")))
        .collect();

    let mut taken: HashSet<String> = ADJECTIVES
        .iter()
        .chain(NOUNS)
        .chain(VERBS)
        .chain(PREPOSITIONS)
        .map(|w| w.to_string())
        .collect();
    taken.insert("is".into());
    taken.insert("the".into());

    let n_facts = (cfg.fact_fraction * cfg.n_docs as f64).round() as usize;
    let names: Vec<String> = fresh_words(&mut rng, cfg.n_docs * cfg.names_per_doc, &mut taken)
        .iter()
        .map(|w| capitalize(w))
        .collect();
    let keys: Vec<String> = fresh_words(&mut rng, n_facts, &mut taken).iter().map(|w| capitalize(w)).collect();
    let objects = fresh_words(&mut rng, n_facts, &mut taken);

    let knowledge = keys
        .iter()
        .zip(&objects)
        .enumerate()
        .map(|(i, (k, o))| {
            let text = vec![format!("{k} is {o} ."); cfg.fact_repeats.max(1)].join(" ");
            Document::new(format!("fact-{i:05}"), text)
        })
        .collect();

    let mut fact_docs: Vec<usize> = (0..cfg.n_docs).collect();
    fact_docs.shuffle(&mut rng);
    fact_docs.truncate(n_facts);
    let mut fact_of = vec![None; cfg.n_docs];
    for (f, &d) in fact_docs.iter().enumerate() {
        fact_of[d] = Some(f);
    }
    let mut member_order: Vec<usize> = (0..cfg.n_docs).collect();
    member_order.shuffle(&mut rng);
    let members: HashSet<usize> = member_order[..cfg.n_members].iter().copied().collect();

    let mut documents = Vec::with_capacity(cfg.n_docs);
    for d in 0..cfg.n_docs {
        let mut sentences: Vec<String> = (0..cfg.sentences_per_doc).map(|_| grammar_sentence(&mut rng)).collect();
        // The first sentence stays plain so nothing interesting sits at position 0.
        let mut extra: Vec<String> = names[d * cfg.names_per_doc..(d + 1) * cfg.names_per_doc]
            .iter()
            .map(|n| name_sentence(&mut rng, n))
            .collect();
        if let Some(f) = fact_of[d] {
            extra.push(format!("{} is {} .", keys[f], objects[f]));
        }
        for s in extra {
            let at = rng.random_range(1..=sentences.len());
            sentences.insert(at, s);
        }
        let label = if members.contains(&d) { Label::Member } else { Label::NonMember };
        documents.push(Document::new(format!("syn-{d:04}"), sentences.join(" ")).with_label(label));
    }

    Ok(SynthCorpus {
        reference,
        knowledge,
        dataset: LabeledDataset::new("synthetic", documents)?,
        names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_docs: 20,
            n_members: 10,
            reference_sentences: 500,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_labeled() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.dataset.class_counts().members, 10);
        assert_eq!(a.knowledge.len(), 10);
        assert_eq!(a.names.len(), 60);
        let other = generate(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.dataset, other.dataset);
    }

    #[test]
    fn names_planted_once_and_absent_from_reference() {
        let c = generate(&small()).unwrap();
        let reference: String = c.reference.iter().map(|d| d.text.as_str()).collect::<Vec<_>>().join(" ");
        for (i, doc) in c.dataset.documents().iter().enumerate() {
            for name in &c.names[i * 3..i * 3 + 3] {
                assert!(doc.text.split(' ').any(|t| t == name), "{name} missing from {}", doc.id);
                assert!(!reference.contains(name.as_str()));
            }
            assert!(doc.text.starts_with("the "));
        }
    }
}
