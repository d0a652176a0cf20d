//! Library behaviour checked against small independent re-implementations.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use memprobe::baselines::{fit_threshold, prefix_probe, Direction};
use memprobe::corpus::{split_holdout, Document, Label, LabeledDataset};
use memprobe::lm::{tokenize, train_ngram};
use memprobe::pipeline::{run_probes, verdicts};
use memprobe::probe::{build_probe, match_guess, parse_response, TemplateId};
use memprobe::scoring::{evaluate, f_beta, DocVerdict};
use memprobe::selector::{
    detect_person_tokens, detect_person_tokens_with, select_informative_words, CandidateToken, HeuristicNameDetector,
    SelectionConfig, Strategy,
};
use memprobe::synth::{generate, SynthConfig};
use memprobe::target::{Completer, SalientWordResponder, StubModel};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 6] = ["ash", "birch", "cedar", "elm", "fir", ","];

/// Add-alpha n-gram probability recomputed from raw counts.
struct CountOracle {
    order: usize,
    alpha: f64,
    vocab: HashSet<String>,
    counts: HashMap<Vec<String>, HashMap<String, u64>>,
}

impl CountOracle {
    fn new(docs: &[Vec<String>], order: usize, alpha: f64) -> Self {
        let mut counts: HashMap<Vec<String>, HashMap<String, u64>> = HashMap::new();
        let mut vocab = HashSet::new();
        for d in docs {
            for i in 0..d.len() {
                vocab.insert(d[i].clone());
                for k in 0..order.min(i + 1) {
                    *counts.entry(d[i - k..i].to_vec()).or_default().entry(d[i].clone()).or_default() += 1;
                }
            }
        }
        CountOracle { order, alpha, vocab, counts }
    }

    fn prob(&self, tokens: &[String], pos: usize) -> f64 {
        // unknown tokens share one slot
        let norm = |t: &String| if self.vocab.contains(t) { t.clone() } else { "\u{0}unk".to_string() };
        let seq: Vec<String> = tokens.iter().map(norm).collect();
        let mut k = pos.min(self.order - 1);
        let table = loop {
            if let Some(t) = self.counts.get(&seq[pos - k..pos]) {
                break t;
            }
            k -= 1;
        };
        let total: u64 = table.values().sum();
        let c = table.get(&seq[pos]).copied().unwrap_or(0) as f64;
        (c + self.alpha) / (total as f64 + self.alpha * (self.vocab.len() + 1) as f64)
    }
}

fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

#[test]
fn ngram_matches_count_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let docs: Vec<Document> = (0..30).map(|i| Document::new(format!("t{i}"), random_text(&mut rng, 25))).collect();
    let tokenized: Vec<Vec<String>> = docs.iter().map(|d| tokenize(&d.text)).collect();
    for order in 1..=4 {
        for alpha in [1e-4, 0.5, 1.0] {
            let model = train_ngram(&docs, order, alpha).unwrap();
            let oracle = CountOracle::new(&tokenized, order, alpha);
            assert_eq!(model.vocab().len(), oracle.vocab.len() + 1);
            for _ in 0..200 {
                let mut q = tokenize(&random_text(&mut rng, 12));
                if rng.random_bool(0.3) {
                    let i = rng.random_range(0..q.len());
                    q[i] = "oak".into();
                }
                let pos = rng.random_range(0..q.len());
                let got = model.token_prob(&q, pos).unwrap();
                let want = oracle.prob(&q, pos);
                assert!((got - want).abs() < 1e-12, "order {order} alpha {alpha}: {got} vs {want}");
                let total: f64 = model.position_distribution(&q, pos).unwrap().iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn stub_recall_rate_is_honoured() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base_docs = vec![Document::new("b", "the keeper walked to the pier and the keeper slept .")];
    let base = Arc::new(train_ngram(&base_docs, 2, 1e-4).unwrap());
    let docs: Vec<Document> = (0..200)
        .map(|i| {
            let word: String = (0..8).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            Document::new(format!("m{i}"), format!("the keeper named {word} walked to pier {i} ."))
        })
        .collect();
    let stub = StubModel::new("stub", base).with_recall(0.8, 42).contaminate(&docs);
    let hits = docs
        .iter()
        .filter(|d| {
            let tokens = tokenize(&d.text);
            let cand = CandidateToken::new(&d.id, 3, &tokens[3], Strategy::Prob);
            let probe = build_probe(d, &cand, TemplateId::FictionCloze).unwrap();
            match_guess(&parse_response(&stub.complete(&probe.prompt).unwrap()), &tokens[3])
        })
        .count();
    let rate = hits as f64 / docs.len() as f64;
    assert!((rate - 0.8).abs() <= 0.07, "recall rate {rate}");
}

#[test]
fn prefix_regurgitation_recovers_whole_suffix() {
    let base = Arc::new(train_ngram(&[Document::new("b", "a b c")], 2, 1.0).unwrap());
    let doc = Document::new(
        "m",
        "Marlow stood at the rail and counted the lamps along the shore while the tide turned slowly",
    );
    let stub = StubModel::new("stub", base.clone()).contaminate(std::slice::from_ref(&doc));
    let r = prefix_probe(&doc, &stub, 5, TemplateId::PrefixFiction).unwrap();
    assert_eq!(r.prefix, "Marlow stood at the rail");
    let suffix_words = doc.text.split_whitespace().count() - 5;
    assert_eq!(r.lcs_words, suffix_words);

    let clean = StubModel::new("clean", base);
    let r = prefix_probe(&doc, &clean, 5, TemplateId::PrefixFiction).unwrap();
    assert!(r.lcs_words < suffix_words / 2);
    assert!(prefix_probe(&doc, &clean, 5, TemplateId::FictionCloze).is_err());
}

fn brute_f(threshold: f64, dir: Direction, scores: &[(f64, bool)], beta: f64) -> f64 {
    let pred = |s: f64| match dir {
        Direction::Ge => s >= threshold,
        Direction::Le => s <= threshold,
    };
    let tp = scores.iter().filter(|(s, l)| pred(*s) && *l).count() as f64;
    let fp = scores.iter().filter(|(s, l)| pred(*s) && !*l).count() as f64;
    let fn_ = scores.iter().filter(|(s, l)| !pred(*s) && *l).count() as f64;
    let p = if tp + fp > 0.0 { 100.0 * tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { 100.0 * tp / (tp + fn_) } else { 0.0 };
    let b2 = beta * beta;
    if b2 * p + r == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / (b2 * p + r)
    }
}

#[test]
fn fit_threshold_matches_exhaustive_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..20 {
        let shift = if trial % 2 == 0 { 0.8 } else { -0.8 };
        let scores: Vec<(f64, bool)> = (0..200)
            .map(|_| {
                let l = rng.random_bool(0.5);
                let s: f64 = rng.random::<f64>() * 4.0 + if l { shift } else { 0.0 };
                ((s * 10.0).round() / 10.0, l)
            })
            .collect();
        let beta = [0.1, 1.0][trial % 2];
        let clf = fit_threshold(&scores, beta).unwrap();
        let mut vals: Vec<f64> = scores.iter().map(|s| s.0).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let best = vals
            .windows(2)
            .flat_map(|w| {
                let t = (w[0] + w[1]) / 2.0;
                [brute_f(t, Direction::Ge, &scores, beta), brute_f(t, Direction::Le, &scores, beta)]
            })
            .fold(f64::MIN, f64::max);
        let got = brute_f(clf.threshold, clf.direction, &scores, beta);
        assert!((got - best).abs() < 1e-9, "trial {trial}: {got} vs {best}");
    }
}

#[test]
fn confusion_counts_match_direct_tally() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut labels = HashMap::new();
    let mut vs = Vec::new();
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for i in 0..500 {
        let id = format!("d{i}");
        let member = rng.random_bool(0.4);
        let flagged = rng.random_bool(if member { 0.7 } else { 0.2 });
        labels.insert(id.clone(), if member { Label::Member } else { Label::NonMember });
        match (flagged, member) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
        vs.push(DocVerdict {
            doc_id: id,
            n_probes: 3,
            n_matches: if flagged { 2 } else { 0 },
            memorized: flagged,
            abstained: false,
        });
    }
    let m = evaluate(&vs, &labels, 0.1).unwrap();
    assert_eq!((m.tp, m.fp, m.fn_, m.tn), (tp, fp, fn_, tn));
    let p = 100.0 * tp as f64 / (tp + fp) as f64;
    let r = 100.0 * tp as f64 / (tp + fn_) as f64;
    assert!((m.precision - p).abs() < 1e-9 && (m.recall - r).abs() < 1e-9);
    assert!((m.f_beta - f_beta(p, r, 0.1)).abs() < 1e-9);
    assert!((m.em_rate - 100.0 * (tp + fp) as f64 / 500.0).abs() < 1e-9);
}

#[test]
fn random_verdicts_sit_at_chance() {
    // balanced labels: coin-flip verdicts give P, R and F near 50
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let labels: HashMap<String, Label> = (0..n)
        .map(|i| (format!("d{i}"), if i % 2 == 0 { Label::Member } else { Label::NonMember }))
        .collect();
    let vs: Vec<DocVerdict> = (0..n)
        .map(|i| {
            let flagged = rng.random_bool(0.5);
            DocVerdict {
                doc_id: format!("d{i}"),
                n_probes: 1,
                n_matches: flagged as usize,
                memorized: flagged,
                abstained: false,
            }
        })
        .collect();
    let m = evaluate(&vs, &labels, 0.1).unwrap();
    for v in [m.precision, m.recall, m.f_beta] {
        assert!((v - 50.0).abs() <= 2.0, "{m:?}");
    }
}

#[test]
fn errored_probes_do_not_count_toward_verdicts() {
    struct Flaky;
    impl Completer for Flaky {
        fn complete(&self, prompt: &str) -> Result<String, memprobe::target::TargetError> {
            if prompt.contains("pier") {
                Err(memprobe::target::TargetError::Rejected("nope".into()))
            } else {
                Ok("<word>lamp</word>".into())
            }
        }
        fn name(&self) -> &str {
            "flaky"
        }
    }
    let docs = vec![
        Document::new("a", "the lamp and the lamp and the lamp"),
        Document::new("b", "the lamp by the pier and the lamp"),
    ];
    let cands = vec![
        CandidateToken::new("a", 1, "lamp", Strategy::Prob),
        CandidateToken::new("a", 4, "lamp", Strategy::Prob),
        CandidateToken::new("b", 1, "lamp", Strategy::Prob),
        CandidateToken::new("b", 7, "lamp", Strategy::Prob),
    ];
    let outcomes = run_probes(&docs, &cands, &Flaky, TemplateId::FictionCloze).unwrap();
    assert_eq!(outcomes.iter().filter(|o| o.error.is_some()).count(), 2);
    let v = verdicts(&docs, &outcomes, 2);
    assert!(v[0].memorized);
    assert!(!v[1].memorized && v[1].n_probes == 0 && v[1].abstained);
}

#[test]
fn heuristic_finds_mid_sentence_names() {
    let doc = Document::new("d", "Yesterday the clerk met Oswin Tarrow near the pier. Then Mr Vell left on Monday.");
    let found: Vec<String> = detect_person_tokens(&doc).into_iter().map(|c| c.surface).collect();
    assert_eq!(found, ["Oswin", "Tarrow", "Vell"]);
}

#[test]
fn planted_names_are_all_detected_with_gazetteer() {
    let corpus = generate(&SynthConfig {
        n_docs: 40,
        n_members: 20,
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    let detector = HeuristicNameDetector::with_gazetteer(corpus.names.iter().cloned());
    let names: HashSet<&str> = corpus.names.iter().map(String::as_str).collect();
    let (mut planted, mut found) = (0, 0);
    for doc in corpus.dataset.documents() {
        let toks = tokenize(&doc.text);
        let hits: HashSet<usize> = detect_person_tokens_with(doc, &detector).iter().map(|c| c.position).collect();
        for (i, t) in toks.iter().enumerate() {
            if names.contains(t.as_str()) {
                planted += 1;
                found += hits.contains(&i) as usize;
            }
        }
        assert!(hits.iter().all(|&i| names.contains(toks[i].as_str())));
    }
    assert!(planted > 0);
    assert_eq!(found, planted);
}

#[test]
fn informative_words_come_from_the_responder() {
    let reference = Arc::new(
        train_ngram(&[Document::new("r", "the man walked to the town and the man slept")], 1, 1.0).unwrap(),
    );
    let responder = SalientWordResponder::new("salient", reference, 2);
    let doc = Document::new("d", "the man walked to Quillon and the lighthouse hummed");
    let cands = select_informative_words(&doc, &responder, &SelectionConfig::default()).unwrap();
    let got: Vec<(usize, &str)> = cands.iter().map(|c| (c.position, c.surface.as_str())).collect();
    assert_eq!(got, [(4, "Quillon"), (7, "lighthouse")]);
    assert!(cands.iter().all(|c| c.strategy == Strategy::InformativeWord));
}

#[test]
fn validation_carve_out_sizes() {
    let frac = 1870.0 / 9870.0;
    let unlabeled: Vec<Document> = (0..9870).map(|i| Document::new(format!("u{i}"), "x")).collect();
    let ds = LabeledDataset::new("u", unlabeled).unwrap();
    let (eval, held) = split_holdout(&ds, frac, 0).unwrap();
    assert_eq!((eval.len(), held.len()), (8000, 1870));

    let labeled: Vec<Document> = (0..9870)
        .map(|i| Document::new(format!("l{i}"), "x").with_label(if i % 2 == 0 { Label::Member } else { Label::NonMember }))
        .collect();
    let ds = LabeledDataset::new("l", labeled).unwrap();
    let (eval, held) = split_holdout(&ds, frac, 0).unwrap();
    assert_eq!(held.len(), 1870);
    assert_eq!(held.class_counts().members, 935);
    assert_eq!(eval.len(), 8000);
    let (eval2, _) = split_holdout(&ds, frac, 0).unwrap();
    assert_eq!(eval, eval2);
}
