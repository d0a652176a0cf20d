//! End-to-end stages: candidate selection, knowledge filtering, probe
//! execution, verdicts, reports and controlled contamination runs.
//!
//! Every stage is deterministic given its inputs: records come out in dataset
//! order, then position order, and carry no timestamps.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, Label, LabeledDataset};
use crate::lm::{score_document, LmError, Scorer};
use crate::probe::{build_probe, match_guess, parse_response, ParsePath, TemplateId};
use crate::scoring::{delta_em, evaluate, exact_match_rate, verdict, DocVerdict, MetricsReport, ReportRow, ScoringError};
use crate::selector::{
    apply_knowledge_filter, detect_person_tokens_with, select_candidates, select_informative_words, CandidateToken,
    FilterModel, FilterReport, NameDetector, SelectError, SelectionConfig, Strategy,
};
use crate::target::{parallel_map, Completer, StubModel, TargetError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has no labels; metrics need member/non-member labels")]
    NoLabels,
    #[error("strategy {0:?} needs {1}")]
    MissingSource(Strategy, &'static str),
    #[error("scoring document {doc_id:?}: {source}")]
    Scoring {
        doc_id: String,
        #[source]
        source: LmError,
    },
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Metrics(#[from] ScoringError),
    #[error("fatal target error: {0}")]
    Fatal(TargetError),
}

/// What the selection stage may draw on; only the part matching the
/// configured strategy is used.
#[derive(Clone, Copy, Default)]
pub struct SelectionSources<'a> {
    pub scorer: Option<&'a dyn Scorer>,
    pub names: Option<&'a dyn NameDetector>,
    pub informative: Option<&'a dyn Completer>,
}

/// Candidates for every document, in dataset then position order.
pub fn select_all(
    docs: &[Document],
    cfg: &SelectionConfig,
    sources: SelectionSources<'_>,
) -> Result<Vec<CandidateToken>, PipelineError> {
    if docs.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    cfg.validate()?;
    let per_doc: Vec<Result<Vec<CandidateToken>, PipelineError>> = match cfg.strategy {
        Strategy::Prob | Strategy::Rank => {
            let scorer = sources
                .scorer
                .ok_or(PipelineError::MissingSource(cfg.strategy, "a reference scorer"))?;
            parallel_map(docs, 4, |doc| {
                let scores = score_document(scorer, doc).map_err(|source| PipelineError::Scoring {
                    doc_id: doc.id.clone(),
                    source,
                })?;
                Ok(select_candidates(doc, &scores, cfg)?)
            })
        }
        Strategy::Person => {
            let detector = sources
                .names
                .ok_or(PipelineError::MissingSource(cfg.strategy, "a name detector"))?;
            docs.iter()
                .map(|doc| {
                    let mut c = detect_person_tokens_with(doc, detector);
                    c.truncate(cfg.max_candidates);
                    Ok(c)
                })
                .collect()
        }
        Strategy::InformativeWord => {
            let model = sources
                .informative
                .ok_or(PipelineError::MissingSource(cfg.strategy, "an informative-word model"))?;
            parallel_map(docs, model.max_in_flight(), |doc| Ok(select_informative_words(doc, model, cfg)?))
        }
    };
    let mut out = Vec::new();
    for r in per_doc {
        out.extend(r?);
    }
    Ok(out)
}

pub fn filter_all(
    candidates: Vec<CandidateToken>,
    docs: &[Document],
    filters: &[FilterModel],
) -> Result<FilterReport, PipelineError> {
    Ok(apply_knowledge_filter(candidates, docs, filters)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Ok,
    Error,
}

/// One executed probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub doc_id: String,
    pub position: usize,
    pub gold: String,
    pub strategy: Strategy,
    pub template_id: TemplateId,
    pub response: Option<String>,
    pub guess: Option<String>,
    pub parse_path: Option<ParsePath>,
    pub matched: bool,
    pub status: OutcomeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Probes every surviving candidate. Individual failures are recorded in the
/// outcome; a fatal endpoint error fails the whole batch.
pub fn run_probes(
    docs: &[Document],
    candidates: &[CandidateToken],
    target: &dyn Completer,
    template: TemplateId,
) -> Result<Vec<ProbeOutcome>, PipelineError> {
    let by_id: HashMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    let live: Vec<&CandidateToken> = candidates.iter().filter(|c| !c.filtered_out).collect();
    let outcomes = parallel_map(&live, target.max_in_flight(), |&cand| {
        let mut outcome = ProbeOutcome {
            doc_id: cand.doc_id.clone(),
            position: cand.position,
            gold: cand.surface.clone(),
            strategy: cand.strategy,
            template_id: template,
            response: None,
            guess: None,
            parse_path: None,
            matched: false,
            status: OutcomeStatus::Error,
            error: None,
        };
        let Some(doc) = by_id.get(cand.doc_id.as_str()) else {
            outcome.error = Some(format!("unknown document {:?}", cand.doc_id));
            return (outcome, None);
        };
        let probe = match build_probe(doc, cand, template) {
            Ok(p) => p,
            Err(e) => {
                outcome.error = Some(e.to_string());
                return (outcome, None);
            }
        };
        match target.complete(&probe.prompt) {
            Ok(raw) => {
                let parsed = parse_response(&raw);
                outcome.matched = match_guess(&parsed, &probe.gold);
                outcome.guess = parsed.guess;
                outcome.parse_path = Some(parsed.parse_path);
                outcome.response = Some(raw);
                outcome.status = OutcomeStatus::Ok;
                (outcome, None)
            }
            Err(e) => {
                outcome.error = Some(e.to_string());
                (outcome, e.is_fatal().then_some(e))
            }
        }
    });
    let mut out = Vec::with_capacity(outcomes.len());
    for (o, fatal) in outcomes {
        if let Some(e) = fatal {
            return Err(PipelineError::Fatal(e));
        }
        out.push(o);
    }
    let order: HashMap<&str, usize> = docs.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();
    out.sort_by_key(|o| (order.get(o.doc_id.as_str()).copied().unwrap_or(usize::MAX), o.position));
    Ok(out)
}

pub fn count_errors(outcomes: &[ProbeOutcome]) -> usize {
    outcomes.iter().filter(|o| o.status == OutcomeStatus::Error).count()
}

/// One verdict per document in dataset order. Errored probes do not count.
pub fn verdicts(docs: &[Document], outcomes: &[ProbeOutcome], min_matches: usize) -> Vec<DocVerdict> {
    let mut by_doc: HashMap<&str, Vec<bool>> = HashMap::new();
    for o in outcomes.iter().filter(|o| o.status == OutcomeStatus::Ok) {
        by_doc.entry(o.doc_id.as_str()).or_default().push(o.matched);
    }
    docs.iter()
        .map(|d| verdict(&d.id, by_doc.get(d.id.as_str()).map_or(&[][..], Vec::as_slice), min_matches))
        .collect()
}

pub fn labels_of(ds: &LabeledDataset) -> Result<HashMap<String, Label>, PipelineError> {
    if !ds.has_labels() {
        return Err(PipelineError::NoLabels);
    }
    Ok(ds
        .documents()
        .iter()
        .filter_map(|d| d.label.map(|l| (d.id.clone(), l)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub verdicts: Vec<DocVerdict>,
    pub n_probes: usize,
    pub n_errors: usize,
    /// Answers read by the quoted-word or last-word fallback instead of a `<word>` tag.
    pub n_fallback_parses: usize,
    pub n_unparseable: usize,
}

/// Verdicts and metrics for one probe run over a labeled dataset.
pub fn report(
    ds: &LabeledDataset,
    outcomes: &[ProbeOutcome],
    min_matches: usize,
    beta: f64,
    probe_name: &str,
) -> Result<Report, PipelineError> {
    let labels = labels_of(ds)?;
    let vs = verdicts(ds.documents(), outcomes, min_matches);
    let metrics = evaluate(&vs, &labels, beta)?;
    let token_type = outcomes
        .first()
        .map_or_else(|| "-".to_string(), |o| token_type_name(o.strategy).to_string());
    Ok(Report {
        rows: vec![ReportRow {
            probe: probe_name.to_string(),
            token_type,
            metrics,
        }],
        verdicts: vs,
        n_probes: outcomes.len(),
        n_errors: count_errors(outcomes),
        n_fallback_parses: outcomes
            .iter()
            .filter(|o| matches!(o.parse_path, Some(ParsePath::QuotedWord | ParsePath::LastWordHeuristic)))
            .count(),
        n_unparseable: outcomes
            .iter()
            .filter(|o| o.parse_path == Some(ParsePath::Unparseable))
            .count(),
    })
}

fn token_type_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Prob => "Prob",
        Strategy::Rank => "Rank",
        Strategy::Person => "Person",
        Strategy::InformativeWord => "Informative",
    }
}

/// One column of a contamination table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationRow {
    pub method: String,
    pub n_probes_clean: usize,
    pub n_probes_contaminated: usize,
    /// `None` when no probe could be built for that half.
    pub em_clean: Option<f64>,
    pub em_contaminated: Option<f64>,
    pub delta_em: Option<f64>,
    /// Verdicts scored with contamination as the positive class.
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub n_clean: usize,
    pub n_contaminated: usize,
    pub rows: Vec<ContaminationRow>,
}

/// Inputs for [`run_contamination`].
pub struct ContaminationSetup<'a> {
    pub scorer: &'a dyn Scorer,
    /// Uncontaminated target; the contaminated half is stored into a copy.
    pub target: StubModel,
    pub filters: &'a [FilterModel],
    pub informative: Option<&'a dyn Completer>,
    pub selection: SelectionConfig,
    pub template: TemplateId,
    pub beta: f64,
}

/// Stores `contaminated` into the stub, probes both halves with every method
/// available (informative words if a model is given; Prob and Rank, each with
/// and without the knowledge filters if any are given) and reports exact-match
/// rates and verdict metrics.
pub fn run_contamination(
    clean: &[Document],
    contaminated: &[Document],
    setup: ContaminationSetup<'_>,
) -> Result<ContaminationReport, PipelineError> {
    if clean.is_empty() || contaminated.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let target = Arc::new(setup.target.contaminate(contaminated));
    let all: Vec<Document> = clean
        .iter()
        .map(|d| d.clone().with_label(Label::NonMember))
        .chain(contaminated.iter().map(|d| d.clone().with_label(Label::Member)))
        .collect();
    let labels: HashMap<String, Label> = all.iter().map(|d| (d.id.clone(), d.label.expect("set above"))).collect();

    let mut methods: Vec<(String, Vec<CandidateToken>)> = Vec::new();
    if let Some(iw) = setup.informative {
        let cfg = SelectionConfig {
            strategy: Strategy::InformativeWord,
            ..setup.selection.clone()
        };
        let sources = SelectionSources {
            informative: Some(iw),
            ..Default::default()
        };
        methods.push(("Informative".into(), select_all(&all, &cfg, sources)?));
    }
    for strategy in [Strategy::Prob, Strategy::Rank] {
        let cfg = SelectionConfig {
            strategy,
            ..setup.selection.clone()
        };
        let sources = SelectionSources {
            scorer: Some(setup.scorer),
            ..Default::default()
        };
        let cands = select_all(&all, &cfg, sources)?;
        let name = token_type_name(strategy).to_string();
        if !setup.filters.is_empty() {
            let filtered = filter_all(cands.clone(), &all, setup.filters)?;
            methods.push((name.clone(), cands));
            methods.push((format!("{name} IF"), filtered.survivors));
        } else {
            methods.push((name, cands));
        }
    }

    let is_clean: HashMap<&str, bool> = clean.iter().map(|d| (d.id.as_str(), true)).collect();
    let mut rows = Vec::new();
    for (method, cands) in methods {
        let outcomes = run_probes(&all, &cands, target.as_ref(), setup.template)?;
        let ok: Vec<&ProbeOutcome> = outcomes.iter().filter(|o| o.status == OutcomeStatus::Ok).collect();
        let (c, m): (Vec<&ProbeOutcome>, Vec<&ProbeOutcome>) =
            ok.into_iter().partition(|o| is_clean.contains_key(o.doc_id.as_str()));
        let rate = |xs: &[&ProbeOutcome]| {
            let flags: Vec<bool> = xs.iter().map(|o| o.matched).collect();
            exact_match_rate(&flags).ok()
        };
        let (em_clean, em_contaminated) = (rate(&c), rate(&m));
        let delta = match (em_contaminated, em_clean) {
            (Some(a), Some(b)) => Some(delta_em(a, b)?),
            _ => None,
        };
        let vs = verdicts(&all, &outcomes, setup.selection.min_matches_for_verdict);
        rows.push(ContaminationRow {
            method,
            n_probes_clean: c.len(),
            n_probes_contaminated: m.len(),
            em_clean,
            em_contaminated,
            delta_em: delta,
            metrics: evaluate(&vs, &labels, setup.beta)?,
        });
    }
    Ok(ContaminationReport {
        n_clean: clean.len(),
        n_contaminated: contaminated.len(),
        rows,
    })
}

/// Aligned text rendering of a contamination report.
pub fn render_contamination(report: &ContaminationReport) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}%"));
    let header = ["Method", "EM clean", "EM contaminated", "Delta", "P", "R"];
    let rows: Vec<[String; 6]> = report
        .rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                pct(r.em_clean),
                pct(r.em_contaminated),
                pct(r.delta_em),
                format!("{:.1}", r.metrics.precision),
                format!("{:.1}", r.metrics.recall),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(&parts.join("  "));
        out.push('\n');
    };
    line(header.to_vec());
    for row in &rows {
        line(row.iter().map(String::as_str).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::train_ngram;
    use crate::target::FixedResponder;

    fn corpus() -> Vec<Document> {
        vec![
            Document::new("r1", "the cat sat on the mat ."),
            Document::new("r2", "the dog sat on the rug ."),
        ]
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let lm = train_ngram(&corpus(), 2, 0.01).unwrap();
        let sources = SelectionSources {
            scorer: Some(&lm),
            ..Default::default()
        };
        assert!(matches!(
            select_all(&[], &SelectionConfig::default(), sources),
            Err(PipelineError::EmptyDataset)
        ));
    }

    #[test]
    fn missing_source_is_reported() {
        let docs = corpus();
        let cfg = SelectionConfig {
            strategy: Strategy::InformativeWord,
            ..Default::default()
        };
        assert!(matches!(
            select_all(&docs, &cfg, SelectionSources::default()),
            Err(PipelineError::MissingSource(Strategy::InformativeWord, _))
        ));
    }

    #[test]
    fn probes_record_matches_and_errors() {
        let docs = vec![Document::new("d", "the Zorblat sat near Quix .")];
        let cands = vec![
            CandidateToken::new("d", 1, "Zorblat", Strategy::Person),
            CandidateToken::new("d", 4, "Quix", Strategy::Person),
            CandidateToken::new("d", 2, "wrong", Strategy::Person),
        ];
        let target = FixedResponder::new("t", "<word>Quix</word>");
        let out = run_probes(&docs, &cands, &target, TemplateId::FictionCloze).unwrap();
        assert_eq!(out.iter().map(|o| o.position).collect::<Vec<_>>(), vec![1, 2, 4]);
        assert!(!out[0].matched && out[2].matched);
        assert_eq!(out[1].status, OutcomeStatus::Error);
        assert_eq!(count_errors(&out), 1);
        let v = verdicts(&docs, &out, 2);
        assert_eq!((v[0].n_probes, v[0].n_matches, v[0].memorized), (2, 1, false));
    }

    #[test]
    fn report_needs_labels() {
        let ds = LabeledDataset::new("x", corpus()).unwrap();
        assert!(matches!(report(&ds, &[], 2, 0.1, "p"), Err(PipelineError::NoLabels)));
    }
}
