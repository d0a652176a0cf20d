//! `memprobe`: run the probing pipeline stage by stage from a TOML config.

mod config;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use memprobe::baselines::{
    classifier_f_beta, fit_threshold, mia_scores, prefix_probe, BaselineError, MiaMethod, MiaScore,
    PrefixProbeResult, ThresholdClassifier,
};
use memprobe::corpus::{split_holdout, write_documents, Document, LabeledDataset, load_dataset};
use memprobe::pipeline::{
    count_errors, filter_all, labels_of, render_contamination, report, run_contamination, run_probes, select_all,
    ContaminationSetup, ProbeOutcome, SelectionSources,
};
use memprobe::scoring::{evaluate, render_table, DocVerdict, ReportRow};
use memprobe::probe::{build_probe, TemplateId};
use memprobe::selector::{CandidateToken, Strategy};
use memprobe::synth::{generate, SynthConfig};
use memprobe::target::parallel_map;
use serde::de::DeserializeOwned;
use serde::Serialize;

use config::{Loaded, ModelSpec};

#[derive(Parser)]
#[command(name = "memprobe", version, about = "Surprisal-guided memorization probing of black-box language models")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the response cache path.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score documents and write candidate tokens.
    Select {
        /// Also run the configured knowledge filters.
        #[arg(long)]
        filter: bool,
    },
    /// Run knowledge filters over a candidate file.
    Filter {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Probe the target with masked candidates.
    Probe {
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Verdicts and precision/recall/F over a labeled dataset.
    Report {
        #[arg(long)]
        outcomes: Option<PathBuf>,
    },
    /// Prefix probing with LCS, and the PPL / compression / Min-K% scores.
    Baseline,
    /// Contaminate the stub target with half the dataset and compare EM rates.
    Contaminate,
    /// Write a seeded synthetic dataset, reference corpora and a sample config.
    Synth {
        #[arg(long, default_value_t = 200)]
        docs: usize,
        #[arg(long, default_value_t = 100)]
        members: usize,
    },
}

/// Exit status for runs that finished but recorded failed probes.
const EXIT_PROBE_ERRORS: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    if let Command::Synth { docs, members } = cli.command {
        let out = cli.out.unwrap_or_else(|| PathBuf::from("synth"));
        cmd_synth(&out, docs, members, cli.seed.unwrap_or(0))?;
        return Ok(0);
    }
    let Some(path) = cli.config else { bail!("--config is required") };
    let mut loaded = Loaded::read(&path)?;
    if let Some(s) = cli.seed {
        loaded.cfg.seed = s;
    }
    // Command-line paths are relative to the working directory, not the config.
    let cwd = std::env::current_dir()?;
    if let Some(c) = cli.cache {
        loaded.cfg.cache = Some(cwd.join(c));
    }
    if let Some(o) = cli.out {
        loaded.cfg.out_dir = cwd.join(o);
    }
    loaded.check_paths()?;
    std::fs::create_dir_all(loaded.out_dir())
        .with_context(|| format!("creating {}", loaded.out_dir().display()))?;
    let ds = load_dataset(&loaded.dataset_path())?;
    if ds.is_empty() {
        bail!("dataset {} is empty", loaded.dataset_path().display());
    }
    let counts = ds.class_counts();
    info!(
        "dataset {}: {} documents ({} members, {} non-members, {} unlabeled)",
        ds.name,
        ds.len(),
        counts.members,
        counts.non_members,
        counts.unlabeled
    );

    match cli.command {
        Command::Select { filter } => cmd_select(&loaded, &ds, filter),
        Command::Filter { input, output } => cmd_filter(&loaded, &ds, input, output),
        Command::Probe { candidates } => cmd_probe(&loaded, &ds, candidates),
        Command::Report { outcomes } => cmd_report(&loaded, &ds, outcomes),
        Command::Baseline => cmd_baseline(&loaded, &ds),
        Command::Contaminate => cmd_contaminate(&loaded, &ds),
        Command::Synth { .. } => unreachable!("handled above"),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    info!("wrote {} records to {}", items.len(), path.display());
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn members_of(ds: &LabeledDataset) -> Vec<Document> {
    ds.documents()
        .iter()
        .filter(|d| d.label.is_some_and(|l| l.is_member()))
        .cloned()
        .collect()
}

fn sort_candidates(ds: &LabeledDataset, cands: &mut [CandidateToken]) {
    let order: HashMap<&str, usize> = ds.documents().iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();
    cands.sort_by_key(|c| (order.get(c.doc_id.as_str()).copied().unwrap_or(usize::MAX), c.position));
}

fn cmd_select(loaded: &Loaded, ds: &LabeledDataset, filter: bool) -> Result<u8> {
    let cfg = &loaded.cfg;
    let cache = loaded.cache()?;
    let scorer = match cfg.selection.strategy {
        Strategy::Prob | Strategy::Rank => Some(loaded.scorer()?),
        _ => None,
    };
    let detector = loaded.name_detector()?;
    let informative = match (&cfg.informative, cfg.selection.strategy) {
        (Some(spec), Strategy::InformativeWord) => Some(loaded.completer(spec, &[], &cache)?),
        _ => None,
    };
    let sources = SelectionSources {
        scorer: scorer.as_deref(),
        names: Some(&detector),
        informative: informative.as_deref(),
    };
    let mut cands = select_all(ds.documents(), &cfg.selection, sources)?;
    info!("selected {} candidates with strategy {}", cands.len(), cfg.selection.strategy.as_str());
    if filter {
        let filters = loaded.filters(&members_of(ds), &cache)?;
        if filters.is_empty() {
            warn!("--filter given but no [[filters]] configured");
        }
        let report = filter_all(cands, ds.documents(), &filters)?;
        info!("knowledge filters kept {} and dropped {}", report.survivors.len(), report.dropped.len());
        cands = report.all().cloned().collect();
        sort_candidates(ds, &mut cands);
    }
    write_jsonl(&loaded.out("candidates.jsonl"), &cands)?;
    Ok(0)
}

fn cmd_filter(loaded: &Loaded, ds: &LabeledDataset, input: Option<PathBuf>, output: Option<PathBuf>) -> Result<u8> {
    let input = input.unwrap_or_else(|| loaded.out("candidates.jsonl"));
    let output = output.unwrap_or_else(|| loaded.out("candidates.filtered.jsonl"));
    let cands: Vec<CandidateToken> = read_jsonl(&input)?;
    let cache = loaded.cache()?;
    let filters = loaded.filters(&members_of(ds), &cache)?;
    if filters.is_empty() {
        bail!("no [[filters]] configured");
    }
    let report = filter_all(cands, ds.documents(), &filters)?;
    info!("knowledge filters kept {} and dropped {}", report.survivors.len(), report.dropped.len());
    let mut all: Vec<CandidateToken> = report.all().cloned().collect();
    sort_candidates(ds, &mut all);
    write_jsonl(&output, &all)?;
    Ok(0)
}

fn cmd_probe(loaded: &Loaded, ds: &LabeledDataset, candidates: Option<PathBuf>) -> Result<u8> {
    let path = candidates.unwrap_or_else(|| {
        let filtered = loaded.out("candidates.filtered.jsonl");
        if filtered.exists() {
            filtered
        } else {
            loaded.out("candidates.jsonl")
        }
    });
    info!("probing candidates from {}", path.display());
    let cands: Vec<CandidateToken> = read_jsonl(&path)?;
    let Some(spec) = &loaded.cfg.target else { bail!("no [target] configured") };
    let cache = loaded.cache()?;
    let target = loaded.completer(spec, &members_of(ds), &cache)?;
    write_jsonl(&loaded.out("probes.jsonl"), &probe_records(ds, &cands, loaded.cfg.templates.probe))?;
    let outcomes = run_probes(ds.documents(), &cands, target.as_ref(), loaded.cfg.templates.probe)?;
    write_jsonl(&loaded.out("outcomes.jsonl"), &outcomes)?;
    let errors = count_errors(&outcomes);
    let matched = outcomes.iter().filter(|o| o.matched).count();
    info!("{} probes, {matched} matched, {errors} errors", outcomes.len());
    Ok(if errors > 0 { EXIT_PROBE_ERRORS } else { 0 })
}

#[derive(Serialize)]
struct ProbeRecord {
    doc_id: String,
    position: usize,
    gold: String,
    masked_text: String,
    prompt: String,
    template_id: TemplateId,
}

/// The exact prompts a probe run sends, one per unfiltered candidate.
fn probe_records(ds: &LabeledDataset, cands: &[CandidateToken], template: TemplateId) -> Vec<ProbeRecord> {
    cands
        .iter()
        .filter(|c| !c.filtered_out)
        .filter_map(|c| {
            let doc = ds.get(&c.doc_id)?;
            let p = build_probe(doc, c, template).ok()?;
            Some(ProbeRecord {
                doc_id: p.doc_id,
                position: c.position,
                gold: p.gold,
                masked_text: p.masked_text,
                prompt: p.prompt,
                template_id: p.template_id,
            })
        })
        .collect()
}

fn cmd_report(loaded: &Loaded, ds: &LabeledDataset, outcomes: Option<PathBuf>) -> Result<u8> {
    let path = outcomes.unwrap_or_else(|| loaded.out("outcomes.jsonl"));
    let outcomes: Vec<ProbeOutcome> = read_jsonl(&path)?;
    let rep = report(
        ds,
        &outcomes,
        loaded.cfg.selection.min_matches_for_verdict,
        loaded.cfg.beta,
        "Reconstruction",
    )?;
    write_json(&loaded.out("report.json"), &rep)?;
    let table = render_table(&rep.rows);
    std::fs::write(loaded.out("report.txt"), &table)?;
    print!("{table}");
    let abstained = rep.rows[0].metrics.n_abstained;
    println!("{} documents, {} probes, {} errors, {abstained} abstained", rep.verdicts.len(), rep.n_probes, rep.n_errors);
    if rep.n_fallback_parses + rep.n_unparseable > 0 {
        println!(
            "{} answers parsed without a <word> tag, {} unparseable",
            rep.n_fallback_parses, rep.n_unparseable
        );
    }
    Ok(0)
}

#[derive(Serialize)]
struct Skipped {
    doc_id: String,
    reason: String,
}

#[derive(Serialize)]
struct BaselineReport {
    rows: Vec<ReportRow>,
    classifiers: Vec<(String, ThresholdClassifier)>,
    validation_f_beta: Vec<(String, f64)>,
    n_validation: usize,
    n_test: usize,
    n_skipped: usize,
}

/// Fits on validation scores and evaluates on test scores.
fn fit_and_evaluate(
    name: &str,
    val: &[(f64, bool)],
    test: &[(String, f64, bool)],
    beta: f64,
) -> Result<(ThresholdClassifier, f64, ReportRow)> {
    let clf = fit_threshold(val, beta).with_context(|| format!("fitting {name}"))?;
    let verdicts: Vec<DocVerdict> = test
        .iter()
        .map(|(id, s, _)| DocVerdict {
            doc_id: id.clone(),
            n_probes: 0,
            n_matches: 0,
            memorized: clf.predict(*s),
            abstained: false,
        })
        .collect();
    let labels = test
        .iter()
        .map(|(id, _, l)| {
            let label = if *l { memprobe::corpus::Label::Member } else { memprobe::corpus::Label::NonMember };
            (id.clone(), label)
        })
        .collect();
    let metrics = evaluate(&verdicts, &labels, beta)?;
    let row = ReportRow {
        probe: name.to_string(),
        token_type: "-".to_string(),
        metrics,
    };
    Ok((clf, classifier_f_beta(&clf, val), row))
}

fn cmd_baseline(loaded: &Loaded, ds: &LabeledDataset) -> Result<u8> {
    let cfg = &loaded.cfg;
    labels_of(ds)?;
    let (test, validation) = split_holdout(ds, cfg.baseline.holdout_fraction, cfg.seed)?;
    let is_val: HashMap<&str, bool> = validation.documents().iter().map(|d| (d.id.as_str(), true)).collect();
    let member = |d: &Document| d.label.is_some_and(|l| l.is_member());
    let mut summary = BaselineReport {
        rows: Vec::new(),
        classifiers: Vec::new(),
        validation_f_beta: Vec::new(),
        n_validation: validation.len(),
        n_test: test.len(),
        n_skipped: 0,
    };
    let add = |summary: &mut BaselineReport, name: String, val: Vec<(f64, bool)>, tst: Vec<(String, f64, bool)>| {
        let (clf, vf, row) = fit_and_evaluate(&name, &val, &tst, cfg.beta)?;
        summary.rows.push(row);
        summary.classifiers.push((name.clone(), clf));
        summary.validation_f_beta.push((name, vf));
        anyhow::Ok(clf)
    };

    let mut ran = false;
    if let Some(spec) = &cfg.target {
        ran = true;
        let cache = loaded.cache()?;
        let target = loaded.completer(&loaded.prefix_spec(spec), &members_of(ds), &cache)?;
        let results = parallel_map(ds.documents(), target.max_in_flight(), |doc| {
            prefix_probe(doc, target.as_ref(), cfg.baseline.prefix_words, cfg.templates.prefix)
        });
        let mut kept: Vec<PrefixProbeResult> = Vec::new();
        let mut skipped = Vec::new();
        for (doc, r) in ds.documents().iter().zip(results) {
            match r {
                Ok(p) => kept.push(p),
                Err(e @ (BaselineError::TooShort { .. } | BaselineError::Target(_))) => {
                    if let BaselineError::Target(t) = &e {
                        if t.is_fatal() {
                            bail!("prefix probing {}: {e}", doc.id);
                        }
                    }
                    skipped.push(Skipped {
                        doc_id: doc.id.clone(),
                        reason: e.to_string(),
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
        summary.n_skipped = skipped.len();
        write_jsonl(&loaded.out("baseline_prefix.jsonl"), &kept)?;
        write_jsonl(&loaded.out("baseline_skipped.jsonl"), &skipped)?;
        let by_id: HashMap<&str, &Document> = ds.documents().iter().map(|d| (d.id.as_str(), d)).collect();
        let (mut val, mut tst) = (Vec::new(), Vec::new());
        for p in &kept {
            let label = member(by_id[p.doc_id.as_str()]);
            if is_val.contains_key(p.doc_id.as_str()) {
                val.push((p.lcs_words as f64, label));
            } else {
                tst.push((p.doc_id.clone(), p.lcs_words as f64, label));
            }
        }
        let lcs_clf = add(&mut summary, "Prefix LCS".into(), val, tst)?;
        write_json(&loaded.out("classifier.json"), &lcs_clf)?;
    }

    if cfg.scorer.is_some() {
        ran = true;
        let scorer = loaded.scorer()?;
        let per_doc = parallel_map(ds.documents(), 4, |doc| mia_scores(doc, scorer.as_ref()));
        let mut all: Vec<MiaScore> = Vec::new();
        for r in per_doc {
            all.extend(r?);
        }
        write_jsonl(&loaded.out("baseline_mia.jsonl"), &all)?;
        let mut groups: Vec<(String, Vec<&MiaScore>)> = Vec::new();
        for s in &all {
            let name = match (s.method, s.k_percent) {
                (MiaMethod::Ppl, _) => "PPL".to_string(),
                (MiaMethod::PplCompression, _) => "PPL/zlib".to_string(),
                (MiaMethod::MinK, k) => format!("Min {}%", k.unwrap_or(0)),
            };
            match groups.iter_mut().find(|(n, _)| *n == name) {
                Some((_, v)) => v.push(s),
                None => groups.push((name, vec![s])),
            }
        }
        let by_id: HashMap<&str, &Document> = ds.documents().iter().map(|d| (d.id.as_str(), d)).collect();
        for (name, scores) in groups {
            let (mut val, mut tst) = (Vec::new(), Vec::new());
            for s in scores {
                let label = member(by_id[s.doc_id.as_str()]);
                if is_val.contains_key(s.doc_id.as_str()) {
                    val.push((s.score, label));
                } else {
                    tst.push((s.doc_id.clone(), s.score, label));
                }
            }
            add(&mut summary, name, val, tst)?;
        }
    }
    if !ran {
        bail!("baseline needs a [target] for prefix probing and/or a [scorer] for PPL and Min-K%");
    }

    write_json(&loaded.out("baseline_report.json"), &summary)?;
    let table = render_table(&summary.rows);
    std::fs::write(loaded.out("baseline_report.txt"), &table)?;
    print!("{table}");
    Ok(0)
}

fn cmd_contaminate(loaded: &Loaded, ds: &LabeledDataset) -> Result<u8> {
    let cfg = &loaded.cfg;
    let (clean, contaminated): (Vec<Document>, Vec<Document>) = if ds.has_labels() {
        info!("contaminating the stub with the documents labeled as members");
        ds.documents().iter().cloned().partition(|d| !d.label.is_some_and(|l| l.is_member()))
    } else {
        info!("dataset is unlabeled; contaminating a seeded half");
        let (keep, hold) = split_holdout(ds, 0.5, cfg.seed)?;
        (keep.into_documents(), hold.into_documents())
    };
    let Some(spec) = &cfg.target else { bail!("no [target] configured") };
    if !matches!(spec, ModelSpec::Stub { .. }) {
        bail!("contaminate needs a stub target (kind = \"stub\")");
    }
    let target = loaded.bare_stub(spec)?;
    let scorer = loaded.scorer()?;
    let cache = loaded.cache()?;
    let filters = loaded.filters(&[], &cache)?;
    let informative = match &cfg.informative {
        Some(s) => Some(loaded.completer(s, &[], &cache)?),
        None => None,
    };
    let setup = ContaminationSetup {
        scorer: scorer.as_ref(),
        target,
        filters: &filters,
        informative: informative.as_deref(),
        selection: cfg.selection.clone(),
        template: cfg.templates.probe,
        beta: cfg.beta,
    };
    let rep = run_contamination(&clean, &contaminated, setup)?;
    write_json(&loaded.out("contamination.json"), &rep)?;
    let table = render_contamination(&rep);
    std::fs::write(loaded.out("contamination.txt"), &table)?;
    print!("{table}");
    Ok(0)
}

const SAMPLE_CONFIG: &str = r#"dataset = "dataset.jsonl"
out_dir = "out"
seed = {seed}

[scorer]
kind = "ngram"
corpus = ["reference.jsonl"]
order = 3
alpha = 1e-4

[selection]
strategy = "prob"

[target]
kind = "stub"
name = "target"
corpus = ["reference.jsonl", "knowledge.jsonl"]
recall = 1.0
memorize_members = true

[[filters]]
template = "filter_guess"
model = { kind = "stub", name = "filter", corpus = ["reference.jsonl", "knowledge.jsonl"] }

[informative]
kind = "salient"
corpus = ["reference.jsonl"]
k = 3

[person]
gazetteer = "names.txt"

[templates]
probe = "contamination_slot"
prefix = "prefix_fiction"

[baseline]
prefix_words = 20
holdout_fraction = 0.2
"#;

fn cmd_synth(out: &Path, docs: usize, members: usize, seed: u64) -> Result<()> {
    if members > docs {
        bail!("--members ({members}) exceeds --docs ({docs})");
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let corpus = generate(&SynthConfig {
        n_docs: docs,
        n_members: members,
        seed,
        ..SynthConfig::default()
    })?;
    write_documents(corpus.dataset.documents(), &out.join("dataset.jsonl"))?;
    write_documents(&corpus.reference, &out.join("reference.jsonl"))?;
    write_documents(&corpus.knowledge, &out.join("knowledge.jsonl"))?;
    std::fs::write(out.join("names.txt"), corpus.names.join("\n") + "\n")?;
    std::fs::write(out.join("config.toml"), SAMPLE_CONFIG.replace("{seed}", &seed.to_string()))?;
    info!(
        "wrote {} documents ({members} members), {} reference and {} knowledge documents to {}",
        docs,
        corpus.reference.len(),
        corpus.knowledge.len(),
        out.display()
    );
    Ok(())
}
