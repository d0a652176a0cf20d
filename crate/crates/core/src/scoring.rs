//! Reconstruction tallies, memorization verdicts, exact-match rates and
//! precision/recall/F-beta reports. All rates are percentages in [0, 100].

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("no outcomes to rate")]
    Empty,
    #[error("no label for document {0:?}")]
    MissingLabel(String),
    #[error("percentage out of range: {0}")]
    OutOfRange(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocVerdict {
    pub doc_id: String,
    pub n_probes: usize,
    pub n_matches: usize,
    pub memorized: bool,
    /// Fewer probes than the verdict needs; counted as a negative.
    pub abstained: bool,
}

/// A document is memorized when at least `min_matches` probes were reconstructed.
pub fn verdict(doc_id: &str, outcomes: &[bool], min_matches: usize) -> DocVerdict {
    assert!(min_matches >= 1, "min_matches must be at least 1");
    let n_matches = outcomes.iter().filter(|&&m| m).count();
    DocVerdict {
        doc_id: doc_id.to_string(),
        n_probes: outcomes.len(),
        n_matches,
        memorized: n_matches >= min_matches,
        abstained: outcomes.len() < min_matches,
    }
}

/// `(1 + b^2) P R / (b^2 P + R)`, with 0 when both P and R are 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        return 0.0;
    }
    (1.0 + b2) * precision * recall / denom
}

pub fn exact_match_rate(outcomes: &[bool]) -> Result<f64, ScoringError> {
    if outcomes.is_empty() {
        return Err(ScoringError::Empty);
    }
    Ok(100.0 * outcomes.iter().filter(|&&m| m).count() as f64 / outcomes.len() as f64)
}

/// EM on contaminated data minus EM on clean data.
pub fn delta_em(em_contaminated: f64, em_clean: f64) -> Result<f64, ScoringError> {
    for v in [em_contaminated, em_clean] {
        if !(0.0..=100.0).contains(&v) {
            return Err(ScoringError::OutOfRange(v));
        }
    }
    // Table-style inputs carry a few decimals; drop binary subtraction noise.
    Ok(((em_contaminated - em_clean) * 1e9).round() / 1e9)
}

/// Rounds to one decimal place, as reported.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    pub beta: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// Share of documents flagged as memorized.
    pub em_rate: f64,
    pub n_abstained: usize,
}

/// Confusion counts with "memorized" as the positive class.
pub fn evaluate(
    verdicts: &[DocVerdict],
    labels: &HashMap<String, Label>,
    beta: f64,
) -> Result<MetricsReport, ScoringError> {
    let (mut tp, mut fp, mut fn_, mut tn, mut abstained) = (0, 0, 0, 0, 0);
    for v in verdicts {
        let label = labels
            .get(&v.doc_id)
            .ok_or_else(|| ScoringError::MissingLabel(v.doc_id.clone()))?;
        match (v.memorized, label.is_member()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
        if v.abstained {
            abstained += 1;
        }
    }
    let precision = if tp + fp > 0 { 100.0 * tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { 100.0 * tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let em_rate = if verdicts.is_empty() {
        0.0
    } else {
        100.0 * (tp + fp) as f64 / verdicts.len() as f64
    };
    Ok(MetricsReport {
        precision,
        recall,
        f_beta: f_beta(precision, recall, beta),
        beta,
        tp,
        fp,
        fn_,
        tn,
        em_rate,
        n_abstained: abstained,
    })
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub probe: String,
    pub token_type: String,
    pub metrics: MetricsReport,
}

/// Aligned text table with Probe, Token Type, P, R and F columns.
pub fn render_table(rows: &[ReportRow]) -> String {
    let beta = rows.first().map_or(0.1, |r| r.metrics.beta);
    let header = ["Probe".to_string(), "Token Type".to_string(), "P".into(), "R".into(), format!("F(b={beta})")];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.probe.clone(),
                r.token_type.clone(),
                format!("{:.1}", r.metrics.precision),
                format!("{:.1}", r.metrics.recall),
                format!("{:.1}", r.metrics.f_beta),
            ]
        })
        .collect();
    let mut widths = header.clone().map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String; 5]| {
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i < 2 {
                let _ = write!(out, "{cell:<w$}");
            } else {
                let _ = write!(out, "{cell:>w$}");
            }
            if i < 4 {
                out.push_str("  ");
            }
        }
        out.push('\n');
    };
    line(&mut out, &header);
    let total: usize = widths.iter().sum::<usize>() + 8;
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for row in &body {
        line(&mut out, row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_rule() {
        let mut two_of_ten = vec![false; 10];
        two_of_ten[0] = true;
        two_of_ten[1] = true;
        assert!(verdict("d", &two_of_ten, 2).memorized);
        let v = verdict("d", &[true, false, false], 2);
        assert!(!v.memorized && !v.abstained);
        let v = verdict("d", &[true], 2);
        assert!(!v.memorized && v.abstained);
        assert_eq!((v.n_probes, v.n_matches), (1, 1));
    }

    #[test]
    fn f_beta_table_values() {
        assert!((f_beta(83.1, 47.2, 0.1) - 82.5).abs() < 0.05);
        assert!((f_beta(96.5, 9.7, 0.1) - 88.6).abs() < 0.05);
        assert_eq!(f_beta(0.0, 0.0, 0.1), 0.0);
        for x in [0.5, 33.3, 100.0] {
            for b in [0.1, 1.0, 3.0] {
                assert!((f_beta(x, x, b) - x).abs() < 1e-9);
            }
        }
        // harmonic mean at beta = 1
        assert!((f_beta(60.0, 40.0, 1.0) - 48.0).abs() < 1e-9);
    }

    #[test]
    fn em_and_delta() {
        let mut outcomes = vec![true; 401];
        outcomes.extend(vec![false; 47]);
        assert_eq!((exact_match_rate(&outcomes).unwrap() * 100.0).round() / 100.0, 89.51);
        assert_eq!(exact_match_rate(&[false; 5]).unwrap(), 0.0);
        assert_eq!(exact_match_rate(&[]), Err(ScoringError::Empty));
        assert_eq!(delta_em(89.51, 16.96).unwrap(), 72.55);
        assert_eq!(delta_em(84.82, 6.59).unwrap(), 78.23);
        assert_eq!(delta_em(42.0, 42.0).unwrap(), 0.0);
        assert!(delta_em(101.0, 0.0).is_err());
    }

    #[test]
    fn evaluate_counts() {
        let labels: HashMap<String, Label> = [
            ("a", Label::Member),
            ("b", Label::Member),
            ("c", Label::NonMember),
            ("d", Label::NonMember),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let vs = vec![
            verdict("a", &[true, true], 2),
            verdict("b", &[true], 2),
            verdict("c", &[true, true, true], 2),
            verdict("d", &[false, false], 2),
        ];
        let r = evaluate(&vs, &labels, 0.1).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn, r.n_abstained), (1, 1, 1, 1, 1));
        assert_eq!((r.precision, r.recall), (50.0, 50.0));
        assert_eq!(r.em_rate, 50.0);

        let missing = vec![verdict("zz", &[true], 1)];
        assert_eq!(evaluate(&missing, &labels, 0.1), Err(ScoringError::MissingLabel("zz".into())));
    }

    #[test]
    fn table_renders_aligned() {
        let labels: HashMap<String, Label> = [("a".to_string(), Label::Member)].into_iter().collect();
        let m = evaluate(&[verdict("a", &[true, true], 2)], &labels, 0.1).unwrap();
        let t = render_table(&[ReportRow {
            probe: "Surprisal".into(),
            token_type: "Prob".into(),
            metrics: m,
        }]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("Probe"));
        assert!(lines[2].contains("100.0"));
        assert_eq!(lines[0].len(), lines[2].len());
    }
}
