//! Labeled text datasets: JSONL ingestion, serialization and seeded holdout splits.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("duplicate document id {id:?} (line {line})")]
    DuplicateId { id: String, line: usize },
    #[error("holdout fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("dataset has {0} documents; at least 2 are required to split")]
    TooSmall(usize),
    #[error("document {0:?} has empty text")]
    EmptyText(String),
}

/// Membership flag: `1` for training members, `0` for non-members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    NonMember,
    Member,
}

impl Label {
    pub fn is_member(self) -> bool {
        matches!(self, Label::Member)
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::NonMember),
            1 => Ok(Label::Member),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::NonMember => 0,
            Label::Member => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            label: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }
}

/// Per-class document counts of a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub members: usize,
    pub non_members: usize,
    pub unlabeled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    documents: Vec<Document>,
}

impl LabeledDataset {
    /// Builds a dataset, enforcing unique ids and non-empty text.
    pub fn new(name: impl Into<String>, documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, doc) in documents.iter().enumerate() {
            if doc.text.trim().is_empty() {
                return Err(CorpusError::EmptyText(doc.id.clone()));
            }
            if !seen.insert(doc.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    id: doc.id.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(LabeledDataset {
            name: name.into(),
            documents,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    pub fn class_counts(&self) -> ClassCounts {
        let mut counts = ClassCounts::default();
        for doc in &self.documents {
            match doc.label {
                Some(Label::Member) => counts.members += 1,
                Some(Label::NonMember) => counts.non_members += 1,
                None => counts.unlabeled += 1,
            }
        }
        counts
    }

    pub fn has_labels(&self) -> bool {
        self.documents.iter().any(|d| d.label.is_some())
    }

    pub fn into_documents(self) -> Vec<Document> {
        self.documents
    }
}

/// Reads a JSONL dataset. Every non-blank line must be a valid record;
/// the first malformed line aborts the load with its line number.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut documents = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        if doc.text.trim().is_empty() {
            return Err(CorpusError::Schema {
                line: line_no,
                message: format!("document {:?} has empty text", doc.id),
            });
        }
        if !seen.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateId {
                id: doc.id,
                line: line_no,
            });
        }
        documents.push(doc);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(LabeledDataset { name, documents })
}

pub fn write_dataset(ds: &LabeledDataset, path: &Path) -> Result<(), CorpusError> {
    write_documents(ds.documents(), path)
}

pub fn write_documents(docs: &[Document], path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for doc in docs {
        let line = serde_json::to_string(doc).expect("document serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Seeded partition into `(kept, holdout)`.
///
/// Labeled documents are split per class so that each class contributes
/// `round(fraction * class_size)` documents to the holdout; both halves keep
/// the input order.
pub fn split_holdout(
    ds: &LabeledDataset,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), CorpusError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(CorpusError::BadFraction(holdout_fraction));
    }
    if ds.len() < 2 {
        return Err(CorpusError::TooSmall(ds.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_holdout = vec![false; ds.len()];
    for class in [Some(Label::Member), Some(Label::NonMember), None] {
        let mut idx: Vec<usize> = ds
            .documents
            .iter()
            .enumerate()
            .filter(|(_, d)| d.label == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        let take = (holdout_fraction * idx.len() as f64).round() as usize;
        for &i in idx.iter().take(take) {
            in_holdout[i] = true;
        }
    }

    // Never leave either half empty.
    if in_holdout.iter().all(|&h| !h) {
        in_holdout[0] = true;
    } else if in_holdout.iter().all(|&h| h) {
        in_holdout[0] = false;
    }

    let (mut kept, mut held) = (Vec::new(), Vec::new());
    for (doc, h) in ds.documents.iter().zip(in_holdout) {
        if h {
            held.push(doc.clone());
        } else {
            kept.push(doc.clone());
        }
    }
    Ok((
        LabeledDataset {
            name: format!("{}-train", ds.name),
            documents: kept,
        },
        LabeledDataset {
            name: format!("{}-holdout", ds.name),
            documents: held,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn labeled(n: usize) -> LabeledDataset {
        let docs = (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Member } else { Label::NonMember };
                Document::new(format!("d{i}"), format!("text {i}")).with_label(label)
            })
            .collect();
        LabeledDataset::new("t", docs).unwrap()
    }

    #[test]
    fn loads_three_lines_in_order() {
        let f = write_tmp(
            "{\"id\":\"a\",\"text\":\"one\"}\n{\"id\":\"b\",\"text\":\"two\",\"label\":1}\n{\"id\":\"c\",\"text\":\"three\",\"label\":0,\"meta\":{\"title\":\"x\"}}\n",
        );
        let ds = load_dataset(f.path()).unwrap();
        assert_eq!(ds.len(), 3);
        let ids: Vec<_> = ds.documents().iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(ds.documents()[1].label, Some(Label::Member));
        assert_eq!(
            ds.class_counts(),
            ClassCounts {
                members: 1,
                non_members: 1,
                unlabeled: 1
            }
        );
    }

    #[test]
    fn missing_text_names_the_line() {
        let f = write_tmp("{\"id\":\"a\",\"text\":\"one\"}\n{\"id\":\"b\"}\n");
        match load_dataset(f.path()) {
            Err(CorpusError::Schema { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("text"), "{message}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let f = write_tmp("{\"id\":\"a\",\"text\":\"one\"}\n{\"id\":\"a\",\"text\":\"two\"}\n");
        assert!(matches!(
            load_dataset(f.path()),
            Err(CorpusError::DuplicateId { ref id, line: 2 }) if id == "a"
        ));
    }

    #[test]
    fn bad_label_and_blank_text_are_rejected() {
        let f = write_tmp("{\"id\":\"a\",\"text\":\"one\",\"label\":2}\n");
        assert!(matches!(load_dataset(f.path()), Err(CorpusError::Schema { line: 1, .. })));
        let f = write_tmp("{\"id\":\"a\",\"text\":\"   \"}\n");
        assert!(matches!(load_dataset(f.path()), Err(CorpusError::Schema { line: 1, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_dataset(Path::new("/nonexistent/data.jsonl")),
            Err(CorpusError::Io { .. })
        ));
    }

    #[test]
    fn split_ten_by_point_two() {
        let ds = labeled(10);
        let (a, b) = split_holdout(&ds, 0.2, 7).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut all: Vec<_> = a.documents().iter().chain(b.documents()).map(|d| d.id.clone()).collect();
        all.sort();
        let mut expect: Vec<_> = ds.documents().iter().map(|d| d.id.clone()).collect();
        expect.sort();
        assert_eq!(all, expect);

        let (a2, b2) = split_holdout(&ds, 0.2, 7).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn split_mirrors_validation_carve_out() {
        // 1870 held out of 9870, as with the BookMIA validation set.
        let ds = labeled(9870);
        let (test, val) = split_holdout(&ds, 1870.0 / 9870.0, 1).unwrap();
        assert_eq!(val.len(), 1870);
        assert_eq!(test.len(), 8000);
        let c = val.class_counts();
        assert!(c.members.abs_diff(935) <= 1 && c.non_members.abs_diff(935) <= 1);
    }

    #[test]
    fn split_rejects_bad_input() {
        let ds = labeled(10);
        assert!(matches!(split_holdout(&ds, 0.0, 1), Err(CorpusError::BadFraction(_))));
        assert!(matches!(split_holdout(&ds, 1.0, 1), Err(CorpusError::BadFraction(_))));
        assert!(matches!(split_holdout(&labeled(1), 0.5, 1), Err(CorpusError::TooSmall(1))));
    }

    #[test]
    fn round_trip_is_stable() {
        let ds = labeled(5);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_dataset(&ds, f.path()).unwrap();
        let back = load_dataset(f.path()).unwrap();
        assert_eq!(back.documents(), ds.documents());
    }
}
