//! Dataset manifest and binary task resolution.
//!
//! A manifest is a CSV file with the exact header `slide_id,bag_path,label`.
//! Labels are free text; a [`TaskSpec`] maps them onto the two classes of a
//! binary task.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "slide_id,bag_path,label";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub bag_path: PathBuf,
    pub raw_label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<SlideRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Bag paths are interpreted relative to `base` unless absolute.
    pub fn resolve_paths(mut self, base: &Path) -> Self {
        for record in &mut self.records {
            if record.bag_path.is_relative() {
                record.bag_path = base.join(&record.bag_path);
            }
        }
        self
    }
}

pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_str(&text)
}

pub fn parse_manifest_str(text: &str) -> Result<Manifest> {
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));

    match lines.next() {
        Some((_, header)) if header.trim_start_matches('\u{feff}') == MANIFEST_HEADER => {}
        Some((line, header)) => {
            return Err(Error::Manifest {
                line,
                message: format!("expected header {MANIFEST_HEADER:?}, found {header:?}"),
            })
        }
        None => unreachable!("split always yields at least one item"),
    }

    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line, row) in lines {
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Manifest { line, message: format!("expected 3 fields, found {}", fields.len()) });
        }
        let slide_id = fields[0].trim();
        let bag_path = fields[1].trim();
        let raw_label = fields[2].trim();
        if slide_id.is_empty() || bag_path.is_empty() || raw_label.is_empty() {
            return Err(Error::Manifest { line, message: "empty field".into() });
        }
        if seen.insert(slide_id.to_string(), line).is_some() {
            return Err(Error::DuplicateSlide { slide_id: slide_id.to_string(), line });
        }
        records.push(SlideRecord {
            slide_id: slide_id.to_string(),
            bag_path: PathBuf::from(bag_path),
            raw_label: raw_label.to_string(),
        });
    }
    Ok(Manifest { records })
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in &manifest.records {
        out.push_str(&format!("{},{},{}\n", r.slide_id, r.bag_path.display(), r.raw_label));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A binary task over raw manifest labels.
///
/// With `other_is_negative` set, any label outside `positive_labels` maps to
/// class 0 and `negative_labels` may be empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub positive_labels: BTreeSet<String>,
    #[serde(default)]
    pub negative_labels: BTreeSet<String>,
    #[serde(default)]
    pub other_is_negative: bool,
}

fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

impl TaskSpec {
    pub fn new<P, N>(name: &str, positive: P, negative: N) -> Result<Self>
    where
        P: IntoIterator,
        P::Item: AsRef<str>,
        N: IntoIterator,
        N::Item: AsRef<str>,
    {
        let task = TaskSpec {
            name: name.to_string(),
            positive_labels: positive.into_iter().map(|l| normalize_label(l.as_ref())).collect(),
            negative_labels: negative.into_iter().map(|l| normalize_label(l.as_ref())).collect(),
            other_is_negative: false,
        };
        task.validate()?;
        Ok(task)
    }

    /// Positive labels versus everything else.
    pub fn one_vs_rest<P>(name: &str, positive: P) -> Result<Self>
    where
        P: IntoIterator,
        P::Item: AsRef<str>,
    {
        let task = TaskSpec {
            name: name.to_string(),
            positive_labels: positive.into_iter().map(|l| normalize_label(l.as_ref())).collect(),
            negative_labels: BTreeSet::new(),
            other_is_negative: true,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive_labels.is_empty() {
            return Err(Error::invalid(format!("task {:?} has no positive labels", self.name)));
        }
        if self.negative_labels.is_empty() && !self.other_is_negative {
            return Err(Error::invalid(format!("task {:?} has no negative labels", self.name)));
        }
        let pos: BTreeSet<String> = self.positive_labels.iter().map(|l| normalize_label(l)).collect();
        let neg: BTreeSet<String> = self.negative_labels.iter().map(|l| normalize_label(l)).collect();
        if let Some(both) = pos.intersection(&neg).next() {
            return Err(Error::invalid(format!(
                "task {:?} lists label {both:?} as both positive and negative",
                self.name
            )));
        }
        Ok(())
    }

    /// Maps a raw label to its class, or `None` when the task does not cover it.
    pub fn classify(&self, raw_label: &str) -> Option<u8> {
        let label = normalize_label(raw_label);
        let hit = |set: &BTreeSet<String>| set.iter().any(|l| normalize_label(l) == label);
        if hit(&self.positive_labels) {
            Some(1)
        } else if hit(&self.negative_labels) || self.other_is_negative {
            Some(0)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabeledItem {
    pub slide_id: String,
    pub bag_path: PathBuf,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabeledDataset {
    pub items: Vec<LabeledItem>,
    pub task: TaskSpec,
}

impl LabeledDataset {
    pub fn labels(&self) -> Vec<u8> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.items.iter().filter(|i| i.label == 1).count();
        (self.items.len() - pos, pos)
    }
}

pub fn resolve_task(manifest: &Manifest, task: &TaskSpec) -> Result<LabeledDataset> {
    task.validate()?;
    let mut items = Vec::with_capacity(manifest.len());
    let mut unresolved = Vec::new();
    let mut unresolved_labels = BTreeSet::new();
    for record in &manifest.records {
        match task.classify(&record.raw_label) {
            Some(label) => {
                items.push(LabeledItem { slide_id: record.slide_id.clone(), bag_path: record.bag_path.clone(), label })
            }
            None => {
                unresolved.push(record.slide_id.clone());
                unresolved_labels.insert(record.raw_label.clone());
            }
        }
    }
    if !unresolved.is_empty() {
        return Err(Error::UnresolvedLabels {
            task: task.name.clone(),
            slide_ids: unresolved,
            labels: unresolved_labels.into_iter().collect(),
        });
    }
    let dataset = LabeledDataset { items, task: task.clone() };
    let (neg, pos) = dataset.class_counts();
    if neg == 0 || pos == 0 {
        return Err(Error::invalid(format!(
            "task {:?} needs both classes present, found {pos} positive and {neg} negative",
            task.name
        )));
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(rows: &[(&str, &str)]) -> Manifest {
        let mut text = format!("{MANIFEST_HEADER}\n");
        for (id, label) in rows {
            text.push_str(&format!("{id},{id}.fbag,{label}\n"));
        }
        parse_manifest_str(&text).unwrap()
    }

    #[test]
    fn parses_rows_in_order() {
        let m = parse_manifest_str("slide_id,bag_path,label\ns1,a.fbag,benign\ns2,b.fbag,malignant\n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[0].slide_id, "s1");
        assert_eq!(m.records[0].bag_path, PathBuf::from("a.fbag"));
        assert_eq!(m.records[1].raw_label, "malignant");
    }

    #[test]
    fn accepts_crlf() {
        let m = parse_manifest_str("slide_id,bag_path,label\r\ns1,a.fbag,benign\r\n").unwrap();
        assert_eq!(m.records[0].raw_label, "benign");
    }

    #[test]
    fn duplicate_id_reports_line() {
        let err = parse_manifest_str("slide_id,bag_path,label\ns1,a.fbag,benign\ns1,b.fbag,benign\n").unwrap_err();
        match err {
            Error::DuplicateSlide { slide_id, line } => {
                assert_eq!(slide_id, "s1");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_manifest_str("slide_id,bag_path,label\ns1,a.fbag,x\ns1,b,x")
            .unwrap_err()
            .to_string()
            .contains("\"s1\""));
    }

    #[test]
    fn wrong_column_count_reports_line() {
        let err = parse_manifest_str("slide_id,bag_path,label\ns1,a.fbag,benign\ns2,b.fbag\n").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 3, .. }), "{err:?}");
        let err = parse_manifest_str("id,path,label\n").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_manifest(Path::new("/nonexistent/manifest.csv")).unwrap_err();
        assert!(err.is_io());
    }

    #[test]
    fn large_manifest_keeps_every_row() {
        let rows: Vec<(String, &str)> =
            (0..646).map(|i| (format!("s{i}"), if i % 3 == 0 { "malignant" } else { "benign" })).collect();
        let refs: Vec<(&str, &str)> = rows.iter().map(|(a, b)| (a.as_str(), *b)).collect();
        assert_eq!(manifest(&refs).len(), 646);
    }

    #[test]
    fn binary_task_mapping() {
        let m = manifest(&[("a", "benign"), ("b", "malignant"), ("c", "benign")]);
        let task = TaskSpec::new("bm", ["malignant"], ["benign"]).unwrap();
        assert_eq!(resolve_task(&m, &task).unwrap().labels(), vec![0, 1, 0]);
    }

    #[test]
    fn catch_all_negative() {
        let m = manifest(&[("a", "benign"), ("b", "adenoid_cystic"), ("c", "mucoepidermoid")]);
        let task = TaskSpec::one_vs_rest("acc", ["adenoid_cystic"]).unwrap();
        assert_eq!(resolve_task(&m, &task).unwrap().labels(), vec![0, 1, 0]);
    }

    #[test]
    fn labels_are_case_and_space_insensitive() {
        let m = manifest(&[("a", " Benign"), ("b", "MALIGNANT ")]);
        let task = TaskSpec::new("bm", ["Malignant"], ["benign"]).unwrap();
        assert_eq!(resolve_task(&m, &task).unwrap().labels(), vec![0, 1]);
    }

    #[test]
    fn unresolved_label_names_slide_and_label() {
        let m = manifest(&[("a", "benign"), ("b", "unknown")]);
        let task = TaskSpec::new("bm", ["malignant"], ["benign"]).unwrap();
        match resolve_task(&m, &task).unwrap_err() {
            Error::UnresolvedLabels { slide_ids, labels, .. } => {
                assert_eq!(slide_ids, vec!["b"]);
                assert_eq!(labels, vec!["unknown"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overlapping_task_rejected() {
        assert!(TaskSpec::new("x", ["a"], ["A"]).is_err());
        assert!(TaskSpec::new("x", Vec::<&str>::new(), ["a"]).is_err());
    }

    #[test]
    fn resolve_is_pure() {
        let m = manifest(&[("a", "benign"), ("b", "malignant")]);
        let task = TaskSpec::new("bm", ["malignant"], ["benign"]).unwrap();
        let a = serde_json::to_string(&resolve_task(&m, &task).unwrap()).unwrap();
        let b = serde_json::to_string(&resolve_task(&m, &task).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
