use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::filename::parse_filename;
use crate::error::{Error, Result};

/// Directory under the dataset root holding `<subject>.<view>.bmp` files.
pub const IMAGE_DIR: &str = "US_Pictures";

/// Views per subject above which a warning is logged.
pub const MAX_VIEWS: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Appendicitis,
    NoAppendicitis,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Appendicitis => "appendicitis",
            Label::NoAppendicitis => "no_appendicitis",
        }
    }

    /// 1 for the positive class.
    pub fn target(self) -> u8 {
        match self {
            Label::Appendicitis => 1,
            Label::NoAppendicitis => 0,
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim() {
            "appendicitis" => Some(Label::Appendicitis),
            "no_appendicitis" => Some(Label::NoAppendicitis),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for Ratios {
    fn default() -> Self {
        Ratios {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

impl Ratios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

/// One ultrasound view.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub subject_id: u32,
    pub view_index: u32,
    /// Relative to the dataset root.
    pub path: String,
    pub split: Split,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: u32,
    pub split: Split,
    pub label: Label,
}

/// Subject-grouped, split-annotated sample list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub ratios: Ratios,
    pub subjects: Vec<SubjectEntry>,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    /// Builds a manifest from labelled images; records and subjects come out
    /// sorted by id.
    pub fn from_images(images: &[(u32, u32, String)], labels: &BTreeMap<u32, Label>, ratios: Ratios, seed: u64) -> Result<Self> {
        let mut views: BTreeMap<u32, usize> = BTreeMap::new();
        for &(s, _, _) in images {
            *views.entry(s).or_default() += 1;
        }
        let unlabeled: Vec<u32> = views.keys().copied().filter(|s| !labels.contains_key(s)).collect();
        if !unlabeled.is_empty() {
            return Err(Error::UnlabeledSubjects(unlabeled));
        }
        for (&s, &n) in &views {
            if n > MAX_VIEWS {
                log::warn!("subject {s} has {n} views (more than {MAX_VIEWS})");
            }
        }
        let subjects: Vec<(u32, Label)> = views.keys().map(|&s| (s, labels[&s])).collect();
        let assignment = assign_subjects(&subjects, ratios, seed)?;

        let mut records: Vec<SampleRecord> = images
            .iter()
            .map(|(s, v, path)| SampleRecord {
                subject_id: *s,
                view_index: *v,
                path: path.clone(),
                split: assignment[s],
                label: labels[s],
            })
            .collect();
        records.sort_by(|a, b| (a.subject_id, a.view_index, &a.path).cmp(&(b.subject_id, b.view_index, &b.path)));
        let subjects = subjects
            .into_iter()
            .map(|(subject_id, label)| SubjectEntry {
                subject_id,
                split: assignment[&subject_id],
                label,
            })
            .collect();
        Ok(DatasetManifest {
            seed,
            ratios,
            subjects,
            records,
        })
    }

    pub fn assignment(&self) -> BTreeMap<u32, Split> {
        self.subjects.iter().map(|s| (s.subject_id, s.split)).collect()
    }

    pub fn records_in(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Per-class subject counts `(train, validation, test)` for `n` subjects.
pub fn split_counts(n: usize, ratios: Ratios) -> (usize, usize, usize) {
    let test = ((n as f64 * ratios.test).round() as usize).min(n);
    let validation = ((n as f64 * ratios.validation).round() as usize).min(n - test);
    (n - test - validation, validation, test)
}

/// Stratified subject-level assignment: within each class the subjects are
/// shuffled by `seed` and dealt out as test, then validation, then train.
pub fn assign_subjects(subjects: &[(u32, Label)], ratios: Ratios, seed: u64) -> Result<BTreeMap<u32, Split>> {
    ratios.validate()?;
    let mut by_class: BTreeMap<Label, BTreeSet<u32>> = BTreeMap::new();
    for &(s, l) in subjects {
        by_class.entry(l).or_default().insert(s);
    }
    for label in [Label::Appendicitis, Label::NoAppendicitis] {
        if by_class.get(&label).is_none_or(|s| s.is_empty()) {
            return Err(Error::Stratification(format!("no subjects labelled {label}")));
        }
    }
    let mut out = BTreeMap::new();
    for (label, ids) in by_class {
        let mut ids: Vec<u32> = ids.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (label.target() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        ids.shuffle(&mut rng);
        let (_, validation, test) = split_counts(ids.len(), ratios);
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < test {
                Split::Test
            } else if i < test + validation {
                Split::Validation
            } else {
                Split::Train
            };
            out.insert(id, split);
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct LabelRow {
    subject_id: u32,
    diagnosis: String,
}

/// Reads a `subject_id,diagnosis` CSV.
pub fn read_labels(path: &Path) -> Result<BTreeMap<u32, Label>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let label = Label::parse(&row.diagnosis).ok_or_else(|| {
            Error::Labels(format!(
                "{}: subject {} has diagnosis `{}`",
                path.display(),
                row.subject_id,
                row.diagnosis
            ))
        })?;
        if let Some(prev) = out.insert(row.subject_id, label) {
            if prev != label {
                return Err(Error::Labels(format!(
                    "{}: subject {} listed as both {prev} and {label}",
                    path.display(),
                    row.subject_id
                )));
            }
        }
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Labels(format!("{}: {other:?}", path.display())),
    }
}

/// Lists `<subject>.<view>.bmp` files under `<root>/US_Pictures`, with paths
/// relative to `root`. Other `.bmp` names are skipped with a warning.
pub fn scan_images(root: &Path) -> Result<Vec<(u32, u32, String)>> {
    let dir = root.join(IMAGE_DIR);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else {
            continue;
        };
        if !name.to_ascii_lowercase().ends_with(".bmp") {
            continue;
        }
        match parse_filename(name) {
            Ok((s, v)) => out.push((s, v, format!("{IMAGE_DIR}/{name}"))),
            Err(e) => log::warn!("skipping {}: {e}", entry.path().display()),
        }
    }
    out.sort();
    Ok(out)
}

/// Scans the dataset, joins labels and assigns splits.
pub fn build_manifest(root: &Path, labels_csv: &Path, ratios: Ratios, seed: u64) -> Result<DatasetManifest> {
    let labels = read_labels(labels_csv)?;
    let images = scan_images(root)?;
    DatasetManifest::from_images(&images, &labels, ratios, seed)
}

/// Resolves a record's path against the dataset root.
pub fn resolve(root: &Path, record: &SampleRecord) -> PathBuf {
    root.join(&record.path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subjects(pos: u32, neg: u32) -> Vec<(u32, Label)> {
        (0..pos)
            .map(|i| (i, Label::Appendicitis))
            .chain((pos..pos + neg).map(|i| (i, Label::NoAppendicitis)))
            .collect()
    }

    #[test]
    fn ten_subjects_eighty_twenty() {
        let r = Ratios {
            train: 0.8,
            validation: 0.0,
            test: 0.2,
        };
        let a = assign_subjects(&subjects(5, 5), r, 3).unwrap();
        let test: Vec<u32> = a.iter().filter(|(_, s)| **s == Split::Test).map(|(i, _)| *i).collect();
        assert_eq!(test.len(), 2);
        assert_eq!(test.iter().filter(|&&i| i < 5).count(), 1);
        assert_eq!(a.values().filter(|s| **s == Split::Train).count(), 8);
    }

    #[test]
    fn counts_follow_rounding() {
        let r = Ratios::default();
        assert_eq!(split_counts(30, r), (21, 3, 6));
        assert_eq!(split_counts(70, r), (49, 7, 14));
        assert_eq!(split_counts(1, r), (1, 0, 0));
        assert_eq!(split_counts(3, r), (2, 0, 1));
        let heavy = Ratios {
            train: 0.0,
            validation: 0.5,
            test: 0.5,
        };
        assert_eq!(split_counts(3, heavy), (0, 1, 2));
    }

    #[test]
    fn empty_class_is_rejected() {
        assert!(matches!(
            assign_subjects(&subjects(4, 0), Ratios::default(), 0),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn bad_ratios_rejected() {
        let r = Ratios {
            train: 0.5,
            validation: 0.1,
            test: 0.2,
        };
        assert!(matches!(assign_subjects(&subjects(2, 2), r, 0), Err(Error::Config(_))));
    }

    #[test]
    fn views_share_their_subject_split() {
        let mut images = Vec::new();
        for s in 0..10u32 {
            let n = if s == 4 { 15 } else { 2 };
            for v in 1..=n {
                images.push((s, v, format!("{IMAGE_DIR}/{s}.{v}.bmp")));
            }
        }
        let labels: BTreeMap<u32, Label> = subjects(5, 5).into_iter().collect();
        let m = DatasetManifest::from_images(&images, &labels, Ratios::default(), 11).unwrap();
        let a = m.assignment();
        assert_eq!(m.records.iter().filter(|r| r.subject_id == 4).count(), 15);
        for r in &m.records {
            assert_eq!(r.split, a[&r.subject_id]);
        }
    }

    #[test]
    fn unlabeled_subjects_listed() {
        let images = vec![
            (1, 1, "a".to_string()),
            (7, 1, "b".to_string()),
            (9, 2, "c".to_string()),
        ];
        let labels: BTreeMap<u32, Label> = [(1, Label::Appendicitis)].into_iter().collect();
        match DatasetManifest::from_images(&images, &labels, Ratios::default(), 0) {
            Err(Error::UnlabeledSubjects(ids)) => assert_eq!(ids, vec![7, 9]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn labels_csv_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        std::fs::write(&p, "subject_id,diagnosis\n1,appendicitis\n2, no_appendicitis\n1,appendicitis\n").unwrap();
        let l = read_labels(&p).unwrap();
        assert_eq!(l[&1], Label::Appendicitis);
        assert_eq!(l[&2], Label::NoAppendicitis);

        std::fs::write(&p, "subject_id,diagnosis\n1,appendicitis\n1,no_appendicitis\n").unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Labels(_))));
        std::fs::write(&p, "subject_id,diagnosis\n1,maybe\n").unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Labels(_))));
        std::fs::write(&p, "subject_id,diagnosis\nx,appendicitis\n").unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Labels(_))));
        assert!(matches!(read_labels(&dir.path().join("none.csv")), Err(Error::Io { .. })));
    }

    #[test]
    fn json_schema_field_names() {
        let images = vec![(1, 1, "US_Pictures/1.1.bmp".to_string()), (2, 1, "US_Pictures/2.1.bmp".to_string())];
        let labels: BTreeMap<u32, Label> = subjects(1, 1).into_iter().map(|(s, l)| (s + 1, l)).collect();
        let m = DatasetManifest::from_images(&images, &labels, Ratios::default(), 4).unwrap();
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["seed"], 4);
        assert_eq!(v["ratios"]["validation"], 0.1);
        assert_eq!(v["subjects"][0]["label"], "appendicitis");
        let rec = &v["records"][1];
        for key in ["subject_id", "view_index", "path", "split", "label"] {
            assert!(rec.get(key).is_some(), "{key}");
        }
        assert_eq!(rec["label"], "no_appendicitis");
        let back: DatasetManifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }
}
