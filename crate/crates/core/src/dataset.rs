//! Benchmark ingestion: manifests, line-delimited annotation files, and label
//! normalization into a single binary record schema.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("malformed annotation at line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("unknown raw label {0:?}")]
    UnknownLabel(String),
    #[error("duplicate meme id {id:?} in {dataset}/{split}")]
    DuplicateId {
        id: String,
        dataset: DatasetKind,
        split: Split,
    },
    #[error("image for meme {id:?} is unreadable: {path}")]
    MissingImage { id: String, path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "FHM")]
    Fhm,
    #[serde(rename = "HarMeme")]
    HarMeme,
    #[serde(rename = "MAMI")]
    Mami,
    #[serde(rename = "SYNTHETIC")]
    Synthetic,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Fhm => "FHM",
            DatasetKind::HarMeme => "HarMeme",
            DatasetKind::Mami => "MAMI",
            DatasetKind::Synthetic => "SYNTHETIC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Binary label: 0 = non-hateful/harmless, 1 = hateful/harmful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    NonHateful,
    Hateful,
}

impl Label {
    pub fn as_index(self) -> usize {
        match self {
            Label::NonHateful => 0,
            Label::Hateful => 1,
        }
    }

    pub fn from_index(index: usize) -> Self {
        if index == 0 {
            Label::NonHateful
        } else {
            Label::Hateful
        }
    }

    /// Canonical string form accepted back by [`merge_harm_labels`].
    pub fn canonical_str(self) -> &'static str {
        match self {
            Label::NonHateful => "harmless",
            Label::Hateful => "harmful",
        }
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        label.as_index() as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            0 => Ok(Label::NonHateful),
            1 => Ok(Label::Hateful),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemeRecord {
    pub id: String,
    pub image_ref: PathBuf,
    pub overlay_text: String,
    pub label: Label,
    pub split: Split,
    pub dataset: DatasetKind,
}

/// The parts of a meme needed for inference; live submissions carry no label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemeInput {
    pub id: String,
    pub image_ref: PathBuf,
    pub overlay_text: String,
}

impl From<&MemeRecord> for MemeInput {
    fn from(record: &MemeRecord) -> Self {
        Self {
            id: record.id.clone(),
            image_ref: record.image_ref.clone(),
            overlay_text: record.overlay_text.clone(),
        }
    }
}

/// Per-dataset field names inside an annotation line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldAdapter {
    pub id: String,
    pub image: String,
    pub text: String,
    pub label: String,
}

impl Default for FieldAdapter {
    fn default() -> Self {
        Self {
            id: "id".into(),
            image: "img".into(),
            text: "text".into(),
            label: "label".into(),
        }
    }
}

impl FieldAdapter {
    pub fn for_dataset(dataset: DatasetKind) -> Self {
        match dataset {
            DatasetKind::HarMeme => Self {
                image: "image".into(),
                label: "labels".into(),
                ..Self::default()
            },
            DatasetKind::Mami => Self {
                id: "file_name".into(),
                image: "file_name".into(),
                text: "Text Transcription".into(),
                label: "misogynous".into(),
            },
            DatasetKind::Fhm | DatasetKind::Synthetic => Self::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: DatasetKind,
    pub split: Split,
    pub root_dir: PathBuf,
    pub annotation_file: PathBuf,
    pub image_dir: PathBuf,
    /// Raw label string to binary label. Empty means the dataset default.
    #[serde(default)]
    pub label_mapping: BTreeMap<String, u8>,
    #[serde(default)]
    pub adapter: Option<FieldAdapter>,
    /// Upgrade missing images from collected errors to a hard failure.
    #[serde(default)]
    pub strict: bool,
}

impl DatasetManifest {
    pub fn from_toml_file(path: &Path) -> Result<Self, DatasetError> {
        let raw = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest: DatasetManifest =
            toml::from_str(&raw).map_err(|e| DatasetError::Manifest {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        if manifest.root_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            manifest.root_dir = base.join(&manifest.root_dir);
        }
        Ok(manifest)
    }

    pub fn annotation_path(&self) -> PathBuf {
        self.root_dir.join(&self.annotation_file)
    }

    pub fn image_path(&self, image: &str) -> PathBuf {
        self.root_dir.join(&self.image_dir).join(image)
    }

    fn adapter(&self) -> FieldAdapter {
        self.adapter
            .clone()
            .unwrap_or_else(|| FieldAdapter::for_dataset(self.dataset))
    }

    fn map_label(&self, raw: &str) -> Result<Label, DatasetError> {
        if self.label_mapping.is_empty() {
            return default_label(self.dataset, raw);
        }
        match self.label_mapping.get(raw) {
            Some(v) => Label::try_from(*v).map_err(|_| DatasetError::UnknownLabel(raw.to_string())),
            None => Err(DatasetError::UnknownLabel(raw.to_string())),
        }
    }
}

/// Collapses HarMeme's three-way harm annotation into the binary task:
/// both harmful grades become 1. Already-binary strings pass through.
pub fn merge_harm_labels(raw_label: &str) -> Result<Label, DatasetError> {
    match raw_label.trim().to_ascii_lowercase().as_str() {
        "harmless" | "0" => Ok(Label::NonHateful),
        "partially harmful" | "very harmful" | "harmful" | "1" => Ok(Label::Hateful),
        _ => Err(DatasetError::UnknownLabel(raw_label.to_string())),
    }
}

fn default_label(dataset: DatasetKind, raw: &str) -> Result<Label, DatasetError> {
    match dataset {
        DatasetKind::HarMeme => merge_harm_labels(raw),
        // MAMI's "misogynous" flag is the positive class.
        DatasetKind::Fhm | DatasetKind::Mami | DatasetKind::Synthetic => match raw.trim() {
            "0" | "false" => Ok(Label::NonHateful),
            "1" | "true" => Ok(Label::Hateful),
            _ => Err(DatasetError::UnknownLabel(raw.to_string())),
        },
    }
}

fn raw_label_string(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        // HarMeme stores a list whose first entry is the harm grade.
        Value::Array(items) => items.first().and_then(raw_label_string),
        _ => None,
    }
}

fn field_string(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

#[derive(Debug, Default)]
pub struct LoadOutcome {
    pub records: Vec<MemeRecord>,
    /// Record-level rejections (missing or unreadable images).
    pub errors: Vec<DatasetError>,
}

/// Loads every annotation line of a manifest, in file order.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<LoadOutcome, DatasetError> {
    let path = manifest.annotation_path();
    let file = File::open(&path).map_err(|source| DatasetError::Io {
        path: path.clone(),
        source,
    })?;
    let adapter = manifest.adapter();
    let mut outcome = LoadOutcome::default();
    let mut seen = HashSet::new();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| DatasetError::MalformedLine {
            line: line_no,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let get = |key: &str| {
            value
                .get(key)
                .ok_or_else(|| malformed(format!("missing field {key:?}")))
        };

        let id = field_string(get(&adapter.id)?)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| malformed("id must be a non-empty string".into()))?;
        let image = field_string(get(&adapter.image)?)
            .ok_or_else(|| malformed("image must be a string".into()))?;
        let overlay_text = match value.get(&adapter.text) {
            None | Some(Value::Null) => String::new(),
            Some(v) => field_string(v).ok_or_else(|| malformed("text must be a string".into()))?,
        };
        let raw = raw_label_string(get(&adapter.label)?)
            .ok_or_else(|| malformed("label has an unsupported type".into()))?;
        let label = manifest.map_label(&raw)?;

        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId {
                id,
                dataset: manifest.dataset,
                split: manifest.split,
            });
        }

        let image_ref = manifest.image_path(&image);
        if File::open(&image_ref).is_err() {
            let err = DatasetError::MissingImage {
                id: id.clone(),
                path: image_ref,
            };
            if manifest.strict {
                return Err(err);
            }
            log::warn!("{err}");
            outcome.errors.push(err);
            continue;
        }

        outcome.records.push(MemeRecord {
            id,
            image_ref,
            overlay_text,
            label,
            split: manifest.split,
            dataset: manifest.dataset,
        });
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub dataset: DatasetKind,
    pub split: Split,
    pub n_hateful: usize,
    pub n_non_hateful: usize,
}

impl SplitStats {
    pub fn total(&self) -> usize {
        self.n_hateful + self.n_non_hateful
    }
}

/// One entry per (dataset, split) present, sorted by dataset then split.
pub fn compute_split_stats(records: &[MemeRecord]) -> Vec<SplitStats> {
    let mut counts: BTreeMap<(DatasetKind, Split), (usize, usize)> = BTreeMap::new();
    for record in records {
        let entry = counts.entry((record.dataset, record.split)).or_default();
        match record.label {
            Label::Hateful => entry.0 += 1,
            Label::NonHateful => entry.1 += 1,
        }
    }
    counts
        .into_iter()
        .map(|((dataset, split), (n_hateful, n_non_hateful))| SplitStats {
            dataset,
            split,
            n_hateful,
            n_non_hateful,
        })
        .collect()
}

/// Published split sizes of the three public benchmarks.
pub const PUBLISHED_SPLIT_STATS: [SplitStats; 6] = [
    SplitStats { dataset: DatasetKind::Fhm, split: Split::Train, n_hateful: 3007, n_non_hateful: 5493 },
    SplitStats { dataset: DatasetKind::Fhm, split: Split::Test, n_hateful: 246, n_non_hateful: 254 },
    SplitStats { dataset: DatasetKind::HarMeme, split: Split::Train, n_hateful: 1064, n_non_hateful: 1949 },
    SplitStats { dataset: DatasetKind::HarMeme, split: Split::Test, n_hateful: 124, n_non_hateful: 230 },
    SplitStats { dataset: DatasetKind::Mami, split: Split::Train, n_hateful: 5004, n_non_hateful: 4996 },
    SplitStats { dataset: DatasetKind::Mami, split: Split::Test, n_hateful: 500, n_non_hateful: 500 },
];

pub fn published_stats(dataset: DatasetKind, split: Split) -> Option<SplitStats> {
    PUBLISHED_SPLIT_STATS
        .iter()
        .copied()
        .find(|s| s.dataset == dataset && s.split == split)
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<MemeRecord>, DatasetError> {
    crate::jsonl::read(path).map_err(|e| match e {
        crate::jsonl::JsonlError::Io(source) => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        crate::jsonl::JsonlError::Parse { line, source } => DatasetError::MalformedLine {
            line,
            message: source.to_string(),
        },
    })
}
