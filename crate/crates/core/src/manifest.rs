//! Dataset manifest: one tab-separated file listing every sequence with its
//! metadata, ground truth (when known), current training label and split.
//!
//! ```text
//! # gaitgender-manifest v1
//! # seed=42
//! sequence_id  pose_path  subject_id  view_angle_deg  variation  truth  label  label_score  label_source  split  source_video
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Gender, LabelSource, PseudoLabel};
use crate::skeleton::{Variation, ViewAngle};

const MAGIC: &str = "# gaitgender-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Val,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Unassigned => "UNASSIGNED",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TRAIN" => Ok(Split::Train),
            "VAL" => Ok(Split::Val),
            "UNASSIGNED" | "" => Ok(Split::Unassigned),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub sequence_id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub pose_path: PathBuf,
    pub subject_id: String,
    pub view_angle: Option<ViewAngle>,
    pub variation: Variation,
    /// Ground truth, used only for evaluation.
    pub truth: Option<Gender>,
    /// Label used for training.
    pub label: Option<PseudoLabel>,
    pub split: Split,
    pub source_video: String,
}

impl ManifestEntry {
    pub fn new(sequence_id: impl Into<String>, pose_path: impl Into<PathBuf>) -> Self {
        ManifestEntry {
            sequence_id: sequence_id.into(),
            pose_path: pose_path.into(),
            subject_id: String::new(),
            view_angle: None,
            variation: Variation::OTHER,
            truth: None,
            label: None,
            split: Split::Unassigned,
            source_video: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    /// Root seed for every randomized stage.
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    sequence_id: String,
    pose_path: String,
    subject_id: String,
    view_angle_deg: String,
    variation: String,
    truth: String,
    label: String,
    label_score: String,
    label_source: String,
    split: String,
    source_video: String,
}

fn opt_str<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl Row {
    fn from_entry(e: &ManifestEntry) -> Row {
        Row {
            sequence_id: e.sequence_id.clone(),
            pose_path: e.pose_path.to_string_lossy().into_owned(),
            subject_id: e.subject_id.clone(),
            view_angle_deg: opt_str(e.view_angle),
            variation: e.variation.to_string(),
            truth: opt_str(e.truth),
            label: opt_str(e.label.map(|l| l.label)),
            label_score: opt_str(e.label.map(|l| l.score)),
            label_source: opt_str(e.label.map(|l| l.source)),
            split: e.split.to_string(),
            source_video: e.source_video.clone(),
        }
    }

    fn into_entry(self) -> Result<ManifestEntry> {
        let nonempty = |s: &str| !s.trim().is_empty();
        let view_angle = if nonempty(&self.view_angle_deg) {
            let deg: u16 = self
                .view_angle_deg
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad view angle {:?}", self.view_angle_deg)))?;
            Some(ViewAngle::new(deg)?)
        } else {
            None
        };
        let truth = nonempty(&self.truth).then(|| self.truth.parse()).transpose()?;
        let label = if nonempty(&self.label) {
            let score: f64 = self
                .label_score
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad label score {:?}", self.label_score)))?;
            Some(PseudoLabel::new(
                self.label.parse()?,
                score,
                self.label_source.parse::<LabelSource>()?,
            )?)
        } else {
            None
        };
        if self.sequence_id.trim().is_empty() {
            return Err(Error::InvalidArgument("empty sequence_id".into()));
        }
        Ok(ManifestEntry {
            sequence_id: self.sequence_id,
            pose_path: PathBuf::from(self.pose_path),
            subject_id: self.subject_id,
            view_angle,
            variation: self.variation.parse()?,
            truth,
            label,
            split: self.split.parse()?,
            source_video: self.source_video,
        })
    }
}

impl Manifest {
    pub fn new(seed: u64, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Manifest { seed, entries };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.sequence_id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate sequence_id {:?}", e.sequence_id)));
            }
        }
        Ok(())
    }

    pub fn get(&self, sequence_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.sequence_id == sequence_id)
    }

    pub fn to_tsv(&self) -> Result<String> {
        let mut out = format!("{MAGIC}\n# seed={}\n", self.seed);
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .quote_style(csv::QuoteStyle::Necessary)
            .from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(Row::from_entry(e))
                .map_err(|e| Error::InvalidArgument(format!("cannot serialize manifest row: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("cannot serialize manifest: {e}")))?;
        if self.entries.is_empty() {
            out.push_str(
                "sequence_id\tpose_path\tsubject_id\tview_angle_deg\tvariation\ttruth\tlabel\tlabel_score\tlabel_source\tsplit\tsource_video\n",
            );
        }
        out.push_str(&String::from_utf8_lossy(&bytes));
        Ok(out)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Manifest> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(Error::parse(path, 1, format!("missing {MAGIC:?} header")));
        }
        let mut seed = 0;
        let mut header_lines = 1;
        for line in text.lines().skip(1) {
            let Some(comment) = line.strip_prefix('#') else { break };
            header_lines += 1;
            if let Some(v) = comment.trim().strip_prefix("seed=") {
                seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(path, header_lines, format!("bad seed {v:?}")))?;
            }
        }
        let body: String = text.lines().skip(header_lines).flat_map(|l| [l, "\n"]).collect();
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_reader(body.as_bytes());
        let mut entries = Vec::new();
        for (i, rec) in reader.deserialize::<Row>().enumerate() {
            // +1 for the column header row, +1 for 1-based numbering
            let line = header_lines + i + 2;
            let row = rec.map_err(|e| Error::parse(path, line, e.to_string()))?;
            entries.push(row.into_entry().map_err(|e| Error::parse(path, line, e.to_string()))?);
        }
        Manifest::new(seed, entries).map_err(|e| Error::parse(path, 1, e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path)
    }

    /// Writes through a temporary file and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.check_unique()?;
        let text = self.to_tsv()?;
        write_atomic(path, text.as_bytes())
    }

    pub fn resolve(&self, manifest_path: &Path, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            manifest_dir(manifest_path).join(rel)
        }
    }
}

pub fn manifest_dir(manifest_path: &Path) -> PathBuf {
    match manifest_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Advisory lock held while a command mutates a manifest. The lock file is
/// removed on drop.
#[derive(Debug)]
pub struct ManifestLock {
    path: PathBuf,
}

impl ManifestLock {
    pub fn acquire(manifest_path: &Path) -> Result<Self> {
        let mut p = manifest_path.as_os_str().to_owned();
        p.push(".lock");
        let path = PathBuf::from(p);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(ManifestLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::ManifestLocked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for ManifestLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
