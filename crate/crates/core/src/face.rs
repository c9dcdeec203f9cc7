//! Face-analysis distillation: per-frame face observations from an external
//! detector/classifier become one gender pseudo-label per walking video.
//!
//! Observations are combined by a weighted mean of the FEMALE probability,
//! each face weighted by its bounding-box area relative to the frame area.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Gender, LabelSource, PseudoLabel};
use crate::manifest::Manifest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection with `[0, width] x [0, height]`; `None` when empty.
    pub fn clipped(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        (x1 > x0 && y1 > y0).then(|| BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceObservation {
    pub frame_index: u64,
    pub bbox: BBox,
    /// Probability of FEMALE.
    pub gender_score: f64,
    pub det_conf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoFaceTrace {
    pub frame_width: f64,
    pub frame_height: f64,
    pub observations: Vec<FaceObservation>,
}

impl VideoFaceTrace {
    /// Validates scores and frame size and clips every box to the frame.
    /// Boxes entirely outside the frame are dropped.
    pub fn new(frame_width: f64, frame_height: f64, observations: Vec<FaceObservation>) -> Result<Self> {
        if !(frame_width > 0.0 && frame_height > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "frame dimensions must be positive, got {frame_width}x{frame_height}"
            )));
        }
        let mut kept = Vec::with_capacity(observations.len());
        for o in observations {
            for (name, v) in [("gender_score", o.gender_score), ("det_conf", o.det_conf)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
                }
            }
            if let Some(bbox) = o.bbox.clipped(frame_width, frame_height) {
                kept.push(FaceObservation { bbox, ..o });
            }
        }
        Ok(VideoFaceTrace {
            frame_width,
            frame_height,
            observations: kept,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceConfig {
    /// Observations with lower detector confidence are ignored.
    pub det_conf_threshold: f64,
    /// FEMALE when the aggregated score is at least this value.
    pub decision_threshold: f64,
}

impl Default for FaceConfig {
    fn default() -> Self {
        FaceConfig {
            det_conf_threshold: 0.9,
            decision_threshold: 0.5,
        }
    }
}

/// Area-weighted mean of the FEMALE probability over confident detections.
/// When a frame has several faces only the largest is kept.
pub fn aggregate_face_labels(trace: &VideoFaceTrace, cfg: &FaceConfig) -> Result<PseudoLabel> {
    let frame_area = trace.frame_width * trace.frame_height;
    let mut per_frame: BTreeMap<u64, &FaceObservation> = BTreeMap::new();
    for o in trace
        .observations
        .iter()
        .filter(|o| o.det_conf >= cfg.det_conf_threshold)
    {
        per_frame
            .entry(o.frame_index)
            .and_modify(|best| {
                if o.bbox.area() > best.bbox.area() {
                    *best = o;
                }
            })
            .or_insert(o);
    }
    if per_frame.is_empty() {
        return Err(Error::NoFaceFound);
    }
    let (num, den) = per_frame.values().fold((0.0, 0.0), |(num, den), o| {
        let w = o.bbox.area() / frame_area;
        (num + w * o.gender_score, den + w)
    });
    if den <= 0.0 {
        return Err(Error::NoFaceFound);
    }
    let score = (num / den).clamp(0.0, 1.0);
    let label = if score >= cfg.decision_threshold {
        Gender::Female
    } else {
        Gender::Male
    };
    PseudoLabel::new(label, score, LabelSource::Face)
}

/// Identifies the video a face analyzer should process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRef {
    pub sequence_id: String,
    pub source_video: String,
}

/// External face detector plus attribute classifier.
pub trait FaceAnalyzer {
    fn analyze(&self, video: &VideoRef) -> Result<VideoFaceTrace>;
}

/// Offline analyzer reading `<dir>/<sequence_id>.faces.csv`.
#[derive(Debug, Clone)]
pub struct FixtureAnalyzer {
    dir: PathBuf,
}

impl FixtureAnalyzer {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureAnalyzer { dir: dir.into() }
    }

    pub fn fixture_path(&self, sequence_id: &str) -> PathBuf {
        self.dir.join(format!("{sequence_id}.faces.csv"))
    }
}

impl FaceAnalyzer for FixtureAnalyzer {
    fn analyze(&self, video: &VideoRef) -> Result<VideoFaceTrace> {
        let path = self.fixture_path(&video.sequence_id);
        if !path.exists() {
            return Err(Error::FixtureMissing(path));
        }
        read_fixture(&path)
    }
}

const FIXTURE_MAGIC: &str = "# gaitgender-face-trace v1";
const FIXTURE_COLUMNS: &str = "frame_index,x,y,w,h,gender_score,det_conf";

/// Fixture layout:
///
/// ```text
/// # gaitgender-face-trace v1
/// frame_width=1920
/// frame_height=1080
/// frame_index,x,y,w,h,gender_score,det_conf
/// 12,840,120,64,72,0.83,0.99
/// ```
pub fn read_fixture(path: &Path) -> Result<VideoFaceTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fixture(&text, path)
}

pub fn parse_fixture(text: &str, path: &Path) -> Result<VideoFaceTrace> {
    let mut width = None;
    let mut height = None;
    let mut seen_columns = false;
    let mut observations = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_columns {
            if let Some((key, value)) = line.split_once('=') {
                let v: f64 = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(path, line_no, format!("bad number {value:?}")))?;
                match key.trim() {
                    "frame_width" => width = Some(v),
                    "frame_height" => height = Some(v),
                    other => return Err(Error::parse(path, line_no, format!("unknown header key {other:?}"))),
                }
                continue;
            }
            if line.replace(' ', "") != FIXTURE_COLUMNS {
                return Err(Error::parse(path, line_no, format!("expected column header {FIXTURE_COLUMNS:?}")));
            }
            seen_columns = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(Error::parse(path, line_no, format!("expected 7 fields, found {}", fields.len())));
        }
        let frame_index: u64 = fields[0]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad frame index {:?}", fields[0])))?;
        let mut nums = [0.0; 6];
        for (n, f) in nums.iter_mut().zip(&fields[1..]) {
            *n = f
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad number {f:?}")))?;
        }
        observations.push(FaceObservation {
            frame_index,
            bbox: BBox {
                x: nums[0],
                y: nums[1],
                w: nums[2],
                h: nums[3],
            },
            gender_score: nums[4],
            det_conf: nums[5],
        });
    }
    let (Some(w), Some(h)) = (width, height) else {
        return Err(Error::parse(path, 1, "missing frame_width/frame_height header"));
    };
    VideoFaceTrace::new(w, h, observations).map_err(|e| Error::parse(path, 1, e.to_string()))
}

pub fn format_fixture(trace: &VideoFaceTrace) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{FIXTURE_MAGIC}");
    let _ = writeln!(s, "frame_width={}", trace.frame_width);
    let _ = writeln!(s, "frame_height={}", trace.frame_height);
    let _ = writeln!(s, "{FIXTURE_COLUMNS}");
    for o in &trace.observations {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            o.frame_index, o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h, o.gender_score, o.det_conf
        );
    }
    s
}

pub fn write_fixture(path: &Path, trace: &VideoFaceTrace) -> Result<()> {
    crate::manifest::write_atomic(path, format_fixture(trace).as_bytes())
}

/// Live analyzer: POSTs a [`VideoRef`] as JSON to `endpoint` and expects a
/// [`VideoFaceTrace`] JSON body back. Requests are independent, so the
/// client may be shared across threads.
#[derive(Debug, Clone)]
pub struct HttpFaceAnalyzer {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpFaceAnalyzer {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::AnalyzerUnavailable(e.to_string()))?;
        Ok(HttpFaceAnalyzer {
            endpoint: endpoint.into(),
            client,
        })
    }
}

impl FaceAnalyzer for HttpFaceAnalyzer {
    fn analyze(&self, video: &VideoRef) -> Result<VideoFaceTrace> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(video)
            .send()
            .map_err(|e| Error::AnalyzerUnavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::AnalyzerUnavailable(format!(
                "{} returned {}",
                self.endpoint,
                resp.status()
            )));
        }
        let trace: VideoFaceTrace = resp
            .json()
            .map_err(|e| Error::AnalyzerUnavailable(format!("malformed response: {e}")))?;
        VideoFaceTrace::new(trace.frame_width, trace.frame_height, trace.observations)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LabelingSummary {
    pub labeled: usize,
    pub no_face: Vec<String>,
    pub failed: Vec<(String, String)>,
    pub skipped_non_front: usize,
    pub kept_true: usize,
}

/// Assigns FACE pseudo-labels to every front-view entry. Entries at other
/// angles are left alone, as are entries that already carry a TRUE label.
/// Entries without a usable face are left unlabeled and listed in the summary.
pub fn label_dataset(
    manifest: &mut Manifest,
    analyzer: &dyn FaceAnalyzer,
    cfg: &FaceConfig,
) -> LabelingSummary {
    let mut summary = LabelingSummary::default();
    for entry in manifest.entries.iter_mut() {
        if !entry.view_angle.is_some_and(|a| a.is_front()) {
            summary.skipped_non_front += 1;
            continue;
        }
        if entry.label.is_some_and(|l| l.source == LabelSource::True) {
            summary.kept_true += 1;
            continue;
        }
        let video = VideoRef {
            sequence_id: entry.sequence_id.clone(),
            source_video: entry.source_video.clone(),
        };
        match analyzer.analyze(&video).and_then(|t| aggregate_face_labels(&t, cfg)) {
            Ok(label) => {
                entry.label = Some(label);
                summary.labeled += 1;
            }
            Err(Error::NoFaceFound) => {
                log::info!("{}: no usable face, left unlabeled", entry.sequence_id);
                entry.label = None;
                summary.no_face.push(entry.sequence_id.clone());
            }
            Err(e) => {
                log::warn!("{}: {e}", entry.sequence_id);
                summary.failed.push((entry.sequence_id.clone(), e.to_string()));
            }
        }
    }
    summary
}
