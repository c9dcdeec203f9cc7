//! Pose-sequence domain types and the normalisation pipeline.
//!
//! Frames carry the 17 COCO keypoints. Normalisation zero-centres every
//! joint on the pelvis, divides x by the shoulder length and y by the
//! pelvis-to-neck length. COCO has no pelvis or neck keypoint, so both are
//! derived: pelvis is the hip midpoint, neck the shoulder midpoint.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 17;

/// Smallest admissible shoulder or torso length.
pub const ANCHOR_EPS: f64 = 1e-6;

/// COCO-17 keypoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(usize)]
pub enum JointId {
    Nose = 0,
    LeftEye,
    RightEye,
    LeftEar,
    RightEar,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
}

impl JointId {
    pub const ALL: [JointId; NUM_JOINTS] = [
        JointId::Nose,
        JointId::LeftEye,
        JointId::RightEye,
        JointId::LeftEar,
        JointId::RightEar,
        JointId::LeftShoulder,
        JointId::RightShoulder,
        JointId::LeftElbow,
        JointId::RightElbow,
        JointId::LeftWrist,
        JointId::RightWrist,
        JointId::LeftHip,
        JointId::RightHip,
        JointId::LeftKnee,
        JointId::RightKnee,
        JointId::LeftAnkle,
        JointId::RightAnkle,
    ];

    pub const fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            JointId::Nose => "nose",
            JointId::LeftEye => "left_eye",
            JointId::RightEye => "right_eye",
            JointId::LeftEar => "left_ear",
            JointId::RightEar => "right_ear",
            JointId::LeftShoulder => "left_shoulder",
            JointId::RightShoulder => "right_shoulder",
            JointId::LeftElbow => "left_elbow",
            JointId::RightElbow => "right_elbow",
            JointId::LeftWrist => "left_wrist",
            JointId::RightWrist => "right_wrist",
            JointId::LeftHip => "left_hip",
            JointId::RightHip => "right_hip",
            JointId::LeftKnee => "left_knee",
            JointId::RightKnee => "right_knee",
            JointId::LeftAnkle => "left_ankle",
            JointId::RightAnkle => "right_ankle",
        }
    }

    /// The same joint on the other side of the body; the nose maps to itself.
    pub fn mirrored(self) -> JointId {
        JointId::ALL[SIDE_SWAP[self.index()]]
    }
}

/// Index permutation exchanging left and right joints.
pub const SIDE_SWAP: [usize; NUM_JOINTS] = [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub conf: f64,
}

impl Joint {
    /// Confidence is clamped into [0, 1].
    pub fn new(x: f64, y: f64, conf: f64) -> Self {
        Joint {
            x,
            y,
            conf: conf.clamp(0.0, 1.0),
        }
    }

    fn lerp(a: &Joint, b: &Joint, w: f64) -> Joint {
        Joint {
            x: a.x + (b.x - a.x) * w,
            y: a.y + (b.y - a.y) * w,
            conf: a.conf + (b.conf - a.conf) * w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn midpoint(a: Point2, b: Point2) -> Point2 {
        Point2::new((a.x + b.x) / 2.0, (a.y + b.y) / 2.0)
    }

    pub fn distance(a: Point2, b: Point2) -> f64 {
        (a.x - b.x).hypot(a.y - b.y)
    }
}

/// One pose: exactly 17 joints in COCO order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SkeletonFrame {
    pub joints: [Joint; NUM_JOINTS],
}

impl SkeletonFrame {
    pub fn new(joints: [Joint; NUM_JOINTS]) -> Self {
        SkeletonFrame { joints }
    }

    pub fn joint(&self, id: JointId) -> &Joint {
        &self.joints[id.index()]
    }

    pub fn point(&self, id: JointId) -> Point2 {
        let j = self.joint(id);
        Point2::new(j.x, j.y)
    }

    pub fn map(&self, mut f: impl FnMut(usize, &Joint) -> Joint) -> SkeletonFrame {
        let mut joints = self.joints;
        for (i, j) in joints.iter_mut().enumerate() {
            *j = f(i, &self.joints[i]);
        }
        SkeletonFrame { joints }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> SkeletonFrame {
        self.map(|_, j| Joint { x: j.x + dx, y: j.y + dy, conf: j.conf })
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> SkeletonFrame {
        self.map(|_, j| Joint { x: j.x * sx, y: j.y * sy, conf: j.conf })
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().all(|j| j.x.is_finite() && j.y.is_finite())
    }

    fn lerp(a: &SkeletonFrame, b: &SkeletonFrame, w: f64) -> SkeletonFrame {
        a.map(|i, ja| Joint::lerp(ja, &b.joints[i], w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variation {
    /// Walking speed.
    WS,
    /// Carrying bag.
    CB,
    /// Clothing.
    CL,
    /// Cluttered background.
    CBG,
    /// Normal walk.
    NM,
    /// Bag.
    BG,
    OTHER,
}

impl Variation {
    pub const ALL: [Variation; 7] = [
        Variation::WS,
        Variation::CB,
        Variation::CL,
        Variation::CBG,
        Variation::NM,
        Variation::BG,
        Variation::OTHER,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variation::WS => "WS",
            Variation::CB => "CB",
            Variation::CL => "CL",
            Variation::CBG => "CBG",
            Variation::NM => "NM",
            Variation::BG => "BG",
            Variation::OTHER => "OTHER",
        }
    }
}

impl fmt::Display for Variation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variation::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variation {s:?}")))
    }
}

/// Camera azimuth relative to the walking direction, one of 0, 18, ..., 180.
/// 0 is the frontal view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub struct ViewAngle(u16);

impl ViewAngle {
    pub const FRONT: ViewAngle = ViewAngle(0);

    pub fn new(deg: u16) -> Result<Self> {
        if deg <= 180 && deg % 18 == 0 {
            Ok(ViewAngle(deg))
        } else {
            Err(Error::InvalidArgument(format!(
                "view angle {deg} is not one of 0, 18, ..., 180"
            )))
        }
    }

    /// All eleven angles in ascending order.
    pub fn all() -> impl Iterator<Item = ViewAngle> {
        (0..=10).map(|i| ViewAngle(i * 18))
    }

    pub fn degrees(self) -> u16 {
        self.0
    }

    pub fn is_front(self) -> bool {
        self.0 == 0
    }
}

impl TryFrom<u16> for ViewAngle {
    type Error = Error;

    fn try_from(v: u16) -> Result<Self> {
        ViewAngle::new(v)
    }
}

impl From<ViewAngle> for u16 {
    fn from(v: ViewAngle) -> u16 {
        v.0
    }
}

impl fmt::Display for ViewAngle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub subject_id: String,
    pub view_angle: Option<ViewAngle>,
    pub variation: Variation,
    pub source_video: String,
}

impl Default for SequenceMeta {
    fn default() -> Self {
        SequenceMeta {
            subject_id: String::new(),
            view_angle: None,
            variation: Variation::OTHER,
            source_video: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub frames: Vec<SkeletonFrame>,
    pub fps: f64,
    pub meta: SequenceMeta,
    /// True once [`normalize_sequence`] has been applied.
    pub normalized: bool,
}

impl SkeletonSequence {
    pub fn new(frames: Vec<SkeletonFrame>, fps: f64, meta: SequenceMeta) -> Self {
        SkeletonSequence {
            frames,
            fps,
            meta,
            normalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        if self.fps > 0.0 {
            self.frames.len() as f64 / self.fps
        } else {
            0.0
        }
    }

    pub(crate) fn with_frames(&self, frames: Vec<SkeletonFrame>) -> SkeletonSequence {
        SkeletonSequence {
            frames,
            fps: self.fps,
            meta: self.meta.clone(),
            normalized: self.normalized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedAnchors {
    pub pelvis: Point2,
    pub neck: Point2,
    pub shoulder_len: f64,
    pub torso_len: f64,
}

impl DerivedAnchors {
    fn is_degenerate(&self) -> bool {
        !(self.shoulder_len >= ANCHOR_EPS && self.torso_len >= ANCHOR_EPS)
    }
}

/// Computes pelvis, neck and both normalisation lengths without checking
/// for degeneracy.
fn anchors_unchecked(frame: &SkeletonFrame) -> DerivedAnchors {
    let pelvis = Point2::midpoint(frame.point(JointId::LeftHip), frame.point(JointId::RightHip));
    let neck = Point2::midpoint(
        frame.point(JointId::LeftShoulder),
        frame.point(JointId::RightShoulder),
    );
    DerivedAnchors {
        pelvis,
        neck,
        shoulder_len: Point2::distance(
            frame.point(JointId::LeftShoulder),
            frame.point(JointId::RightShoulder),
        ),
        torso_len: Point2::distance(pelvis, neck),
    }
}

pub fn derive_anchors(frame: &SkeletonFrame) -> Result<DerivedAnchors> {
    let anchors = anchors_unchecked(frame);
    if anchors.is_degenerate() {
        return Err(Error::AnchorDegenerate {
            shoulder_len: anchors.shoulder_len,
            torso_len: anchors.torso_len,
        });
    }
    Ok(anchors)
}

fn apply_normalization(frame: &SkeletonFrame, pelvis: Point2, sx: f64, sy: f64) -> SkeletonFrame {
    frame.map(|_, j| Joint {
        x: (j.x - pelvis.x) / sx,
        y: (j.y - pelvis.y) / sy,
        conf: j.conf,
    })
}

pub fn normalize_frame(frame: &SkeletonFrame) -> Result<SkeletonFrame> {
    let a = derive_anchors(frame)?;
    Ok(apply_normalization(frame, a.pelvis, a.shoulder_len, a.torso_len))
}

/// Which lengths divide the coordinates during sequence normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Each frame uses its own shoulder and torso lengths.
    #[default]
    PerFrame,
    /// Every frame uses the median lengths over the non-degenerate frames.
    /// The pelvis is still taken per frame.
    SequenceMedian,
}

impl FromStr for AnchorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_frame" | "per-frame" => Ok(AnchorMode::PerFrame),
            "median" | "sequence_median" | "sequence-median" => Ok(AnchorMode::SequenceMedian),
            _ => Err(Error::InvalidArgument(format!("unknown anchor mode {s:?}"))),
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Normalises every frame. Frames whose anchors are degenerate are rebuilt
/// by linear interpolation between the nearest valid neighbours; leading and
/// trailing runs copy the nearest valid frame.
pub fn normalize_sequence(seq: &SkeletonSequence, mode: AnchorMode) -> Result<SkeletonSequence> {
    if seq.normalized {
        return Err(Error::InvalidArgument(
            "sequence is already normalized".into(),
        ));
    }
    if seq.is_empty() {
        return Err(Error::SequenceUnusable("sequence has no frames".into()));
    }
    let anchors: Vec<DerivedAnchors> = seq.frames.iter().map(anchors_unchecked).collect();
    let valid: Vec<bool> = anchors.iter().map(|a| !a.is_degenerate()).collect();
    let n_bad = valid.iter().filter(|v| !**v).count();
    if 2 * n_bad > seq.len() {
        return Err(Error::SequenceUnusable(format!(
            "{n_bad} of {} frames have degenerate anchors",
            seq.len()
        )));
    }

    let median_lengths = match mode {
        AnchorMode::PerFrame => None,
        AnchorMode::SequenceMedian => {
            let (mut sl, mut tl): (Vec<f64>, Vec<f64>) = anchors
                .iter()
                .zip(&valid)
                .filter(|(_, v)| **v)
                .map(|(a, _)| (a.shoulder_len, a.torso_len))
                .unzip();
            Some((median(&mut sl), median(&mut tl)))
        }
    };

    let mut out: Vec<Option<SkeletonFrame>> = seq
        .frames
        .iter()
        .zip(&anchors)
        .zip(&valid)
        .map(|((frame, a), ok)| {
            ok.then(|| {
                let (sx, sy) = median_lengths.unwrap_or((a.shoulder_len, a.torso_len));
                apply_normalization(frame, a.pelvis, sx, sy)
            })
        })
        .collect();
    fill_gaps(&mut out);

    let mut result = seq.with_frames(out.into_iter().map(|f| f.expect("gaps filled")).collect());
    result.normalized = true;
    Ok(result)
}

/// Replaces `None` entries by interpolating between the nearest `Some`
/// neighbours. At least one entry must be `Some`.
fn fill_gaps(frames: &mut [Option<SkeletonFrame>]) {
    let known: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].is_some()).collect();
    for i in 0..frames.len() {
        if frames[i].is_some() {
            continue;
        }
        let next = known.partition_point(|&k| k < i);
        let filled = match (next.checked_sub(1).map(|p| known[p]), known.get(next)) {
            (Some(p), Some(&q)) => {
                let w = (i - p) as f64 / (q - p) as f64;
                SkeletonFrame::lerp(
                    frames[p].as_ref().unwrap(),
                    frames[q].as_ref().unwrap(),
                    w,
                )
            }
            (Some(p), None) => frames[p].unwrap(),
            (None, Some(&q)) => frames[q].unwrap(),
            (None, None) => unreachable!("at least one valid frame"),
        };
        frames[i] = Some(filled);
    }
}

/// Linearly resamples to `target_len` frames spread uniformly over the
/// original duration. First and last frames are preserved exactly.
pub fn resample_sequence(seq: &SkeletonSequence, target_len: usize) -> Result<SkeletonSequence> {
    if seq.is_empty() {
        return Err(Error::InvalidArgument("cannot resample an empty sequence".into()));
    }
    if target_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "target length must be at least 2, got {target_len}"
        )));
    }
    let n = seq.len();
    if n == target_len {
        return Ok(seq.clone());
    }
    let span = (n - 1) as f64;
    let frames = (0..target_len)
        .map(|j| {
            let t = (j * (n - 1)) as f64 / (target_len - 1) as f64;
            let lo = (t.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let w = t - lo as f64;
            if w == 0.0 || lo == hi {
                seq.frames[lo]
            } else {
                SkeletonFrame::lerp(&seq.frames[lo], &seq.frames[hi], w)
            }
        })
        .collect();
    let mut out = seq.with_frames(frames);
    if n > 1 {
        out.fps = seq.fps * (target_len - 1) as f64 / span;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationThresholds {
    /// A frame whose mean joint confidence is below this counts as low-confidence.
    pub min_frame_conf: f64,
    /// Flag the sequence when more than this fraction of frames is low-confidence.
    pub max_low_conf_fraction: f64,
    /// Flag the sequence when more than this fraction of frames is degenerate.
    pub max_degenerate_fraction: f64,
    pub min_frames: usize,
}

impl Default for ValidationThresholds {
    fn default() -> Self {
        ValidationThresholds {
            min_frame_conf: 0.1,
            max_low_conf_fraction: 0.25,
            max_degenerate_fraction: 0.5,
            min_frames: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationFlag {
    Empty,
    TooShort,
    LowConfidence,
    Degenerate,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub frames: usize,
    pub duration_s: f64,
    pub mean_conf_per_joint: Vec<f64>,
    pub mean_conf: f64,
    pub low_conf_fraction: f64,
    pub degenerate_fraction: f64,
    pub flags: Vec<ValidationFlag>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }
}

pub fn validate_sequence(seq: &SkeletonSequence, th: &ValidationThresholds) -> ValidationReport {
    let n = seq.len();
    let mut flags = Vec::new();
    if n == 0 {
        return ValidationReport {
            frames: 0,
            duration_s: 0.0,
            mean_conf_per_joint: vec![0.0; NUM_JOINTS],
            mean_conf: 0.0,
            low_conf_fraction: 0.0,
            degenerate_fraction: 0.0,
            flags: vec![ValidationFlag::Empty],
        };
    }

    let mut per_joint = vec![0.0; NUM_JOINTS];
    let mut low = 0usize;
    let mut degenerate = 0usize;
    let mut non_finite = false;
    for frame in &seq.frames {
        let mut frame_conf = 0.0;
        for (acc, j) in per_joint.iter_mut().zip(&frame.joints) {
            *acc += j.conf;
            frame_conf += j.conf;
        }
        if frame_conf / (NUM_JOINTS as f64) < th.min_frame_conf {
            low += 1;
        }
        if anchors_unchecked(frame).is_degenerate() {
            degenerate += 1;
        }
        non_finite |= !frame.is_finite();
    }
    per_joint.iter_mut().for_each(|c| *c /= n as f64);
    let mean_conf = per_joint.iter().sum::<f64>() / NUM_JOINTS as f64;
    let low_conf_fraction = low as f64 / n as f64;
    let degenerate_fraction = degenerate as f64 / n as f64;

    if n < th.min_frames {
        flags.push(ValidationFlag::TooShort);
    }
    if low_conf_fraction > th.max_low_conf_fraction {
        flags.push(ValidationFlag::LowConfidence);
    }
    if degenerate_fraction > th.max_degenerate_fraction {
        flags.push(ValidationFlag::Degenerate);
    }
    if non_finite {
        flags.push(ValidationFlag::NonFinite);
    }
    ValidationReport {
        frames: n,
        duration_s: seq.duration_s(),
        mean_conf_per_joint: per_joint,
        mean_conf,
        low_conf_fraction,
        degenerate_fraction,
        flags,
    }
}
