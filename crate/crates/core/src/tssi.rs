//! Tree-structure skeleton images and the augmentation suite.
//!
//! A TSSI lays a skeleton sequence out as an image: rows follow a
//! depth-first walk of the skeleton tree (so neighbouring rows are
//! neighbouring joints), columns are time steps and the three channels hold
//! x, y and confidence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{resample_sequence, JointId, SkeletonSequence, NUM_JOINTS, SIDE_SWAP};

/// Default number of time steps per image (about two seconds at 30 fps).
pub const DEFAULT_FRAMES: usize = 60;

/// Normalised coordinates are clipped to this magnitude before being mapped
/// into [0, 1] for the classifier.
pub const PIXEL_CLIP: f64 = 3.0;

pub const CHANNELS: usize = 3;

/// Edges of the COCO-17 skeleton tree rooted at the nose.
pub const SKELETON_EDGES: [(JointId, JointId); 16] = [
    (JointId::Nose, JointId::LeftEye),
    (JointId::LeftEye, JointId::LeftEar),
    (JointId::Nose, JointId::RightEye),
    (JointId::RightEye, JointId::RightEar),
    (JointId::Nose, JointId::LeftShoulder),
    (JointId::LeftShoulder, JointId::LeftElbow),
    (JointId::LeftElbow, JointId::LeftWrist),
    (JointId::LeftShoulder, JointId::LeftHip),
    (JointId::LeftHip, JointId::LeftKnee),
    (JointId::LeftKnee, JointId::LeftAnkle),
    (JointId::Nose, JointId::RightShoulder),
    (JointId::RightShoulder, JointId::RightElbow),
    (JointId::RightElbow, JointId::RightWrist),
    (JointId::RightShoulder, JointId::RightHip),
    (JointId::RightHip, JointId::RightKnee),
    (JointId::RightKnee, JointId::RightAnkle),
];

pub fn is_tree_edge(a: usize, b: usize) -> bool {
    SKELETON_EDGES
        .iter()
        .any(|&(p, q)| (p.index() == a && q.index() == b) || (p.index() == b && q.index() == a))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraversalOrder {
    pub indices: Vec<usize>,
}

impl TraversalOrder {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_valid_walk(&self) -> bool {
        self.indices.windows(2).all(|w| is_tree_edge(w[0], w[1]))
    }

    pub fn covers_all_joints(&self) -> bool {
        (0..NUM_JOINTS).all(|j| self.indices.contains(&j))
    }
}

/// Depth-first walk of the COCO-17 tree starting and ending at the nose,
/// visiting the left side of the head, the right side of the head, the left
/// arm and leg, then the right arm and leg. Length 33.
pub fn coco17_traversal() -> TraversalOrder {
    use JointId::*;
    let walk = [
        Nose,
        LeftEye,
        LeftEar,
        LeftEye,
        Nose,
        RightEye,
        RightEar,
        RightEye,
        Nose,
        LeftShoulder,
        LeftElbow,
        LeftWrist,
        LeftElbow,
        LeftShoulder,
        LeftHip,
        LeftKnee,
        LeftAnkle,
        LeftKnee,
        LeftHip,
        LeftShoulder,
        Nose,
        RightShoulder,
        RightElbow,
        RightWrist,
        RightElbow,
        RightShoulder,
        RightHip,
        RightKnee,
        RightAnkle,
        RightKnee,
        RightHip,
        RightShoulder,
        Nose,
    ];
    TraversalOrder {
        indices: walk.iter().map(|j| j.index()).collect(),
    }
}

/// Row-major tensor of shape `(rows, steps, 3)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TssiImage {
    pub rows: usize,
    pub steps: usize,
    pub data: Vec<f64>,
}

impl TssiImage {
    pub fn zeros(rows: usize, steps: usize) -> Self {
        TssiImage {
            rows,
            steps,
            data: vec![0.0; rows * steps * CHANNELS],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.steps, CHANNELS)
    }

    #[inline]
    pub fn offset(&self, row: usize, step: usize, ch: usize) -> usize {
        (row * self.steps + step) * CHANNELS + ch
    }

    pub fn get(&self, row: usize, step: usize, ch: usize) -> f64 {
        self.data[self.offset(row, step, ch)]
    }

    pub fn set(&mut self, row: usize, step: usize, ch: usize, v: f64) {
        let o = self.offset(row, step, ch);
        self.data[o] = v;
    }

    /// Classifier input: channel-first `[3, size, size]`, values clipped to
    /// `±PIXEL_CLIP`, mapped affinely onto [0, 1], then bilinearly resized
    /// (half-pixel centres, edge clamping).
    pub fn to_pixels(&self, size: usize) -> Vec<f32> {
        let mut out = vec![0f32; CHANNELS * size * size];
        let sy = self.rows as f64 / size as f64;
        let sx = self.steps as f64 / size as f64;
        let sample = |r: usize, t: usize, c: usize| -> f64 {
            let v = self.get(r, t, c).clamp(-PIXEL_CLIP, PIXEL_CLIP);
            (v + PIXEL_CLIP) / (2.0 * PIXEL_CLIP)
        };
        let coords = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        };
        for oy in 0..size {
            let (r0, r1, wy) = coords(oy, sy, self.rows);
            for ox in 0..size {
                let (t0, t1, wx) = coords(ox, sx, self.steps);
                for c in 0..CHANNELS {
                    let top = sample(r0, t0, c) * (1.0 - wx) + sample(r0, t1, c) * wx;
                    let bottom = sample(r1, t0, c) * (1.0 - wx) + sample(r1, t1, c) * wx;
                    out[(c * size + oy) * size + ox] = (top * (1.0 - wy) + bottom * wy) as f32;
                }
            }
        }
        out
    }
}

/// Encodes a normalised sequence as a TSSI with `steps` time columns.
pub fn encode_tssi(seq: &SkeletonSequence, order: &TraversalOrder, steps: usize) -> Result<TssiImage> {
    if !seq.normalized {
        return Err(Error::InvalidArgument(
            "TSSI encoding expects a normalized sequence".into(),
        ));
    }
    if seq.is_empty() {
        return Err(Error::SequenceUnusable("sequence has no frames".into()));
    }
    let seq = resample_sequence(seq, steps)?;
    let mut img = TssiImage::zeros(order.len(), steps);
    for (r, &joint) in order.indices.iter().enumerate() {
        for (t, frame) in seq.frames.iter().enumerate() {
            let j = frame.joints[joint];
            img.set(r, t, 0, j.x);
            img.set(r, t, 1, j.y);
            img.set(r, t, 2, j.conf);
        }
    }
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::SequenceUnusable("non-finite coordinates".into()));
    }
    Ok(img)
}

/// Swaps left and right joint labels; coordinates are untouched.
pub fn flip_lr(seq: &SkeletonSequence) -> SkeletonSequence {
    let frames = seq
        .frames
        .iter()
        .map(|f| f.map(|i, _| f.joints[SIDE_SWAP[i]]))
        .collect();
    seq.with_frames(frames)
}

/// Reflects about the vertical axis (x -> -x) and swaps side labels so the
/// result is again an anatomically consistent skeleton.
pub fn mirror_x(seq: &SkeletonSequence) -> SkeletonSequence {
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            f.map(|i, _| {
                let src = f.joints[SIDE_SWAP[i]];
                crate::skeleton::Joint {
                    x: -src.x,
                    ..src
                }
            })
        })
        .collect();
    seq.with_frames(frames)
}

/// Drops each joint in each frame independently with probability `p`:
/// confidence and coordinates become zero.
pub fn joint_dropout<R: Rng + ?Sized>(seq: &SkeletonSequence, p: f64, rng: &mut R) -> Result<SkeletonSequence> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            f.map(|_, j| {
                if rng.random::<f64>() < p {
                    crate::skeleton::Joint::default()
                } else {
                    *j
                }
            })
        })
        .collect();
    Ok(seq.with_frames(frames))
}

pub const PACE_BOUNDS: (f64, f64) = (0.5, 2.0);

/// Changes walking pace: resamples to `round(len / factor)` frames and
/// scales the frame rate by `factor`.
pub fn pace_modify(seq: &SkeletonSequence, factor: f64) -> Result<SkeletonSequence> {
    if !(PACE_BOUNDS.0..=PACE_BOUNDS.1).contains(&factor) {
        return Err(Error::InvalidArgument(format!(
            "pace factor {factor} outside [{}, {}]",
            PACE_BOUNDS.0, PACE_BOUNDS.1
        )));
    }
    let target = ((seq.len() as f64 / factor).round() as usize).max(2);
    let mut out = resample_sequence(seq, target)?;
    out.fps = seq.fps * factor;
    Ok(out)
}

/// Contiguous window of `len` frames starting at a uniformly drawn offset.
pub fn random_temporal_crop<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    len: usize,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    if len == 0 || len > seq.len() {
        return Err(Error::InvalidArgument(format!(
            "crop length {len} not in 1..={}",
            seq.len()
        )));
    }
    let start = rng.random_range(0..=seq.len() - len);
    Ok(seq.with_frames(seq.frames[start..start + len].to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub mirror_prob: f64,
    pub dropout_p: f64,
    pub pace_range: (f64, f64),
    /// Crops keep at least this fraction of the frames.
    pub min_crop_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            mirror_prob: 0.5,
            dropout_p: 0.05,
            pace_range: (0.8, 1.25),
            min_crop_fraction: 0.8,
        }
    }
}

/// Random crop, pace change, flip, mirror and joint dropout, in that order.
pub fn augment<R: Rng + ?Sized>(seq: &SkeletonSequence, cfg: &AugmentConfig, rng: &mut R) -> Result<SkeletonSequence> {
    let n = seq.len();
    let min_len = ((n as f64 * cfg.min_crop_fraction).ceil() as usize).clamp(1, n);
    let crop_len = rng.random_range(min_len..=n);
    let mut out = random_temporal_crop(seq, crop_len, rng)?;

    let (lo, hi) = cfg.pace_range;
    let factor = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    if out.len() >= 2 && factor != 1.0 {
        out = pace_modify(&out, factor)?;
    }
    if rng.random::<f64>() < cfg.flip_prob {
        out = flip_lr(&out);
    }
    if rng.random::<f64>() < cfg.mirror_prob {
        out = mirror_x(&out);
    }
    if cfg.dropout_p > 0.0 {
        out = joint_dropout(&out, cfg.dropout_p, rng)?;
    }
    Ok(out)
}
