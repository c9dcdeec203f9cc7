//! Synthetic multi-view walkers with known gender labels.
//!
//! Each subject is a 3D stick figure whose limbs oscillate sinusoidally.
//! A style (arm-swing amplitude, stride width) determines the class. The
//! walker is rotated about the vertical axis to each view angle,
//! orthographically projected and written in the native pose format.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face::{write_fixture, BBox, FaceObservation, VideoFaceTrace};
use crate::labels::Gender;
use crate::manifest::{Manifest, ManifestEntry};
use crate::posefile::write_pose_csv;
use crate::seed::derive_seed;
use crate::skeleton::{Joint, SequenceMeta, SkeletonFrame, SkeletonSequence, Variation, ViewAngle, NUM_JOINTS};

/// Pixels per metre of the projection.
pub const PIXEL_SCALE: f64 = 200.0;
/// Image position of the world origin.
pub const PIXEL_ORIGIN: (f64, f64) = (320.0, 440.0);
pub const FRAME_SIZE: (f64, f64) = (640.0, 480.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthStyle {
    /// Peak arm swing in radians.
    pub arm_swing: f64,
    /// Lateral distance between the feet in metres.
    pub stride_width: f64,
    pub gender: Gender,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub subjects_per_style: usize,
    pub styles: Vec<SynthStyle>,
    pub angles: Vec<ViewAngle>,
    pub frames: usize,
    pub fps: f64,
    /// Standard deviation of the 3D joint jitter, in metres.
    pub noise_std: f64,
    pub seed: u64,
    pub variation: Variation,
    /// Also write face-trace fixtures for front-view sequences.
    pub face_fixtures: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects_per_style: 20,
            styles: vec![
                SynthStyle {
                    arm_swing: 0.4,
                    stride_width: 0.10,
                    gender: Gender::Female,
                },
                SynthStyle {
                    arm_swing: 0.1,
                    stride_width: 0.20,
                    gender: Gender::Male,
                },
            ],
            angles: ViewAngle::all().collect(),
            frames: 60,
            fps: 30.0,
            noise_std: 0.02,
            seed: 0,
            variation: Variation::NM,
            face_fixtures: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.styles.is_empty() || self.subjects_per_style == 0 || self.angles.is_empty() {
            return bad("synthetic dataset needs at least one style, subject and angle".into());
        }
        if self.styles.iter().any(|s| !(s.arm_swing > 0.0 && s.stride_width > 0.0)) {
            return bad("style amplitudes must be positive".into());
        }
        if self.frames < 2 || !(self.fps > 0.0) || !(self.noise_std >= 0.0) {
            return bad("frames must be at least 2, fps positive and noise_std non-negative".into());
        }
        Ok(())
    }

    pub fn sequence_id(&self, style: usize, subject: usize, angle: ViewAngle) -> String {
        format!("{}_a{:03}", self.subject_id(style, subject), angle.degrees())
    }

    pub fn subject_id(&self, style: usize, subject: usize) -> String {
        format!("s{style}p{subject:03}")
    }
}

/// Per-subject body and gait parameters, shared across view angles.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Subject {
    height: f64,
    freq: f64,
    phase: f64,
    arm: f64,
    stride: f64,
    leg_amp: f64,
}

impl Subject {
    fn draw(style: &SynthStyle, rng: &mut impl Rng) -> Subject {
        Subject {
            height: rng.random_range(0.9..1.1),
            freq: rng.random_range(0.85..1.1),
            phase: rng.random_range(0.0..2.0 * PI),
            arm: style.arm_swing * rng.random_range(0.85..1.15),
            stride: style.stride_width * rng.random_range(0.85..1.15),
            leg_amp: rng.random_range(0.35..0.45),
        }
    }
}

type P3 = [f64; 3];

fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

const SPEED: f64 = 1.2;

/// World joints for time `t`: x lateral, y up, z along the walking path.
fn pose_3d(s: &Subject, t: f64) -> [P3; NUM_JOINTS] {
    let h = s.height;
    let w = 2.0 * PI * s.freq * t + s.phase;
    let pel_y = 0.93 * h + 0.015 * h * (2.0 * w).cos();
    let z0 = SPEED * t;
    let mut j = [[0.0; 3]; NUM_JOINTS];
    for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
        let phase = if side == 0 { 0.0 } else { PI };
        let fh = s.leg_amp * (w + phase).sin();
        let kf = 0.6 * (w + phase + 1.2).sin().max(0.0) + 0.1;
        let lat = sign * (s.stride / 2.0 - 0.09 * h) * 0.5;
        let hip = [sign * 0.09 * h, pel_y, z0];
        let knee = add(hip, [lat, -0.43 * h * fh.cos(), 0.43 * h * fh.sin()]);
        let ankle = add(knee, [lat, -0.42 * h * (fh - kf).cos(), 0.42 * h * (fh - kf).sin()]);
        let rot = 0.3 * s.arm * w.sin();
        let shoulder = [sign * 0.19 * h * rot.cos(), pel_y + 0.52 * h, z0 - sign * 0.19 * h * rot.sin()];
        let psi = s.arm * (w + phase + PI).sin();
        let bend = 0.25 + 0.8 * s.arm * (0.5 + 0.5 * (w + phase + PI).sin());
        let elbow = add(shoulder, [sign * 0.03 * h, -0.30 * h * psi.cos(), 0.30 * h * psi.sin()]);
        let wrist = add(elbow, [sign * 0.02 * h, -0.27 * h * (psi + bend).cos(), 0.27 * h * (psi + bend).sin()]);
        j[1 + side] = [sign * 0.035 * h, pel_y + 0.72 * h, z0 + 0.08 * h];
        j[3 + side] = [sign * 0.075 * h, pel_y + 0.70 * h, z0];
        j[5 + side] = shoulder;
        j[7 + side] = elbow;
        j[9 + side] = wrist;
        j[11 + side] = hip;
        j[13 + side] = knee;
        j[15 + side] = ankle;
    }
    j[0] = [0.0, pel_y + 0.69 * h, z0 + 0.1 * h];
    j
}

fn project(p: P3, angle: ViewAngle) -> (f64, f64) {
    let th = (angle.degrees() as f64).to_radians();
    let x = p[0] * th.cos() + p[2] * th.sin();
    (PIXEL_ORIGIN.0 + PIXEL_SCALE * x, PIXEL_ORIGIN.1 - PIXEL_SCALE * p[1])
}

fn subject_rng(cfg: &SynthConfig, style: usize, subject: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[style as u64, subject as u64, stream]))
}

/// One raw (pixel-space) sequence.
pub fn synth_sequence(cfg: &SynthConfig, style: usize, subject: usize, angle: ViewAngle) -> Result<SkeletonSequence> {
    cfg.validate()?;
    let st = cfg
        .styles
        .get(style)
        .ok_or_else(|| Error::InvalidArgument(format!("style {style} out of range")))?;
    let body = Subject::draw(st, &mut subject_rng(cfg, style, subject, 0));
    let mut rng = subject_rng(cfg, style, subject, 1 + angle.degrees() as u64);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let frames = (0..cfg.frames)
        .map(|f| {
            let world = pose_3d(&body, f as f64 / cfg.fps);
            SkeletonFrame::new(std::array::from_fn(|i| {
                let mut p = world[i];
                if cfg.noise_std > 0.0 {
                    for c in &mut p {
                        *c += noise.sample(&mut rng);
                    }
                }
                let (x, y) = project(p, angle);
                Joint::new(x, y, 1.0)
            }))
        })
        .collect();
    let meta = SequenceMeta {
        subject_id: cfg.subject_id(style, subject),
        view_angle: Some(angle),
        variation: cfg.variation,
        source_video: cfg.sequence_id(style, subject, angle),
    };
    Ok(SkeletonSequence::new(frames, cfg.fps, meta))
}

/// Face trace for a front-view sequence: confident faces scored towards the
/// subject's gender plus a few low-confidence spurious detections.
fn synth_face_trace(cfg: &SynthConfig, style: usize, subject: usize, seq: &SkeletonSequence) -> Result<VideoFaceTrace> {
    let gender = cfg.styles[style].gender;
    let mut rng = subject_rng(cfg, style, subject, 10_000);
    let mut obs = Vec::new();
    for (f, frame) in seq.frames.iter().enumerate().step_by(5) {
        let nose = frame.joints[0];
        let size = rng.random_range(30.0..50.0);
        let p_female = rng.random_range(0.65..0.95);
        obs.push(FaceObservation {
            frame_index: f as u64,
            bbox: BBox {
                x: nose.x - size / 2.0,
                y: nose.y - size / 2.0,
                w: size,
                h: size,
            },
            gender_score: if gender == Gender::Female { p_female } else { 1.0 - p_female },
            det_conf: rng.random_range(0.92..1.0),
        });
        if rng.random::<f64>() < 0.2 {
            obs.push(FaceObservation {
                frame_index: f as u64,
                bbox: BBox {
                    x: rng.random_range(0.0..FRAME_SIZE.0),
                    y: rng.random_range(0.0..FRAME_SIZE.1),
                    w: 20.0,
                    h: 20.0,
                },
                gender_score: rng.random(),
                det_conf: rng.random_range(0.3..0.8),
            });
        }
    }
    VideoFaceTrace::new(FRAME_SIZE.0, FRAME_SIZE.1, obs)
}

pub const SYNTH_MANIFEST: &str = "manifest.tsv";
pub const POSE_DIR: &str = "poses";
pub const FACE_DIR: &str = "faces";

/// Writes pose files, optional face fixtures and `manifest.tsv` under
/// `out_dir`. Entries carry ground truth but no training label.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut entries = Vec::new();
    for (si, style) in cfg.styles.iter().enumerate() {
        for subject in 0..cfg.subjects_per_style {
            for &angle in &cfg.angles {
                let id = cfg.sequence_id(si, subject, angle);
                let seq = synth_sequence(cfg, si, subject, angle)?;
                let rel = PathBuf::from(POSE_DIR).join(format!("{id}.csv"));
                write_pose_csv(&out_dir.join(&rel), &seq)?;
                if cfg.face_fixtures && angle.is_front() {
                    let trace = synth_face_trace(cfg, si, subject, &seq)?;
                    write_fixture(&out_dir.join(FACE_DIR).join(format!("{id}.faces.csv")), &trace)?;
                }
                let mut e = ManifestEntry::new(&id, rel);
                e.subject_id = seq.meta.subject_id.clone();
                e.view_angle = Some(angle);
                e.variation = cfg.variation;
                e.truth = Some(style.gender);
                e.source_video = id;
                entries.push(e);
            }
        }
    }
    let manifest = Manifest::new(cfg.seed, entries)?;
    manifest.write(&out_dir.join(SYNTH_MANIFEST))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(angles: &[u16]) -> SynthConfig {
        SynthConfig {
            subjects_per_style: 5,
            angles: angles.iter().map(|&a| ViewAngle::new(a).unwrap()).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn front_only_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_dataset(&small(&[0]), dir.path()).unwrap();
        assert_eq!(m.entries.len(), 10);
        let female = m.entries.iter().filter(|e| e.truth == Some(Gender::Female)).count();
        assert_eq!(female, 5);
        assert!(m.entries.iter().all(|e| e.view_angle == Some(ViewAngle::FRONT)));
        assert!(dir.path().join(FACE_DIR).join(format!("{}.faces.csv", m.entries[0].sequence_id)).exists());
    }

    fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = small(&[0, 90]);
        generate_synthetic_dataset(&cfg, a.path()).unwrap();
        generate_synthetic_dataset(&cfg, b.path()).unwrap();
        let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
        assert_eq!(ta.len(), 20 + 10 + 1);
        assert_eq!(ta, tb);

        let c = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&SynthConfig { seed: 1, ..cfg }, c.path()).unwrap();
        assert_ne!(ta, tree_bytes(c.path()));
    }

    #[test]
    fn opposite_views_are_mirrored() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..small(&[0, 180])
        };
        let front = synth_sequence(&cfg, 0, 2, ViewAngle::new(0).unwrap()).unwrap();
        let back = synth_sequence(&cfg, 0, 2, ViewAngle::new(180).unwrap()).unwrap();
        for (f, b) in front.frames.iter().zip(&back.frames) {
            for (jf, jb) in f.joints.iter().zip(&b.joints) {
                assert!((jf.x - PIXEL_ORIGIN.0 + (jb.x - PIXEL_ORIGIN.0)).abs() < 1e-9);
                assert!((jf.y - jb.y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn subject_shared_across_views() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..small(&[0, 90])
        };
        let a = synth_sequence(&cfg, 1, 3, ViewAngle::new(0).unwrap()).unwrap();
        let b = synth_sequence(&cfg, 1, 3, ViewAngle::new(90).unwrap()).unwrap();
        // vertical coordinates do not depend on the view
        assert_eq!(a.frames[7].joints[9].y, b.frames[7].joints[9].y);
        assert_eq!(a.meta.subject_id, b.meta.subject_id);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small(&[0]);
        cfg.styles[0].arm_swing = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig { frames: 1, ..small(&[0]) };
        assert!(cfg.validate().is_err());
    }
}
