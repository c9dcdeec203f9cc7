//! Pose file ingestion.
//!
//! Two formats are read. The native CSV:
//!
//! ```text
//! # gaitgender-pose v1
//! # fps=30
//! frame,person,x0,y0,c0,...,x16,y16,c16
//! 0,0,312.5,140.2,0.98,...
//! ```
//!
//! and AlphaPose-style JSON, an array of detections with `image_id`,
//! `keypoints` (51 numbers) and an optional `box` `[x, y, w, h]`. The frame
//! index is taken from the digits of `image_id`.
//!
//! Either way, frames are sorted by index and, when several people appear
//! in one frame, the one with the largest bounding box is kept.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::skeleton::{Joint, SequenceMeta, SkeletonFrame, SkeletonSequence, NUM_JOINTS};

pub const POSE_HEADER: &str = "# gaitgender-pose v1";
pub const DEFAULT_FPS: f64 = 30.0;

const VALUES_PER_FRAME: usize = 3 * NUM_JOINTS;

struct Detection {
    frame: u64,
    area: f64,
    joints: [Joint; NUM_JOINTS],
}

fn keypoint_area(joints: &[Joint; NUM_JOINTS]) -> f64 {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for j in joints {
        x0 = x0.min(j.x);
        x1 = x1.max(j.x);
        y0 = y0.min(j.y);
        y1 = y1.max(j.y);
    }
    (x1 - x0) * (y1 - y0)
}

fn joints_from(values: &[f64]) -> [Joint; NUM_JOINTS] {
    std::array::from_fn(|i| Joint::new(values[3 * i], values[3 * i + 1], values[3 * i + 2]))
}

fn assemble(detections: Vec<Detection>, fps: f64, normalized: bool) -> SkeletonSequence {
    let mut best: BTreeMap<u64, Detection> = BTreeMap::new();
    for d in detections {
        match best.get(&d.frame) {
            Some(prev) if prev.area >= d.area => {}
            _ => {
                best.insert(d.frame, d);
            }
        }
    }
    let frames = best.into_values().map(|d| SkeletonFrame::new(d.joints)).collect();
    let mut seq = SkeletonSequence::new(frames, fps, SequenceMeta::default());
    seq.normalized = normalized;
    seq
}

/// Reads a pose file, choosing the parser by extension (`.json` or CSV).
pub fn load_pose_sequence(path: &Path) -> Result<SkeletonSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let seq = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        parse_alphapose_json(&text, path)?
    } else {
        parse_pose_csv(&text, path)?
    };
    if seq.is_empty() {
        return Err(Error::parse(path, 0, "pose file contains no frames"));
    }
    Ok(seq)
}

pub fn parse_pose_csv(text: &str, path: &Path) -> Result<SkeletonSequence> {
    let mut fps = DEFAULT_FPS;
    let mut normalized = false;
    for (i, line) in text.lines().enumerate() {
        let Some(meta) = line.strip_prefix('#') else { continue };
        let Some((key, value)) = meta.trim().split_once('=') else { continue };
        let bad = |m: String| Error::parse(path, i + 1, m);
        match key.trim() {
            "fps" => {
                fps = value
                    .trim()
                    .parse()
                    .ok()
                    .filter(|f: &f64| *f > 0.0 && f.is_finite())
                    .ok_or_else(|| bad(format!("invalid fps {value:?}")))?
            }
            "normalized" => normalized = value.trim() == "true",
            _ => {}
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?.clone();
    if header.get(0).map(str::trim) != Some("frame") {
        return Err(Error::parse(path, 1, "expected a header starting with `frame,person`"));
    }

    let mut detections = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |m: String| Error::parse(path, line, m);
        if record.len() < 2 {
            return Err(bad("expected frame, person and keypoint columns".into()));
        }
        let values = record.len() - 2;
        if values != VALUES_PER_FRAME {
            if values % 3 == 0 {
                return Err(Error::WrongKeypointCount {
                    path: path.to_path_buf(),
                    line,
                    found: values / 3,
                });
            }
            return Err(bad(format!("{values} keypoint values is not a whole number of (x, y, conf) triples")));
        }
        let frame: u64 = record[0].trim().parse().map_err(|_| bad(format!("invalid frame index {:?}", &record[0])))?;
        let nums = record
            .iter()
            .skip(2)
            .map(|f| f.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| bad("keypoint values must be finite numbers".into()))?;
        let joints = joints_from(&nums);
        detections.push(Detection {
            frame,
            area: keypoint_area(&joints),
            joints,
        });
    }
    Ok(assemble(detections, fps, normalized))
}

#[derive(Deserialize)]
struct AlphaPoseRecord {
    image_id: serde_json::Value,
    keypoints: Vec<f64>,
    #[serde(rename = "box", default)]
    bbox: Option<Vec<f64>>,
}

fn frame_index(id: &serde_json::Value) -> Option<u64> {
    match id {
        serde_json::Value::Number(n) => n.as_u64(),
        serde_json::Value::String(s) => {
            let stem = s.rsplit_once('.').map_or(s.as_str(), |(stem, _)| stem);
            let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
            digits.chars().rev().collect::<String>().parse().ok()
        }
        _ => None,
    }
}

/// Parses AlphaPose output. Error positions are 1-based record numbers.
pub fn parse_alphapose_json(text: &str, path: &Path) -> Result<SkeletonSequence> {
    let records: Vec<AlphaPoseRecord> = serde_json::from_str(text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    let mut detections = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let rec = i + 1;
        if r.keypoints.len() != VALUES_PER_FRAME {
            return Err(Error::WrongKeypointCount {
                path: path.to_path_buf(),
                line: rec,
                found: r.keypoints.len() / 3,
            });
        }
        if r.keypoints.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(path, rec, "keypoint values must be finite numbers"));
        }
        let frame = frame_index(&r.image_id)
            .ok_or_else(|| Error::parse(path, rec, format!("cannot read a frame index from image_id {}", r.image_id)))?;
        let joints = joints_from(&r.keypoints);
        let area = match r.bbox.as_deref() {
            Some([_, _, w, h, ..]) => w * h,
            _ => keypoint_area(&joints),
        };
        detections.push(Detection { frame, area, joints });
    }
    Ok(assemble(detections, DEFAULT_FPS, false))
}

/// Serialises one person per frame, frames numbered from 0.
pub fn format_pose_csv(seq: &SkeletonSequence) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{POSE_HEADER}");
    let _ = writeln!(out, "# fps={}", seq.fps);
    if seq.normalized {
        let _ = writeln!(out, "# normalized=true");
    }
    out.push_str("frame,person");
    for j in 0..NUM_JOINTS {
        let _ = write!(out, ",x{j},y{j},c{j}");
    }
    out.push('\n');
    for (t, frame) in seq.frames.iter().enumerate() {
        let _ = write!(out, "{t},0");
        for j in &frame.joints {
            let _ = write!(out, ",{},{},{}", j.x, j.y, j.conf);
        }
        out.push('\n');
    }
    out
}

pub fn write_pose_csv(path: &Path, seq: &SkeletonSequence) -> Result<()> {
    crate::manifest::write_atomic(path, format_pose_csv(seq).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::tests::upright;

    fn row(frame: u64, person: u32, scale: f64, joints: usize) -> String {
        let mut s = format!("{frame},{person}");
        for j in 0..joints {
            let _ = write!(s, ",{},{},0.9", j as f64 * scale, (j % 5) as f64 * scale);
        }
        s
    }

    fn csv(rows: &[String]) -> String {
        let mut s = format!("{POSE_HEADER}\n# fps=25\nframe,person");
        for j in 0..NUM_JOINTS {
            let _ = write!(s, ",x{j},y{j},c{j}");
        }
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn sixty_frames() {
        let rows: Vec<String> = (0..60).map(|t| row(t, 0, 1.0, 17)).collect();
        let seq = parse_pose_csv(&csv(&rows), Path::new("a.csv")).unwrap();
        assert_eq!(seq.len(), 60);
        assert_eq!(seq.fps, 25.0);
        assert!(!seq.normalized);
    }

    #[test]
    fn sixteen_keypoints_rejected() {
        let rows = vec![row(0, 0, 1.0, 17), row(1, 0, 1.0, 16)];
        match parse_pose_csv(&csv(&rows), Path::new("a.csv")) {
            Err(Error::WrongKeypointCount { found: 16, line: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn frames_sorted_and_largest_person_kept() {
        let rows = vec![row(2, 0, 2.0, 17), row(0, 0, 1.0, 17), row(1, 0, 1.0, 17), row(1, 1, 3.0, 17)];
        let seq = parse_pose_csv(&csv(&rows), Path::new("a.csv")).unwrap();
        assert_eq!(seq.len(), 3);
        let xs: Vec<f64> = seq.frames.iter().map(|f| f.joints[16].x).collect();
        assert_eq!(xs, vec![16.0, 48.0, 32.0]);
    }

    #[test]
    fn bad_number_reports_line() {
        let mut r = row(0, 0, 1.0, 17);
        r = r.replacen("0.9", "oops", 1);
        let err = parse_pose_csv(&csv(&[row(0, 0, 1.0, 17), r]), Path::new("p.csv")).unwrap_err();
        assert!(err.to_string().starts_with("p.csv:5:"), "{err}");
    }

    #[test]
    fn csv_roundtrip() {
        let frames: Vec<_> = (0..4).map(|i| upright(0.0).translated(i as f64 * 0.125, 1.0 / 3.0)).collect();
        let mut seq = SkeletonSequence::new(frames, 30.0, SequenceMeta::default());
        seq.normalized = true;
        let text = format_pose_csv(&seq);
        let back = parse_pose_csv(&text, Path::new("x.csv")).unwrap();
        assert_eq!(back.frames, seq.frames);
        assert!(back.normalized);
        assert_eq!(format_pose_csv(&back), text);
    }

    #[test]
    fn alphapose_json() {
        let kp = |s: f64| -> Vec<f64> { (0..17).flat_map(|j| [j as f64 * s, (j % 3) as f64 * s, 0.8]).collect() };
        let recs = serde_json::json!([
            {"image_id": "frame_0002.jpg", "keypoints": kp(1.0), "score": 2.1},
            {"image_id": "frame_0001.jpg", "keypoints": kp(1.0), "score": 2.0, "box": [0, 0, 10, 10]},
            {"image_id": "frame_0001.jpg", "keypoints": kp(2.0), "score": 1.0, "box": [0, 0, 20, 20]},
        ]);
        let seq = parse_alphapose_json(&recs.to_string(), Path::new("a.json")).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.frames[0].joints[1].x, 2.0);
        assert_eq!(seq.frames[1].joints[1].x, 1.0);

        let short = serde_json::json!([{"image_id": "1.jpg", "keypoints": vec![0.0; 48]}]);
        assert!(matches!(
            parse_alphapose_json(&short.to_string(), Path::new("a.json")),
            Err(Error::WrongKeypointCount { found: 16, .. })
        ));
    }
}
