//! Label propagation in a gait-embedding space: front-view labels are
//! carried to other viewpoints through nearest neighbours or a similarity
//! graph.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Gender, LabelSource, PseudoLabel, NUM_CLASSES};
use crate::skeleton::{JointId, SkeletonSequence, ViewAngle, NUM_JOINTS};
use crate::tssi::PIXEL_CLIP;

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub sequence_id: String,
    v: Vec<f64>,
}

impl Embedding {
    /// Wraps an already unit-norm vector.
    pub fn new(sequence_id: impl Into<String>, v: Vec<f64>) -> Result<Self> {
        let norm = l2(&v);
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidArgument(format!("embedding norm is {norm}, expected 1")));
        }
        Ok(Embedding {
            sequence_id: sequence_id.into(),
            v,
        })
    }

    /// Scales `raw` to unit length.
    pub fn normalized(sequence_id: impl Into<String>, mut raw: Vec<f64>) -> Result<Self> {
        let norm = l2(&raw);
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(Error::SequenceUnusable(format!("embedding has norm {norm}")));
        }
        raw.iter_mut().for_each(|x| *x /= norm);
        Ok(Embedding {
            sequence_id: sequence_id.into(),
            v: raw,
        })
    }

    pub fn vector(&self) -> &[f64] {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        dot(&self.v, &other.v)
    }

    pub fn cosine_distance(&self, other: &Embedding) -> f64 {
        (1.0 - self.cosine(other)).max(0.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Maps a normalized skeleton sequence to a unit-norm embedding.
pub trait GaitEmbedder {
    fn embed(&self, sequence_id: &str, seq: &SkeletonSequence) -> Result<Embedding>;
}

const LIMBS: [(JointId, JointId, JointId); 4] = [
    (JointId::LeftShoulder, JointId::LeftElbow, JointId::LeftWrist),
    (JointId::RightShoulder, JointId::RightElbow, JointId::RightWrist),
    (JointId::LeftHip, JointId::LeftKnee, JointId::LeftAnkle),
    (JointId::RightHip, JointId::RightKnee, JointId::RightAnkle),
];
const ANKLES: [JointId; 2] = [JointId::LeftAnkle, JointId::RightAnkle];
const TOP_FREQS: usize = 3;

/// Dimension of [`HandcraftedEmbedder`] output.
pub const HANDCRAFTED_DIM: usize = 4 * NUM_JOINTS + 3 * LIMBS.len() + TOP_FREQS * ANKLES.len();

/// Summary-statistics embedding used when no pretrained metric network is
/// available.
///
/// Layout (86 values before normalisation): per-joint x means, y means,
/// x stds, y stds (17 each); per limb the mean cosine, mean sine and std of
/// the signed interior angle at elbows and knees (4 limbs); the three
/// largest non-DC DFT magnitudes of each ankle's x trajectory. Coordinates
/// are clipped to +-3 first.
///
/// Horizontal image coordinates change with camera azimuth while vertical
/// ones do not, so every block derived from x (x statistics, angles,
/// ankle spectra) is multiplied by `lateral_weight`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandcraftedEmbedder {
    pub lateral_weight: f64,
}

impl Default for HandcraftedEmbedder {
    fn default() -> Self {
        HandcraftedEmbedder { lateral_weight: 0.02 }
    }
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn interior_angle(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    let u = (a.0 - b.0, a.1 - b.1);
    let v = (c.0 - b.0, c.1 - b.1);
    (u.0 * v.1 - u.1 * v.0).atan2(u.0 * v.0 + u.1 * v.1)
}

/// Magnitudes of DFT bins 1..=n/2 divided by n.
fn dft_magnitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (1..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            (re * re + im * im).sqrt() / n as f64
        })
        .collect()
}

impl HandcraftedEmbedder {
    pub fn features(&self, seq: &SkeletonSequence) -> Result<Vec<f64>> {
        if !seq.normalized {
            return Err(Error::InvalidArgument("embedding requires a normalized sequence".into()));
        }
        if seq.is_empty() {
            return Err(Error::SequenceUnusable("empty sequence".into()));
        }
        let w = self.lateral_weight;
        let clip = |v: f64| v.clamp(-PIXEL_CLIP, PIXEL_CLIP);
        let xs = |j: usize| seq.frames.iter().map(move |f| clip(f.joints[j].x));
        let ys = |j: usize| seq.frames.iter().map(move |f| clip(f.joints[j].y));

        let mut mx = Vec::with_capacity(NUM_JOINTS);
        let mut my = Vec::with_capacity(NUM_JOINTS);
        let mut sx = Vec::with_capacity(NUM_JOINTS);
        let mut sy = Vec::with_capacity(NUM_JOINTS);
        for j in 0..NUM_JOINTS {
            let (m, s) = mean_std(xs(j));
            mx.push(w * m);
            sx.push(w * s);
            let (m, s) = mean_std(ys(j));
            my.push(m);
            sy.push(s);
        }
        let mut feats = [mx, my, sx, sy].concat();

        let pt = |f: &crate::skeleton::SkeletonFrame, j: JointId| {
            let p = f.joint(j);
            (clip(p.x), clip(p.y))
        };
        let mut cos_m = Vec::new();
        let mut sin_m = Vec::new();
        let mut stds = Vec::new();
        for (a, b, c) in LIMBS {
            let angles: Vec<f64> = seq
                .frames
                .iter()
                .map(|f| interior_angle(pt(f, a), pt(f, b), pt(f, c)))
                .collect();
            cos_m.push(w * mean_std(angles.iter().map(|t| t.cos())).0);
            sin_m.push(w * mean_std(angles.iter().map(|t| t.sin())).0);
            stds.push(w * mean_std(angles.iter().copied()).1);
        }
        feats.extend(cos_m);
        feats.extend(sin_m);
        feats.extend(stds);

        for ankle in ANKLES {
            let x: Vec<f64> = xs(ankle.index()).collect();
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let centered: Vec<f64> = x.iter().map(|v| v - m).collect();
            let mut mags = dft_magnitudes(&centered);
            mags.sort_by(|a, b| b.total_cmp(a));
            mags.resize(TOP_FREQS.max(mags.len()), 0.0);
            feats.extend(mags[..TOP_FREQS].iter().map(|v| w * v));
        }
        debug_assert_eq!(feats.len(), HANDCRAFTED_DIM);
        Ok(feats)
    }
}

impl GaitEmbedder for HandcraftedEmbedder {
    fn embed(&self, sequence_id: &str, seq: &SkeletonSequence) -> Result<Embedding> {
        Embedding::normalized(sequence_id, self.features(seq)?)
    }
}

/// Serves embeddings computed elsewhere (for example by a pretrained metric
/// network) from an embedding cache file.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbedder {
    by_id: HashMap<String, Embedding>,
}

impl PrecomputedEmbedder {
    pub fn new(embeddings: Vec<Embedding>) -> Self {
        PrecomputedEmbedder {
            by_id: embeddings.into_iter().map(|e| (e.sequence_id.clone(), e)).collect(),
        }
    }

    pub fn from_cache(path: &Path) -> Result<Self> {
        read_embeddings(path)
            .map(Self::new)
            .map_err(|e| Error::EmbedderUnavailable(e.to_string()))
    }
}

impl GaitEmbedder for PrecomputedEmbedder {
    fn embed(&self, sequence_id: &str, _seq: &SkeletonSequence) -> Result<Embedding> {
        self.by_id
            .get(sequence_id)
            .cloned()
            .ok_or_else(|| Error::EmbedderUnavailable(format!("no precomputed embedding for {sequence_id}")))
    }
}

const CACHE_MAGIC: &str = "# gaitgender-embeddings v1";

/// Embedding cache: a header line `# gaitgender-embeddings v1 n=<n> d=<d>`
/// followed by one tab-separated row per sequence, the sequence id and then
/// `d` floats.
pub fn format_embeddings(embeddings: &[Embedding]) -> String {
    let d = embeddings.first().map_or(0, |e| e.dim());
    let mut s = format!("{CACHE_MAGIC} n={} d={d}\n", embeddings.len());
    for e in embeddings {
        s.push_str(&e.sequence_id);
        for v in &e.v {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_embeddings(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    crate::manifest::write_atomic(path, format_embeddings(embeddings).as_bytes())
}

pub fn parse_embeddings(text: &str, path: &Path) -> Result<Vec<Embedding>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let rest = header
        .strip_prefix(CACHE_MAGIC)
        .ok_or_else(|| Error::parse(path, 1, format!("missing {CACHE_MAGIC:?} header")))?;
    let mut n = None;
    let mut d = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("n=") {
            n = v.parse::<usize>().ok();
        } else if let Some(v) = tok.strip_prefix("d=") {
            d = v.parse::<usize>().ok();
        }
    }
    let (Some(n), Some(d)) = (n, d) else {
        return Err(Error::parse(path, 1, "header lacks n= and d="));
    };
    let mut out = Vec::with_capacity(n);
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line_no = i + 2;
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().to_string();
        let v: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        if v.len() != d {
            return Err(Error::parse(path, line_no, format!("expected {d} values, found {}", v.len())));
        }
        out.push(Embedding::new(id, v).map_err(|e| Error::parse(path, line_no, e.to_string()))?);
    }
    if out.len() != n {
        return Err(Error::parse(path, 1, format!("header says n={n}, found {} rows", out.len())));
    }
    Ok(out)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<Embedding>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Median distance over all kNN pairs.
    Auto,
    Fixed(f64),
}

/// Sparse symmetric kNN affinity graph. `neighbors[i]` lists `(j, w_ij)`
/// sorted by `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub k: usize,
    pub sigma: f64,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl AffinityGraph {
    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.neighbors[i]
            .binary_search_by_key(&j, |&(idx, _)| idx)
            .map_or(0.0, |p| self.neighbors[i][p].1)
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut w = DMatrix::zeros(n, n);
        for (i, row) in self.neighbors.iter().enumerate() {
            for &(j, v) in row {
                w[(i, j)] = v;
            }
        }
        w
    }

    /// `D^-1/2 W D^-1/2`.
    pub fn normalized_affinity(&self) -> DMatrix<f64> {
        let mut s = self.dense();
        let inv_sqrt: Vec<f64> = (0..self.n())
            .map(|i| {
                let d: f64 = self.neighbors[i].iter().map(|e| e.1).sum();
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        for i in 0..self.n() {
            for j in 0..self.n() {
                s[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        s
    }
}

/// Indices of all other points sorted by cosine distance, ties by index.
fn sorted_by_distance(embeddings: &[Embedding], i: usize) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = embeddings
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, e)| (j, embeddings[i].cosine_distance(e)))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Gaussian-weighted kNN graph over cosine distances, symmetrised by max.
pub fn build_knn_graph(embeddings: &[Embedding], k: usize, sigma: Bandwidth) -> Result<AffinityGraph> {
    let n = embeddings.len();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if n < k + 1 {
        return Err(Error::TooFewSamples { needed: k + 1, got: n });
    }
    let knn: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            let mut d = sorted_by_distance(embeddings, i);
            d.truncate(k);
            d
        })
        .collect();
    let sigma = match sigma {
        Bandwidth::Fixed(s) if s > 0.0 => s,
        Bandwidth::Fixed(s) => return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {s}"))),
        Bandwidth::Auto => {
            let m = median(knn.iter().flatten().map(|e| e.1).collect());
            if m > 0.0 {
                m
            } else {
                // all neighbours coincide; any positive bandwidth gives weight 1
                1.0
            }
        }
    };
    let mut dense: Vec<HashMap<usize, f64>> = vec![HashMap::new(); n];
    for (i, row) in knn.iter().enumerate() {
        for &(j, d) in row {
            let w = (-(d * d) / (2.0 * sigma * sigma)).exp();
            for (a, b) in [(i, j), (j, i)] {
                let e = dense[a].entry(b).or_insert(0.0);
                *e = e.max(w);
            }
        }
    }
    let neighbors = dense
        .into_iter()
        .map(|m| {
            let mut v: Vec<(usize, f64)> = m.into_iter().collect();
            v.sort_by_key(|e| e.0);
            v
        })
        .collect();
    Ok(AffinityGraph { k, sigma, neighbors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    /// One label per input; labeled inputs keep their original label.
    pub labels: Vec<PseudoLabel>,
    /// Confidence of each label in [0, 1].
    pub confidence: Vec<f64>,
}

impl PropagationResult {
    /// Indices of propagated (not originally labeled) entries whose
    /// confidence reaches `tau`.
    pub fn confident(&self, tau: f64) -> Vec<usize> {
        self.labels
            .iter()
            .zip(&self.confidence)
            .enumerate()
            .filter(|(_, (l, &c))| l.source == LabelSource::Propagated && c >= tau)
            .map(|(i, _)| i)
            .collect()
    }
}

fn check_inputs(embeddings: &[Embedding], labels: &[Option<PseudoLabel>]) -> Result<()> {
    if embeddings.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if labels.iter().all(Option::is_none) {
        return Err(Error::NoLabeledSamples);
    }
    Ok(())
}

fn propagated(label: Gender, confidence: f64) -> PseudoLabel {
    PseudoLabel {
        label,
        score: confidence.clamp(0.0, 1.0),
        source: LabelSource::Propagated,
    }
}

/// Majority vote among the `k_vote` nearest labeled neighbours.
fn nn_vote(embeddings: &[Embedding], labeled: &[(usize, Gender)], i: usize, k_vote: usize) -> (Gender, f64) {
    let mut d: Vec<(f64, usize, Gender)> = labeled
        .iter()
        .map(|&(j, g)| (embeddings[i].cosine_distance(&embeddings[j]), j, g))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let voters = &d[..k_vote.min(d.len())];
    let mut counts = [0usize; NUM_CLASSES];
    for v in voters {
        counts[v.2.index()] += 1;
    }
    let nearest = voters[0].2;
    let best = if counts[0] == counts[1] {
        nearest
    } else if counts[0] > counts[1] {
        Gender::Female
    } else {
        Gender::Male
    };
    (best, counts[best.index()] as f64 / voters.len() as f64)
}

fn labeled_points(labels: &[Option<PseudoLabel>]) -> Vec<(usize, Gender)> {
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| (i, l.label)))
        .collect()
}

fn keep_or(labels: &[Option<PseudoLabel>], i: usize, f: impl FnOnce() -> (Gender, f64)) -> (PseudoLabel, f64) {
    match labels[i] {
        Some(l) => (l, l.confidence()),
        None => {
            let (g, c) = f();
            (propagated(g, c), c)
        }
    }
}

/// Each unlabeled point takes the majority label of its `k_vote` nearest
/// labeled points by cosine distance; confidence is the vote fraction and
/// tied votes go to the single nearest labeled point.
pub fn propagate_nn(embeddings: &[Embedding], labels: &[Option<PseudoLabel>], k_vote: usize) -> Result<PropagationResult> {
    check_inputs(embeddings, labels)?;
    if k_vote == 0 {
        return Err(Error::InvalidArgument("k_vote must be at least 1".into()));
    }
    let labeled = labeled_points(labels);
    let (labels, confidence) = (0..embeddings.len())
        .map(|i| keep_or(labels, i, || nn_vote(embeddings, &labeled, i, k_vote)))
        .unzip();
    Ok(PropagationResult { labels, confidence })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectralMode {
    /// Closed-form graph diffusion `F = (I - alpha S)^-1 Y`.
    Spreading,
    /// Normalized spectral clustering, then a majority vote per cluster.
    ClusterVote,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralParams {
    pub alpha: f64,
    pub clusters: usize,
    /// Vote size for rows that receive no diffused mass or fall in a cluster
    /// without labeled members.
    pub fallback_k_vote: usize,
    pub seed: u64,
}

impl Default for SpectralParams {
    fn default() -> Self {
        SpectralParams {
            alpha: 0.99,
            clusters: 2,
            fallback_k_vote: 5,
            seed: 0,
        }
    }
}

const TIE_REL: f64 = 1e-12;

/// Label spreading or cluster voting over `graph`. Rows the graph cannot
/// decide (no label mass, exact ties, clusters without labeled members) are
/// labeled by [`propagate_nn`] on `embeddings`.
pub fn propagate_spectral(
    embeddings: &[Embedding],
    graph: &AffinityGraph,
    labels: &[Option<PseudoLabel>],
    mode: SpectralMode,
    params: &SpectralParams,
) -> Result<PropagationResult> {
    check_inputs(embeddings, labels)?;
    if graph.n() != embeddings.len() {
        return Err(Error::InvalidArgument(format!(
            "graph has {} nodes for {} embeddings",
            graph.n(),
            embeddings.len()
        )));
    }
    let decided = match mode {
        SpectralMode::Spreading => spread(graph, labels, params.alpha)?,
        SpectralMode::ClusterVote => cluster_vote(graph, labels, params)?,
    };
    let labeled = labeled_points(labels);
    let k_vote = params.fallback_k_vote.max(1);
    let (labels, confidence) = (0..embeddings.len())
        .map(|i| keep_or(labels, i, || decided[i].unwrap_or_else(|| nn_vote(embeddings, &labeled, i, k_vote))))
        .unzip();
    Ok(PropagationResult { labels, confidence })
}

/// Spreading scores `F` (n x 2), without fallback handling.
pub fn spreading_scores(graph: &AffinityGraph, labels: &[Option<PseudoLabel>], alpha: f64) -> Result<DMatrix<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = graph.n();
    let s = graph.normalized_affinity();
    let a = DMatrix::identity(n, n) - s * alpha;
    let mut y = DMatrix::zeros(n, NUM_CLASSES);
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            y[(i, l.label.index())] = 1.0;
        }
    }
    let f = a.lu().solve(&y).ok_or(Error::SingularSystem { alpha })?;
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem { alpha });
    }
    Ok(f)
}

fn spread(graph: &AffinityGraph, labels: &[Option<PseudoLabel>], alpha: f64) -> Result<Vec<Option<(Gender, f64)>>> {
    let f = spreading_scores(graph, labels, alpha)?;
    Ok((0..graph.n())
        .map(|i| {
            let (a, b) = (f[(i, 0)].max(0.0), f[(i, 1)].max(0.0));
            let mass = a + b;
            if !(mass > 0.0) || (a - b).abs() <= TIE_REL * mass {
                return None;
            }
            let g = if a > b { Gender::Female } else { Gender::Male };
            Some((g, a.max(b) / mass))
        })
        .collect())
}

/// Rows of the leading eigenvectors of the normalized affinity, each scaled
/// to unit length.
pub fn spectral_coordinates(graph: &AffinityGraph, dims: usize) -> Vec<Vec<f64>> {
    let n = graph.n();
    let eig = SymmetricEigen::new(graph.normalized_affinity());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let dims = dims.min(n);
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = order[..dims].iter().map(|&c| eig.eigenvectors[(i, c)]).collect();
            let norm = l2(&row);
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
            row
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; best of several restarts.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    const RESTARTS: usize = 10;
    const MAX_ITER: usize = 100;
    let n = points.len();
    let k = k.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..RESTARTS {
        let mut centers = vec![points[rng.random_range(0..n)].clone()];
        while centers.len() < k {
            let d: Vec<f64> = points
                .iter()
                .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d.iter().sum();
            let next = if total > 0.0 {
                let mut r = rng.random::<f64>() * total;
                d.iter()
                    .position(|&v| {
                        r -= v;
                        r < 0.0
                    })
                    .unwrap_or(n - 1)
            } else {
                rng.random_range(0..n)
            };
            centers.push(points[next].clone());
        }
        let mut assign = vec![0usize; n];
        for iter in 0..MAX_ITER {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let c = (0..k)
                    .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                    .unwrap_or(0);
                if c != assign[i] || iter == 0 {
                    changed |= c != assign[i];
                    assign[i] = c;
                }
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for (d, v) in center.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                }
            }
            if !changed && iter > 0 {
                break;
            }
        }
        let inertia: f64 = points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centers[a])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

fn cluster_vote(
    graph: &AffinityGraph,
    labels: &[Option<PseudoLabel>],
    params: &SpectralParams,
) -> Result<Vec<Option<(Gender, f64)>>> {
    let labeled = labeled_points(labels);
    for g in Gender::ALL {
        if !labeled.iter().any(|&(_, l)| l == g) {
            return Err(Error::InsufficientData(format!(
                "cluster voting needs at least one {g} labeled sample"
            )));
        }
    }
    if params.clusters == 0 {
        return Err(Error::InvalidArgument("cluster count must be at least 1".into()));
    }
    let coords = spectral_coordinates(graph, params.clusters);
    let assign = kmeans(&coords, params.clusters, params.seed);
    let mut votes = vec![[0usize; NUM_CLASSES]; params.clusters];
    for &(i, g) in &labeled {
        votes[assign[i]][g.index()] += 1;
    }
    Ok(assign
        .iter()
        .map(|&c| {
            let [f, m] = votes[c];
            if f == m {
                return None;
            }
            let g = if f > m { Gender::Female } else { Gender::Male };
            Some((g, f.max(m) as f64 / (f + m) as f64))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngleAccuracy {
    pub angle: ViewAngle,
    pub correct: usize,
    pub total: usize,
}

impl AngleAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoLabelReport {
    /// Ascending by angle.
    pub per_angle: Vec<AngleAccuracy>,
    /// Mean of per-angle accuracies over non-frontal angles.
    pub mean_non_front: f64,
}

/// Per-angle accuracy of `labels` against `truth`. Entries without ground
/// truth or angle are skipped. The frontal angle is reported but excluded
/// from the mean since it is the labeled source.
pub fn pseudo_label_report(
    labels: &[PseudoLabel],
    truth: &[Option<Gender>],
    angles: &[Option<ViewAngle>],
) -> PseudoLabelReport {
    let mut by_angle: std::collections::BTreeMap<ViewAngle, (usize, usize)> = Default::default();
    for ((l, t), a) in labels.iter().zip(truth).zip(angles) {
        let (Some(t), Some(a)) = (t, a) else { continue };
        let e = by_angle.entry(*a).or_default();
        e.1 += 1;
        if l.label == *t {
            e.0 += 1;
        }
    }
    let per_angle: Vec<AngleAccuracy> = by_angle
        .into_iter()
        .map(|(angle, (correct, total))| AngleAccuracy { angle, correct, total })
        .collect();
    let non_front: Vec<f64> = per_angle.iter().filter(|a| !a.angle.is_front()).map(|a| a.accuracy()).collect();
    let mean_non_front = if non_front.is_empty() {
        0.0
    } else {
        non_front.iter().sum::<f64>() / non_front.len() as f64
    };
    PseudoLabelReport {
        per_angle,
        mean_non_front,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::tests::upright;
    use crate::skeleton::{normalize_sequence, AnchorMode, SequenceMeta};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn emb(id: usize, v: &[f64]) -> Embedding {
        Embedding::normalized(id.to_string(), v.to_vec()).unwrap()
    }

    fn truth(g: Gender) -> Option<PseudoLabel> {
        Some(PseudoLabel::truth(g))
    }

    #[test]
    fn identical_embeddings_give_unit_weights() {
        let e: Vec<Embedding> = (0..3).map(|i| emb(i, &[1.0, 0.0])).collect();
        let g = build_knn_graph(&e, 2, Bandwidth::Auto).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.weight(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn orthogonal_clusters_have_no_cross_edges() {
        let mut e: Vec<Embedding> = (0..4).map(|i| emb(i, &[1.0, 0.0])).collect();
        e.extend((4..8).map(|i| emb(i, &[0.0, 1.0])));
        let g = build_knn_graph(&e, 3, Bandwidth::Fixed(0.5)).unwrap();
        for i in 0..8 {
            assert!(!g.neighbors(i).is_empty());
            for &(j, _) in g.neighbors(i) {
                assert_eq!(i < 4, j < 4);
            }
        }
    }

    #[test]
    fn too_few_samples() {
        let e: Vec<Embedding> = (0..3).map(|i| emb(i, &[1.0, i as f64])).collect();
        assert!(matches!(
            build_knn_graph(&e, 3, Bandwidth::Auto),
            Err(Error::TooFewSamples { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn nn_examples() {
        let e = vec![emb(0, &[1.0, 0.0]), emb(1, &[1.0, 0.1]), emb(2, &[1.0, -0.2]), emb(3, &[0.0, 1.0])];
        let labels = vec![truth(Gender::Male), None, None, None];
        let r = propagate_nn(&e, &labels, 3).unwrap();
        assert!(r.labels.iter().all(|l| l.label == Gender::Male));
        assert_eq!(r.labels[0], PseudoLabel::truth(Gender::Male));
        assert_eq!(r.labels[1].source, LabelSource::Propagated);
        assert!(matches!(propagate_nn(&e, &[None; 4], 1), Err(Error::NoLabeledSamples)));
    }

    #[test]
    fn nn_vote_tie_goes_to_nearest() {
        let e = vec![emb(0, &[1.0, 0.0]), emb(1, &[1.0, 0.5]), emb(2, &[1.0, 0.05])];
        let labels = vec![truth(Gender::Female), truth(Gender::Male), None];
        let r = propagate_nn(&e, &labels, 2).unwrap();
        assert_eq!(r.labels[2].label, Gender::Female);
        assert_eq!(r.confidence[2], 0.5);
    }

    fn two_blocks() -> (Vec<Embedding>, Vec<Option<PseudoLabel>>) {
        let mut e: Vec<Embedding> = (0..5).map(|i| emb(i, &[1.0, 0.01 * i as f64, 0.0])).collect();
        e.extend((5..10).map(|i| emb(i, &[0.0, 0.01 * i as f64, 1.0])));
        let mut labels = vec![None; 10];
        labels[0] = truth(Gender::Female);
        labels[7] = truth(Gender::Male);
        (e, labels)
    }

    #[test]
    fn spreading_labels_components_by_their_source() {
        let (e, labels) = two_blocks();
        let g = build_knn_graph(&e, 3, Bandwidth::Auto).unwrap();
        let r = propagate_spectral(&e, &g, &labels, SpectralMode::Spreading, &SpectralParams::default()).unwrap();
        for i in 0..10 {
            assert_eq!(r.labels[i].label, if i < 5 { Gender::Female } else { Gender::Male }, "{i}");
            assert_abs_diff_eq!(r.confidence[i], 1.0, epsilon = 1e-12);
        }
        let r = propagate_spectral(&e, &g, &labels, SpectralMode::ClusterVote, &SpectralParams::default()).unwrap();
        for i in 0..10 {
            assert_eq!(r.labels[i].label, if i < 5 { Gender::Female } else { Gender::Male }, "{i}");
        }
    }

    #[test]
    fn spreading_single_source_covers_connected_graph() {
        let e: Vec<Embedding> = (0..6).map(|i| emb(i, &[1.0, 0.1 * i as f64])).collect();
        let g = build_knn_graph(&e, 5, Bandwidth::Auto).unwrap();
        let mut labels = vec![None; 6];
        labels[2] = truth(Gender::Male);
        let r = propagate_spectral(&e, &g, &labels, SpectralMode::Spreading, &SpectralParams::default()).unwrap();
        assert!(r.labels.iter().all(|l| l.label == Gender::Male));
    }

    #[test]
    fn spreading_small_alpha_limit() {
        // with alpha -> 0 only graph neighbours of labeled rows receive mass,
        // and they take the label of the heavier labeled neighbour; every other
        // row falls back to nearest-neighbour voting
        let mut e: Vec<Embedding> = (0..6).map(|i| emb(i, &[1.0, 0.05 * i as f64, 0.0])).collect();
        e.extend((6..12).map(|i| emb(i, &[0.0, 0.05 * i as f64, 1.0])));
        let mut labels = vec![None; 12];
        labels[0] = truth(Gender::Female);
        labels[1] = truth(Gender::Male);
        let g = build_knn_graph(&e, 2, Bandwidth::Auto).unwrap();
        let params = SpectralParams { alpha: 1e-6, fallback_k_vote: 1, ..Default::default() };
        let r = propagate_spectral(&e, &g, &labels, SpectralMode::Spreading, &params).unwrap();
        let nn = propagate_nn(&e, &labels, 1).unwrap();
        let s = g.normalized_affinity();
        for i in 2..12 {
            let (f, m) = (s[(i, 0)], s[(i, 1)]);
            let expected = if f + m == 0.0 || f == m {
                nn.labels[i].label
            } else if f > m {
                Gender::Female
            } else {
                Gender::Male
            };
            assert_eq!(r.labels[i].label, expected, "{i}");
        }
    }

    #[test]
    fn spreading_rejects_bad_alpha() {
        let (e, labels) = two_blocks();
        let g = build_knn_graph(&e, 3, Bandwidth::Auto).unwrap();
        let p = SpectralParams { alpha: 1.0, ..Default::default() };
        assert!(propagate_spectral(&e, &g, &labels, SpectralMode::Spreading, &p).is_err());
    }

    #[test]
    fn cluster_vote_needs_both_classes() {
        let (e, mut labels) = two_blocks();
        labels[7] = None;
        let g = build_knn_graph(&e, 3, Bandwidth::Auto).unwrap();
        let r = propagate_spectral(&e, &g, &labels, SpectralMode::ClusterVote, &SpectralParams::default());
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn report_counts() {
        let a = |d| Some(ViewAngle::new(d).unwrap());
        let f = PseudoLabel::truth(Gender::Female);
        let m = PseudoLabel::truth(Gender::Male);
        let labels = vec![f, f, f, f, m, f];
        let truth = vec![Some(Gender::Female); 6];
        let angles = vec![a(90), a(90), a(90), a(90), a(0), a(18)];
        let r = pseudo_label_report(&labels, &truth, &angles);
        assert_eq!(r.per_angle.len(), 3);
        assert_eq!(r.per_angle[0].accuracy(), 0.0);
        assert_eq!(r.per_angle[1].accuracy(), 1.0);
        assert_eq!(r.per_angle[2].accuracy(), 1.0);
        assert_eq!(r.mean_non_front, 1.0);

        let labels = vec![f, f, m, f];
        let angles = vec![a(90); 4];
        let r = pseudo_label_report(&labels, &truth[..4], &angles);
        assert_eq!(r.per_angle[0].accuracy(), 0.75);
    }

    fn periodic_sequence(frames: usize, shift: usize) -> SkeletonSequence {
        let period = 20;
        let fr = (0..frames)
            .map(|t| {
                let ph = 2.0 * std::f64::consts::PI * ((t + shift) % period) as f64 / period as f64;
                let base = upright(0.0);
                base.map(|j, p| {
                    let mut p = *p;
                    if j >= 7 {
                        p.x += 0.1 * ph.sin() * if j % 2 == 0 { 1.0 } else { -1.0 };
                        p.y += 0.05 * ph.cos();
                    }
                    p
                })
            })
            .collect();
        let seq = SkeletonSequence::new(fr, 30.0, SequenceMeta::default());
        normalize_sequence(&seq, AnchorMode::PerFrame).unwrap()
    }

    #[test]
    fn handcrafted_contract() {
        let emb = HandcraftedEmbedder::default();
        let a = emb.embed("a", &periodic_sequence(60, 0)).unwrap();
        assert_eq!(a.dim(), HANDCRAFTED_DIM);
        assert_eq!(HANDCRAFTED_DIM, 86);
        assert_abs_diff_eq!(l2(a.vector()), 1.0, epsilon = 1e-12);
        let again = emb.embed("a", &periodic_sequence(60, 0)).unwrap();
        assert_eq!(a, again);
        let shifted = emb.embed("b", &periodic_sequence(60, 20)).unwrap();
        assert!(a.cosine(&shifted) >= 0.99);

        let raw = SkeletonSequence::new(vec![upright(0.0); 5], 30.0, SequenceMeta::default());
        assert!(emb.embed("raw", &raw).is_err());
    }

    #[test]
    fn handcrafted_constant_sequence_has_zero_spread() {
        let seq = SkeletonSequence::new(vec![upright(0.0); 10], 30.0, SequenceMeta::default());
        let seq = normalize_sequence(&seq, AnchorMode::PerFrame).unwrap();
        let f = HandcraftedEmbedder { lateral_weight: 1.0 }.features(&seq).unwrap();
        assert!(f[34..68].iter().all(|&v| v.abs() < 1e-12));
        assert!(f[76..80].iter().all(|&v| v.abs() < 1e-12));
        assert!(f[80..].iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn dft_of_pure_tone() {
        let x: Vec<f64> = (0..60).map(|t| (2.0 * std::f64::consts::PI * 3.0 * t as f64 / 60.0).cos()).collect();
        let m = dft_magnitudes(&x);
        assert_abs_diff_eq!(m[2], 0.5, epsilon = 1e-12);
        assert!(m.iter().enumerate().filter(|(k, _)| *k != 2).all(|(_, v)| *v < 1e-12));
    }

    #[test]
    fn cache_roundtrip() {
        let e = vec![emb(0, &[0.3, 0.4, 0.1]), emb(1, &[1.0, 2.0, 3.0])];
        let text = format_embeddings(&e);
        assert!(text.starts_with("# gaitgender-embeddings v1 n=2 d=3\n"));
        assert_eq!(parse_embeddings(&text, Path::new("e")).unwrap(), e);
        let bad = text.replace("n=2", "n=3");
        assert!(parse_embeddings(&bad, Path::new("e")).is_err());
        let pre = PrecomputedEmbedder::new(e.clone());
        let dummy = SkeletonSequence::new(vec![], 30.0, SequenceMeta::default());
        assert_eq!(pre.embed("1", &dummy).unwrap(), e[1]);
        assert!(matches!(pre.embed("9", &dummy), Err(Error::EmbedderUnavailable(_))));
    }

    fn arb_points() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Option<bool>>)> {
        (3usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), n),
                prop::collection::vec(prop::option::weighted(0.3, any::<bool>()), n),
            )
        })
    }

    fn to_inputs(pts: &[Vec<f64>], lab: &[Option<bool>]) -> Option<(Vec<Embedding>, Vec<Option<PseudoLabel>>)> {
        let e: Option<Vec<Embedding>> = pts
            .iter()
            .enumerate()
            .map(|(i, v)| Embedding::normalized(i.to_string(), v.clone()).ok())
            .collect();
        let labels = lab
            .iter()
            .map(|l| l.map(|f| PseudoLabel::truth(if f { Gender::Female } else { Gender::Male })))
            .collect();
        e.map(|e| (e, labels))
    }

    proptest! {
        #[test]
        fn graph_is_symmetric_and_preserves_labels((pts, lab) in arb_points(), k in 1usize..5) {
            let Some((e, labels)) = to_inputs(&pts, &lab) else { return Ok(()) };
            prop_assume!(labels.iter().any(Option::is_some) && e.len() > k);
            let g = build_knn_graph(&e, k, Bandwidth::Auto).unwrap();
            for i in 0..g.n() {
                prop_assert!(g.neighbors(i).len() >= 1);
                prop_assert_eq!(g.weight(i, i), 0.0);
                for &(j, w) in g.neighbors(i) {
                    prop_assert_eq!(w, g.weight(j, i));
                }
            }
            for mode in [SpectralMode::Spreading] {
                let r = propagate_spectral(&e, &g, &labels, mode, &SpectralParams::default()).unwrap();
                for (i, l) in labels.iter().enumerate() {
                    if let Some(l) = l { prop_assert_eq!(r.labels[i], *l); }
                }
                prop_assert!(r.confidence.iter().all(|c| (0.0..=1.0).contains(c)));
            }
        }

        #[test]
        fn nn_is_permutation_equivariant((pts, lab) in arb_points(), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            let Some((e, labels)) = to_inputs(&pts, &lab) else { return Ok(()) };
            prop_assume!(labels.iter().any(Option::is_some));
            let r = propagate_nn(&e, &labels, 3).unwrap();
            let mut perm: Vec<usize> = (0..e.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pe: Vec<Embedding> = perm.iter().map(|&i| e[i].clone()).collect();
            let pl: Vec<Option<PseudoLabel>> = perm.iter().map(|&i| labels[i]).collect();
            let pr = propagate_nn(&pe, &pl, 3).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                prop_assert_eq!(pr.labels[new], r.labels[old]);
            }
        }
    }
}
