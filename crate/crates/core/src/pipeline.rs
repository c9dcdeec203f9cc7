//! Manifest-driven pipeline stages shared by the command-line tool and the
//! test suites. Every artifact lives next to the manifest:
//!
//! ```text
//! manifest.tsv
//! normalized/<id>.csv      normalized pose sequences
//! tssi/<id>.npy            TSSI tensors, float32, shape (33, frames, 3)
//! embeddings.tsv           gait embeddings in manifest order
//! pseudo_labels.tsv        per-angle accuracy of propagated labels
//! model.bin, model.log.tsv trained classifier and its epoch log
//! metrics.tsv              evaluation table
//! report.tsv               collected tables
//! ```
//!
//! Stages that rewrite the manifest hold a [`ManifestLock`] while doing so.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PipelineConfig, PropagationMode};
use crate::error::{Error, Result};
use crate::face::{label_dataset, FaceAnalyzer, FixtureAnalyzer, HttpFaceAnalyzer, LabelingSummary};
use crate::labels::{Gender, LabelSource, PseudoLabel};
use crate::manifest::{manifest_dir, write_atomic, Manifest, ManifestEntry, ManifestLock, Split};
use crate::posefile::{load_pose_sequence, write_pose_csv};
use crate::propagation::{
    build_knn_graph, propagate_nn, propagate_spectral, pseudo_label_report, read_embeddings, write_embeddings,
    Embedding, GaitEmbedder, PropagationResult, PseudoLabelReport,
};
use crate::seed::derive_seed;
use crate::skeleton::{
    normalize_sequence, validate_sequence, SkeletonSequence, ValidationFlag, ValidationThresholds, Variation,
    ViewAngle,
};
use crate::train::{
    evaluate_f1, make_balanced_sampler, train_semisupervised, GroupBy, Metrics, ModelHandle, PropagatedSample,
    Sample, TrainConfig,
};
use crate::tssi::{coco17_traversal, encode_tssi, TssiImage, CHANNELS};

pub const NORMALIZED_DIR: &str = "normalized";
pub const TSSI_DIR: &str = "tssi";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";
pub const PSEUDO_LABEL_FILE: &str = "pseudo_labels.tsv";
pub const DEFAULT_MODEL: &str = "model.bin";
pub const DEFAULT_METRICS: &str = "metrics.tsv";
pub const REPORT_FILE: &str = "report.tsv";
pub const DEFAULT_FACE_DIR: &str = "faces";

const METRICS_MAGIC: &str = "# gaitgender-metrics v1";

/// A manifest and the directory its artifacts live in.
#[derive(Debug, Clone)]
pub struct Project {
    manifest_path: PathBuf,
    dir: PathBuf,
}

impl Project {
    pub fn new(manifest_path: impl Into<PathBuf>) -> Self {
        let manifest_path = manifest_path.into();
        let dir = manifest_dir(&manifest_path);
        Project { manifest_path, dir }
    }

    pub fn manifest_path(&self) -> &Path {
        &self.manifest_path
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        let rel = rel.as_ref();
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.dir.join(rel)
        }
    }

    pub fn load(&self) -> Result<Manifest> {
        if !self.manifest_path.exists() {
            return Err(Error::MissingArtifact {
                what: "manifest".into(),
                path: self.manifest_path.clone(),
                stage: "synth or ingest",
            });
        }
        Manifest::read(&self.manifest_path)
    }

    pub fn normalized_path(&self, sequence_id: &str) -> PathBuf {
        self.dir.join(NORMALIZED_DIR).join(format!("{sequence_id}.csv"))
    }

    pub fn tssi_path(&self, sequence_id: &str) -> PathBuf {
        self.dir.join(TSSI_DIR).join(format!("{sequence_id}.npy"))
    }

    /// Normalized sequence of `entry` with its manifest metadata attached.
    pub fn load_normalized(&self, entry: &ManifestEntry) -> Result<SkeletonSequence> {
        let path = self.normalized_path(&entry.sequence_id);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                what: format!("normalized sequence for {}", entry.sequence_id),
                path,
                stage: "normalize",
            });
        }
        let mut seq = load_pose_sequence(&path)?;
        if !seq.normalized {
            return Err(Error::parse(&path, 1, "file is not marked as normalized"));
        }
        attach_meta(&mut seq, entry);
        Ok(seq)
    }
}

fn attach_meta(seq: &mut SkeletonSequence, entry: &ManifestEntry) {
    seq.meta.subject_id = entry.subject_id.clone();
    seq.meta.view_angle = entry.view_angle;
    seq.meta.variation = entry.variation;
    seq.meta.source_video = entry.source_video.clone();
}

fn root_seed(manifest: &Manifest, cfg: &PipelineConfig) -> u64 {
    cfg.seed.unwrap_or(manifest.seed)
}

/// Metadata carried by CASIA-B style file names such as `001-nm-01-090`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CasiaName {
    pub subject: String,
    pub variation: Variation,
    pub take: u32,
    pub angle: ViewAngle,
}

pub fn parse_casia_name(stem: &str) -> Option<CasiaName> {
    let parts: Vec<&str> = stem.split('-').collect();
    let [subject, cond, take, angle] = parts[..] else { return None };
    if subject.is_empty() || !subject.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let variation = match cond.to_ascii_lowercase().as_str() {
        "nm" => Variation::NM,
        "bg" => Variation::BG,
        "cl" => Variation::CL,
        _ => return None,
    };
    Some(CasiaName {
        subject: subject.to_string(),
        variation,
        take: take.parse().ok()?,
        angle: ViewAngle::new(angle.parse().ok()?).ok()?,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub added: usize,
    pub checked: usize,
    pub flagged: Vec<(String, Vec<ValidationFlag>)>,
    pub train_subjects: usize,
    pub val_subjects: usize,
}

fn pose_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("csv" | "json")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Adds the pose files under `pose_dir` (when given) to the manifest,
/// creating it if needed, checks that every pose file parses, and assigns
/// splits to subjects that have none yet. A seed in `cfg` is recorded as the
/// manifest's root seed.
pub fn ingest(project: &Project, cfg: &PipelineConfig, pose_dir: Option<&Path>) -> Result<IngestReport> {
    let _lock = ManifestLock::acquire(project.manifest_path())?;
    let mut manifest = match (project.manifest_path().exists(), pose_dir) {
        (true, _) => project.load()?,
        (false, Some(_)) => Manifest::default(),
        (false, None) => return Err(project.load().unwrap_err()),
    };
    if let Some(seed) = cfg.seed {
        manifest.seed = seed;
    }
    let mut report = IngestReport::default();
    if let Some(dir) = pose_dir {
        let known: BTreeSet<String> = manifest.entries.iter().map(|e| e.sequence_id.clone()).collect();
        for path in pose_files(dir)? {
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let id = stem.trim_end_matches(".pose").to_string();
            if known.contains(&id) {
                continue;
            }
            let rel = path
                .strip_prefix(project.dir())
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| std::fs::canonicalize(&path).unwrap_or(path.clone()));
            let mut e = ManifestEntry::new(&id, rel);
            e.source_video = id.clone();
            if let Some(name) = parse_casia_name(&id) {
                e.subject_id = name.subject;
                e.variation = name.variation;
                e.view_angle = Some(name.angle);
            }
            manifest.entries.push(e);
            report.added += 1;
        }
        manifest = Manifest::new(manifest.seed, manifest.entries)?;
    }
    let th = ValidationThresholds::default();
    for e in &manifest.entries {
        let path = project.path(&e.pose_path);
        let seq = load_pose_sequence(&path).map_err(|err| err.context(format!("sequence {}", e.sequence_id)))?;
        let v = validate_sequence(&seq, &th);
        if !v.is_clean() {
            log::warn!("{}: quality flags {:?}", e.sequence_id, v.flags);
            report.flagged.push((e.sequence_id.clone(), v.flags));
        }
        report.checked += 1;
    }
    let seed = manifest.seed;
    (report.train_subjects, report.val_subjects) = assign_splits(&mut manifest, cfg.val_fraction, seed);
    manifest.write(project.manifest_path())?;
    Ok(report)
}

fn subject_key(e: &ManifestEntry) -> String {
    if e.subject_id.is_empty() {
        e.sequence_id.clone()
    } else {
        e.subject_id.clone()
    }
}

/// Splits subjects whose entries are all UNASSIGNED into TRAIN and VAL.
/// Subjects are stratified by ground truth when it is known, so both splits
/// keep the class mix. Returns the number of newly assigned (train, val)
/// subjects.
pub fn assign_splits(manifest: &mut Manifest, val_fraction: f64, seed: u64) -> (usize, usize) {
    let mut assigned = BTreeSet::new();
    let mut truth: BTreeMap<String, Option<Gender>> = BTreeMap::new();
    for e in &manifest.entries {
        let key = subject_key(e);
        if e.split != Split::Unassigned {
            assigned.insert(key.clone());
        }
        truth.entry(key).or_insert(e.truth);
    }
    let mut strata: BTreeMap<Option<usize>, Vec<String>> = BTreeMap::new();
    for (subject, t) in truth.into_iter().filter(|(s, _)| !assigned.contains(s)) {
        strata.entry(t.map(Gender::index)).or_default().push(subject);
    }
    let mut val = BTreeSet::new();
    let mut n_train = 0;
    for (i, (_, mut subjects)) in strata.into_iter().enumerate() {
        subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5b, i as u64])));
        let k = (val_fraction * subjects.len() as f64).round() as usize;
        n_train += subjects.len() - k;
        val.extend(subjects.into_iter().take(k));
    }
    for e in manifest.entries.iter_mut().filter(|e| e.split == Split::Unassigned) {
        let key = subject_key(e);
        if !assigned.contains(&key) {
            e.split = if val.contains(&key) { Split::Val } else { Split::Train };
        }
    }
    (n_train, val.len())
}

/// Where front-view labels come from.
#[derive(Debug, Clone)]
pub enum FaceSource {
    Fixture(PathBuf),
    Http { endpoint: String, timeout: Duration },
    /// Copy the ground-truth column, for experiments with true front labels.
    Truth,
}

impl FaceSource {
    /// An explicit fixture directory wins, then a configured endpoint, then
    /// the `faces/` directory next to the manifest.
    pub fn resolve(project: &Project, cfg: &PipelineConfig, fixture_dir: Option<&Path>) -> FaceSource {
        match (fixture_dir, &cfg.face_endpoint) {
            (Some(d), _) => FaceSource::Fixture(d.to_path_buf()),
            (None, Some(url)) => FaceSource::Http {
                endpoint: url.clone(),
                timeout: Duration::from_secs_f64(cfg.face_timeout_s),
            },
            (None, None) => FaceSource::Fixture(project.path(DEFAULT_FACE_DIR)),
        }
    }
}

/// Labels every front-view entry from `source`.
pub fn annotate_faces(project: &Project, cfg: &PipelineConfig, source: &FaceSource) -> Result<LabelingSummary> {
    let _lock = ManifestLock::acquire(project.manifest_path())?;
    let mut manifest = project.load()?;
    let summary = match source {
        FaceSource::Truth => {
            let mut s = LabelingSummary::default();
            for e in manifest.entries.iter_mut() {
                if !e.view_angle.is_some_and(ViewAngle::is_front) {
                    s.skipped_non_front += 1;
                    continue;
                }
                let t = e.truth.ok_or_else(|| {
                    Error::InvalidArgument(format!("{} has no ground truth to copy", e.sequence_id))
                })?;
                e.label = Some(PseudoLabel::truth(t));
                s.labeled += 1;
            }
            s
        }
        FaceSource::Fixture(dir) => label_dataset(&mut manifest, &FixtureAnalyzer::new(dir), &cfg.face),
        FaceSource::Http { endpoint, timeout } => {
            let analyzer: Box<dyn FaceAnalyzer> = Box::new(HttpFaceAnalyzer::new(endpoint.clone(), *timeout)?);
            label_dataset(&mut manifest, analyzer.as_ref(), &cfg.face)
        }
    };
    manifest.write(project.manifest_path())?;
    Ok(summary)
}

/// Writes `normalized/<id>.csv` for every entry.
pub fn normalize(project: &Project, cfg: &PipelineConfig) -> Result<usize> {
    let manifest = project.load()?;
    for e in &manifest.entries {
        let run = || -> Result<()> {
            let mut seq = load_pose_sequence(&project.path(&e.pose_path))?;
            if !seq.normalized {
                seq = normalize_sequence(&seq, cfg.anchor_mode)?;
            }
            write_pose_csv(&project.normalized_path(&e.sequence_id), &seq)
        };
        run().map_err(|err| err.context(format!("sequence {}", e.sequence_id)))?;
    }
    Ok(manifest.entries.len())
}

pub fn write_tssi_npy(path: &Path, img: &TssiImage) -> Result<()> {
    use npyz::WriterBuilder;
    let mut buf = Cursor::new(Vec::new());
    let shape = [img.rows as u64, img.steps as u64, CHANNELS as u64];
    let write = |buf: &mut Cursor<Vec<u8>>| -> std::io::Result<()> {
        let mut w = npyz::WriteOptions::<f32>::new()
            .default_dtype()
            .shape(&shape)
            .writer(buf)
            .begin_nd()?;
        w.extend(img.data.iter().map(|&v| v as f32))?;
        w.finish()
    };
    write(&mut buf).map_err(|e| Error::io(path, e))?;
    write_atomic(path, &buf.into_inner())
}

pub fn read_tssi_npy(path: &Path) -> Result<TssiImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let npy = npyz::NpyFile::new(&bytes[..]).map_err(|e| Error::io(path, e))?;
    let shape = npy.shape().to_vec();
    if shape.len() != 3 || shape[2] != CHANNELS as u64 {
        return Err(Error::parse(path, 0, format!("expected shape (rows, steps, 3), found {shape:?}")));
    }
    let data: Vec<f32> = npy.into_vec().map_err(|e| Error::io(path, e))?;
    Ok(TssiImage {
        rows: shape[0] as usize,
        steps: shape[1] as usize,
        data: data.into_iter().map(f64::from).collect(),
    })
}

/// Writes `tssi/<id>.npy` for every entry.
pub fn encode(project: &Project, cfg: &PipelineConfig) -> Result<usize> {
    let manifest = project.load()?;
    let order = coco17_traversal();
    for e in &manifest.entries {
        let seq = project.load_normalized(e)?;
        let img = encode_tssi(&seq, &order, cfg.train.frames)
            .map_err(|err| err.context(format!("sequence {}", e.sequence_id)))?;
        write_tssi_npy(&project.tssi_path(&e.sequence_id), &img)?;
    }
    Ok(manifest.entries.len())
}

/// Writes `embeddings.tsv` with one handcrafted embedding per entry.
pub fn embed(project: &Project, cfg: &PipelineConfig) -> Result<usize> {
    let manifest = project.load()?;
    let embeddings = manifest
        .entries
        .iter()
        .map(|e| {
            let seq = project.load_normalized(e)?;
            cfg.embedding
                .embed(&e.sequence_id, &seq)
                .map_err(|err| err.context(format!("sequence {}", e.sequence_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    write_embeddings(&project.path(EMBEDDINGS_FILE), &embeddings)?;
    Ok(embeddings.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagateReport {
    pub pool: usize,
    pub sources: usize,
    pub propagated: usize,
    pub confident: usize,
    /// Spreading parameter actually used after any retries.
    pub alpha: f64,
    /// Present when the pool carries ground truth.
    pub accuracy: Option<PseudoLabelReport>,
}

fn run_propagation(
    embeddings: &[Embedding],
    labels: &[Option<PseudoLabel>],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(PropagationResult, f64)> {
    let p = &cfg.propagation;
    match p.mode {
        PropagationMode::Nn => Ok((propagate_nn(embeddings, labels, p.k_vote)?, p.params.alpha)),
        PropagationMode::Spectral => {
            let graph = build_knn_graph(embeddings, cfg.knn_k.min(embeddings.len().saturating_sub(1)).max(1), cfg.knn_sigma)?;
            let mut params = p.params;
            params.seed = derive_seed(seed, &[0x9c]);
            for _ in 0..4 {
                match propagate_spectral(embeddings, &graph, labels, p.spectral, &params) {
                    Err(Error::SingularSystem { alpha }) => {
                        params.alpha = 1.0 - 2.0 * (1.0 - alpha);
                        log::warn!("spreading with alpha {alpha} is ill-conditioned, retrying with {}", params.alpha);
                    }
                    other => return other.map(|r| (r, params.alpha)),
                }
            }
            Err(Error::SingularSystem { alpha: params.alpha })
        }
    }
}

/// Propagates TRUE and FACE labels to the unlabeled non-VAL entries over the
/// embedding graph and stores the results as PROPAGATED labels. Earlier
/// PROPAGATED labels are discarded first, so reruns start from the same state.
pub fn propagate(project: &Project, cfg: &PipelineConfig) -> Result<PropagateReport> {
    let _lock = ManifestLock::acquire(project.manifest_path())?;
    let mut manifest = project.load()?;
    let emb_path = project.path(EMBEDDINGS_FILE);
    if !emb_path.exists() {
        return Err(Error::MissingArtifact {
            what: "gait embeddings".into(),
            path: emb_path,
            stage: "embed",
        });
    }
    let by_id: HashMap<String, Embedding> = read_embeddings(&emb_path)?
        .into_iter()
        .map(|e| (e.sequence_id.clone(), e))
        .collect();
    let pool: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].split != Split::Val)
        .collect();
    let embeddings = pool
        .iter()
        .map(|&i| {
            let id = &manifest.entries[i].sequence_id;
            by_id.get(id).cloned().ok_or_else(|| Error::MissingArtifact {
                what: format!("embedding for {id}"),
                path: emb_path.clone(),
                stage: "embed",
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Option<PseudoLabel>> = pool
        .iter()
        .map(|&i| manifest.entries[i].label.filter(|l| l.source != LabelSource::Propagated))
        .collect();
    let sources = labels.iter().flatten().count();
    let seed = root_seed(&manifest, cfg);
    let (result, alpha) = run_propagation(&embeddings, &labels, cfg, seed)?;
    for (&i, l) in pool.iter().zip(&result.labels) {
        manifest.entries[i].label = Some(*l);
    }
    let truth: Vec<Option<Gender>> = pool.iter().map(|&i| manifest.entries[i].truth).collect();
    let accuracy = truth.iter().any(Option::is_some).then(|| {
        let angles: Vec<Option<ViewAngle>> = pool.iter().map(|&i| manifest.entries[i].view_angle).collect();
        pseudo_label_report(&result.labels, &truth, &angles)
    });
    if let Some(acc) = &accuracy {
        write_atomic(&project.path(PSEUDO_LABEL_FILE), pseudo_label_table(acc).as_bytes())?;
    }
    manifest.write(project.manifest_path())?;
    Ok(PropagateReport {
        pool: pool.len(),
        sources,
        propagated: pool.len() - sources,
        confident: result.confident(cfg.propagation.tau).len(),
        alpha,
        accuracy,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Per-angle pseudo-label accuracy in percent. The frontal column is left
/// blank because it is the labeled source.
pub fn pseudo_label_table(r: &PseudoLabelReport) -> String {
    let mut head = String::from("method");
    let mut row = String::from("propagated");
    for a in ViewAngle::all() {
        let _ = write!(head, "\t{a}");
        let acc = r
            .per_angle
            .iter()
            .find(|x| x.angle == a && !a.is_front() && x.total > 0)
            .map(|x| x.accuracy());
        let _ = write!(row, "\t{}", pct(acc));
    }
    format!("{head}\tMean\n{row}\t{}\n", pct(Some(r.mean_non_front)))
}

fn sample_of(project: &Project, e: &ManifestEntry, label: Gender) -> Result<Sample> {
    Ok(Sample {
        id: e.sequence_id.clone(),
        seq: project.load_normalized(e)?,
        label,
        truth: e.truth,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Train on front-view TRUE/FACE labels only.
    pub front_only: bool,
    pub model_path: PathBuf,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            front_only: false,
            model_path: PathBuf::from(DEFAULT_MODEL),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub front: usize,
    pub propagated: usize,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub model_path: PathBuf,
    pub log_path: PathBuf,
}

/// Epochs needed to spend `steps` optimizer steps on a set with these labels.
pub fn epochs_for_steps(labels: &[Gender], cfg: &TrainConfig, steps: usize) -> Result<usize> {
    let per_epoch = make_balanced_sampler(labels, cfg.balance, cfg.seed)?.epoch(0).len();
    let batches = per_epoch.div_ceil(cfg.batch_size).max(1);
    Ok(steps.div_ceil(batches))
}

/// Trains on labeled non-VAL entries: TRUE and FACE labels plus, unless
/// `front_only`, PROPAGATED labels whose confidence reaches the configured
/// threshold. VAL entries with ground truth drive early stopping when a
/// patience is configured.
pub fn train(project: &Project, cfg: &PipelineConfig, opts: &TrainOptions) -> Result<TrainReport> {
    let manifest = project.load()?;
    let mut front = Vec::new();
    let mut propagated = Vec::new();
    let mut val = Vec::new();
    for e in &manifest.entries {
        if e.split == Split::Val {
            if let Some(t) = e.truth {
                val.push(sample_of(project, e, t)?);
            }
            continue;
        }
        match e.label {
            Some(l) if l.source == LabelSource::Propagated => {
                if !opts.front_only && l.confidence() >= cfg.propagation.tau {
                    propagated.push(PropagatedSample {
                        sample: sample_of(project, e, l.label)?,
                        confidence: l.confidence(),
                    });
                }
            }
            Some(l) => front.push(sample_of(project, e, l.label)?),
            None => {}
        }
    }
    if front.is_empty() && propagated.is_empty() {
        return Err(Error::InsufficientData(
            "no labeled training entries; run annotate-faces (and propagate) first".into(),
        ));
    }
    let mut tc = cfg.train;
    tc.seed = derive_seed(root_seed(&manifest, cfg), &[0x7a]);
    if let Some(steps) = cfg.train_steps {
        let labels: Vec<Gender> = front
            .iter()
            .map(|s| s.label)
            .chain(propagated.iter().map(|p| p.sample.label))
            .collect();
        tc.epochs = epochs_for_steps(&labels, &tc, steps)?;
    }
    let val = (tc.patience.is_some() && !val.is_empty()).then_some(val);
    let mut outcome = train_semisupervised(&front, &propagated, 0.0, val.as_deref(), &tc)?;
    let model_path = project.path(&opts.model_path);
    let log_path = model_path.with_extension("log.tsv");
    outcome.model.save(&model_path)?;
    write_atomic(&log_path, outcome.log_tsv().as_bytes())?;
    Ok(TrainReport {
        front: front.len(),
        propagated: propagated.len(),
        epochs: tc.epochs,
        best_epoch: outcome.best_epoch,
        model_path,
        log_path,
    })
}

/// Evaluation table as written by [`eval`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub label: String,
    pub group_by: GroupBy,
    /// Group columns followed by `Mean` (angle) or `All`.
    pub columns: Vec<String>,
    pub f1: Vec<Option<f64>>,
    pub accuracy: Vec<Option<f64>>,
    pub n: Vec<usize>,
}

fn group_by_name(g: GroupBy) -> &'static str {
    match g {
        GroupBy::Angle => "angle",
        GroupBy::Variation => "variation",
        GroupBy::None => "none",
    }
}

impl MetricsTable {
    /// Angle tables end in `Mean` (average over angles); other groupings end
    /// in `All` (pooled over every sample).
    pub fn from_metrics(label: &str, group_by: GroupBy, m: &Metrics) -> Self {
        let mut t = MetricsTable {
            label: label.to_string(),
            group_by,
            columns: m.groups.iter().map(|g| g.group.clone()).collect(),
            f1: m.groups.iter().map(|g| g.f1).collect(),
            accuracy: m.groups.iter().map(|g| g.accuracy).collect(),
            n: m.groups.iter().map(|g| g.n).collect(),
        };
        if group_by == GroupBy::Angle {
            let accs: Vec<f64> = t.accuracy.iter().flatten().copied().collect();
            t.columns.push("Mean".into());
            t.f1.push(m.mean_f1);
            t.accuracy.push((!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64));
        } else {
            t.columns.push("All".into());
            t.f1.push(Some(m.f1));
            t.accuracy.push(Some(m.accuracy));
        }
        t.n.push(m.n);
        t
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "{METRICS_MAGIC}\n# label={}\n# group_by={}\n# f1: macro average of per-class F1 over classes present in truth or prediction, percent\nrow",
            self.label,
            group_by_name(self.group_by)
        );
        for c in &self.columns {
            let _ = write!(s, "\t{c}");
        }
        s.push_str("\nf1");
        for v in &self.f1 {
            let _ = write!(s, "\t{}", pct(*v));
        }
        s.push_str("\naccuracy");
        for v in &self.accuracy {
            let _ = write!(s, "\t{}", pct(*v));
        }
        s.push_str("\nn");
        for v in &self.n {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l.trim()) != Some(METRICS_MAGIC) {
            return Err(Error::parse(path, 1, format!("missing {METRICS_MAGIC:?} header")));
        }
        let mut label = String::new();
        let mut group_by = GroupBy::None;
        let mut rows: HashMap<String, Vec<String>> = HashMap::new();
        for (i, line) in lines {
            if let Some(c) = line.strip_prefix('#') {
                let c = c.trim();
                if let Some(v) = c.strip_prefix("label=") {
                    label = v.to_string();
                } else if let Some(v) = c.strip_prefix("group_by=") {
                    group_by = v.parse().map_err(|e: Error| Error::parse(path, i + 1, e.to_string()))?;
                }
                continue;
            }
            let mut f = line.split('\t');
            let name = f.next().unwrap_or_default().to_string();
            rows.insert(name, f.map(str::to_string).collect());
        }
        let take = |name: &str| {
            rows.get(name)
                .cloned()
                .ok_or_else(|| Error::parse(path, 0, format!("missing {name} row")))
        };
        let columns = take("row")?;
        let num = |v: &str| -> Result<Option<f64>> {
            if v == "-" {
                Ok(None)
            } else {
                v.parse::<f64>()
                    .map(|x| Some(x / 100.0))
                    .map_err(|_| Error::parse(path, 0, format!("bad value {v:?}")))
            }
        };
        let f1 = take("f1")?.iter().map(|v| num(v)).collect::<Result<Vec<_>>>()?;
        let accuracy = take("accuracy")?.iter().map(|v| num(v)).collect::<Result<Vec<_>>>()?;
        let n = take("n")?
            .iter()
            .map(|v| v.parse::<usize>().map_err(|_| Error::parse(path, 0, format!("bad count {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if [f1.len(), accuracy.len(), n.len()].iter().any(|&l| l != columns.len()) {
            return Err(Error::parse(path, 0, "rows have different lengths"));
        }
        Ok(MetricsTable {
            label,
            group_by,
            columns,
            f1,
            accuracy,
            n,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub model_path: PathBuf,
    pub out: PathBuf,
    /// Row name in reports; defaults to the model file stem.
    pub label: Option<String>,
    pub group_by: GroupBy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            model_path: PathBuf::from(DEFAULT_MODEL),
            out: PathBuf::from(DEFAULT_METRICS),
            label: None,
            group_by: GroupBy::Angle,
        }
    }
}

/// Evaluates a saved model on the VAL entries that carry ground truth and
/// writes the metrics table.
pub fn eval(project: &Project, opts: &EvalOptions) -> Result<(Metrics, MetricsTable)> {
    let manifest = project.load()?;
    let model_path = project.path(&opts.model_path);
    if !model_path.exists() {
        return Err(Error::MissingArtifact {
            what: "trained model".into(),
            path: model_path,
            stage: "train",
        });
    }
    let model = ModelHandle::load(&model_path)?;
    let samples = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Val)
        .filter_map(|e| e.truth.map(|t| sample_of(project, e, t)))
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::InsufficientData(
            "no VAL entries with ground truth; run ingest to assign splits".into(),
        ));
    }
    let metrics = evaluate_f1(&model, &samples, opts.group_by)?;
    let label = opts.label.clone().unwrap_or_else(|| {
        model_path
            .file_stem()
            .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
    });
    let table = MetricsTable::from_metrics(&label, opts.group_by, &metrics);
    write_atomic(&project.path(&opts.out), table.to_tsv().as_bytes())?;
    Ok((metrics, table))
}

fn metrics_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "tsv") {
            let head = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            if head.lines().next() == Some(METRICS_MAGIC) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Pseudo-label accuracy from the manifest, then one table per grouping
/// built from metrics files. Tables sharing a label are treated as repeats
/// and shown as mean ± std. `metrics` defaults to every metrics table next
/// to the manifest. The result is also written to `report.tsv`.
pub fn report(project: &Project, metrics: &[PathBuf]) -> Result<String> {
    let manifest = project.load()?;
    let mut out = String::new();
    let labeled: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.truth.is_some() && e.label.is_some_and(|l| l.source == LabelSource::Propagated))
        .collect();
    if !labeled.is_empty() {
        let pool: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| e.split != Split::Val).collect();
        let r = pseudo_label_report(
            &pool.iter().filter_map(|e| e.label).collect::<Vec<_>>(),
            &pool.iter().filter(|e| e.label.is_some()).map(|e| e.truth).collect::<Vec<_>>(),
            &pool.iter().filter(|e| e.label.is_some()).map(|e| e.view_angle).collect::<Vec<_>>(),
        );
        out.push_str("# pseudo-label accuracy by view angle, percent\n");
        out.push_str(&pseudo_label_table(&r));
        out.push('\n');
    }
    let files = if metrics.is_empty() {
        metrics_files(project.dir())?
    } else {
        metrics.iter().map(|p| project.path(p)).collect()
    };
    let tables = files.iter().map(|p| MetricsTable::read(p)).collect::<Result<Vec<_>>>()?;
    for g in [GroupBy::Angle, GroupBy::Variation, GroupBy::None] {
        let of_kind: Vec<&MetricsTable> = tables.iter().filter(|t| t.group_by == g).collect();
        if of_kind.is_empty() {
            continue;
        }
        let _ = writeln!(out, "# macro F1 by {}, percent", group_by_name(g));
        let columns = &of_kind[0].columns;
        out.push_str("method");
        for c in columns {
            let _ = write!(out, "\t{c}");
        }
        out.push('\n');
        let mut by_label: BTreeMap<&str, Vec<&MetricsTable>> = BTreeMap::new();
        for t in &of_kind {
            by_label.entry(t.label.as_str()).or_default().push(t);
        }
        for (label, reps) in by_label {
            out.push_str(label);
            for c in columns {
                let vals: Vec<f64> = reps
                    .iter()
                    .filter_map(|t| t.columns.iter().position(|x| x == c).and_then(|i| t.f1[i]))
                    .collect();
                let cell = match crate::train::MeanStd::of(&vals) {
                    None => "-".to_string(),
                    Some(ms) if reps.len() > 1 => format!("{:.2} ± {:.2}", 100.0 * ms.mean, 100.0 * ms.std),
                    Some(ms) => format!("{:.2}", 100.0 * ms.mean),
                };
                let _ = write!(out, "\t{cell}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    if out.is_empty() {
        return Err(Error::InsufficientData(
            "nothing to report; run propagate or eval first".into(),
        ));
    }
    write_atomic(&project.path(REPORT_FILE), out.as_bytes())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_dataset, SynthConfig, SYNTH_MANIFEST};

    #[test]
    fn casia_names() {
        let n = parse_casia_name("001-nm-01-090").unwrap();
        assert_eq!(n.subject, "001");
        assert_eq!(n.variation, Variation::NM);
        assert_eq!(n.take, 1);
        assert_eq!(n.angle.degrees(), 90);
        assert_eq!(parse_casia_name("124-bg-02-180").unwrap().variation, Variation::BG);
        for bad in ["001-nm-01-091", "001-xx-01-090", "abc-nm-01-090", "001-nm-01", "walk"] {
            assert!(parse_casia_name(bad).is_none(), "{bad}");
        }
    }

    fn entry(id: &str, subject: &str, truth: Gender) -> ManifestEntry {
        let mut e = ManifestEntry::new(id, format!("{id}.csv"));
        e.subject_id = subject.into();
        e.truth = Some(truth);
        e
    }

    #[test]
    fn splits_are_subject_disjoint_and_stratified() {
        let mut entries = Vec::new();
        for s in 0..40 {
            let g = if s < 20 { Gender::Female } else { Gender::Male };
            for k in 0..3 {
                entries.push(entry(&format!("{s}_{k}"), &format!("p{s}"), g));
            }
        }
        let mut m = Manifest::new(0, entries).unwrap();
        assert_eq!(assign_splits(&mut m, 0.25, 9), (30, 10));
        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &m.entries {
            assert_ne!(e.split, Split::Unassigned);
            assert_eq!(*split_of.entry(&e.subject_id).or_insert(e.split), e.split);
        }
        let val_f = split_of
            .iter()
            .filter(|(s, sp)| **sp == Split::Val && s[1..].parse::<usize>().unwrap() < 20)
            .count();
        assert_eq!(val_f, 5);
        // already assigned subjects are left alone
        let before = m.clone();
        assert_eq!(assign_splits(&mut m, 0.5, 1), (0, 0));
        assert_eq!(m, before);
    }

    #[test]
    fn metrics_table_roundtrip() {
        let t = MetricsTable {
            label: "semi".into(),
            group_by: GroupBy::Variation,
            columns: vec!["WS".into(), "CB".into(), "All".into()],
            f1: vec![Some(0.5), None, Some(0.8125)],
            accuracy: vec![Some(0.75), None, Some(0.8)],
            n: vec![4, 0, 10],
        };
        let back = MetricsTable::parse(&t.to_tsv(), Path::new("m.tsv")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tssi_npy_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = TssiImage::zeros(33, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64 * 0.25 - 3.0;
        }
        let p = dir.path().join("x.npy");
        write_tssi_npy(&p, &img).unwrap();
        assert_eq!(read_tssi_npy(&p).unwrap(), img);
    }

    #[test]
    fn propagate_requires_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            subjects_per_style: 2,
            angles: vec![ViewAngle::FRONT, ViewAngle::new(90).unwrap()],
            ..Default::default()
        };
        generate_synthetic_dataset(&cfg, dir.path()).unwrap();
        let project = Project::new(dir.path().join(SYNTH_MANIFEST));
        let err = propagate(&project, &PipelineConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { stage: "embed", .. }), "{err}");
        assert!(err.to_string().contains(EMBEDDINGS_FILE));
        // the lock is released on failure
        assert!(!dir.path().join(format!("{SYNTH_MANIFEST}.lock")).exists());
    }

    #[test]
    fn stages_are_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            subjects_per_style: 4,
            angles: vec![ViewAngle::FRONT, ViewAngle::new(90).unwrap()],
            ..Default::default()
        };
        generate_synthetic_dataset(&synth, dir.path()).unwrap();
        let project = Project::new(dir.path().join(SYNTH_MANIFEST));
        let cfg = PipelineConfig {
            knn_k: 4,
            ..Default::default()
        };
        let snapshot = |files: &[&str]| -> Vec<Vec<u8>> {
            files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect()
        };
        let run = || {
            ingest(&project, &cfg, None).unwrap();
            annotate_faces(&project, &cfg, &FaceSource::resolve(&project, &cfg, None)).unwrap();
            normalize(&project, &cfg).unwrap();
            encode(&project, &cfg).unwrap();
            embed(&project, &cfg).unwrap();
            propagate(&project, &cfg).unwrap()
        };
        let files = [SYNTH_MANIFEST, EMBEDDINGS_FILE, PSEUDO_LABEL_FILE];
        let r1 = run();
        let first = snapshot(&files);
        let r2 = run();
        assert_eq!(r1, r2);
        assert_eq!(first, snapshot(&files));
        assert_eq!(r1.pool, 12);
        let m = project.load().unwrap();
        assert!(m.entries.iter().filter(|e| e.split != Split::Val).all(|e| e.label.is_some()));
        assert!(m.entries.iter().filter(|e| e.split == Split::Val && !e.view_angle.unwrap().is_front()).all(|e| e.label.is_none()));
        let id = &m.entries[0].sequence_id;
        let img = read_tssi_npy(&project.tssi_path(id)).unwrap();
        assert_eq!(img.shape(), (33, 60, 3));
    }
}
