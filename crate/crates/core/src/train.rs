//! Classifier training under the configurable losses, F1 evaluation and the
//! cross-validation and semi-supervised protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Gender, NUM_CLASSES};
use crate::losses::{
    cross_entropy, estimate_noise_rates, iw_loss_detached, nfl_rce, pencil_init, pencil_step, softmax_backward,
    NflRceParams, NoiseRates, PencilConfig, PencilPhase, PencilState, ProbVector, IW_MAX_WEIGHT,
};
use crate::nn::{Adam, AdamConfig, ResNet18, ResNetConfig, Tensor};
use crate::seed::derive_seed;
use crate::skeleton::{SkeletonSequence, Variation, ViewAngle};
use crate::tssi::{augment, coco17_traversal, encode_tssi, AugmentConfig, TraversalOrder, TssiImage, CHANNELS, DEFAULT_FRAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Ce,
    NflRce,
    Iw,
    Pencil,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::NflRce => "nflrce",
            LossKind::Iw => "iw",
            LossKind::Pencil => "pencil",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ce" => Ok(LossKind::Ce),
            "nflrce" => Ok(LossKind::NflRce),
            "iw" => Ok(LossKind::Iw),
            "pencil" => Ok(LossKind::Pencil),
            _ => Err(Error::InvalidArgument(format!("unknown loss {s:?}; expected ce, nflrce, iw or pencil"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Balance {
    OversampleMinority,
    UndersampleMajority,
    None,
}

impl FromStr for Balance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oversample" | "oversample_minority" => Ok(Balance::OversampleMinority),
            "undersample" | "undersample_majority" => Ok(Balance::UndersampleMajority),
            "none" => Ok(Balance::None),
            _ => Err(Error::InvalidArgument(format!(
                "unknown balance mode {s:?}; expected oversample, undersample or none"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation F1 improvement.
    /// Ignored when no validation set is given.
    pub patience: Option<usize>,
    pub loss: LossKind,
    pub balance: Balance,
    pub seed: u64,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    pub network: ResNetConfig,
    /// Time columns of the TSSI before resizing.
    pub frames: usize,
    pub nfl_rce: NflRceParams,
    pub pencil: PencilConfig,
    pub iw_max_weight: f64,
    /// Recompute batch-norm running statistics over the training set, with
    /// frozen weights, before every evaluation and for the returned model.
    pub bn_recalibration: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            epochs: 50,
            patience: Some(10),
            loss: LossKind::Ce,
            balance: Balance::OversampleMinority,
            seed: 0,
            augment: Some(AugmentConfig::default()),
            network: ResNetConfig::default(),
            frames: DEFAULT_FRAMES,
            nfl_rce: NflRceParams::default(),
            pencil: PencilConfig::default(),
            iw_max_weight: IW_MAX_WEIGHT,
            bn_recalibration: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.frames < 2 {
            return Err(Error::InvalidArgument("TSSI needs at least 2 frames".into()));
        }
        Ok(())
    }
}

/// A normalised sequence with its training label and, when known, the
/// ground truth used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub seq: SkeletonSequence,
    pub label: Gender,
    pub truth: Option<Gender>,
}

impl Sample {
    /// Evaluation target: ground truth when known, otherwise the label.
    pub fn target(&self) -> Gender {
        self.truth.unwrap_or(self.label)
    }
}

/// Per-epoch index streams with optional class balancing.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: [Vec<usize>; NUM_CLASSES],
    mode: Balance,
    seed: u64,
}

pub fn make_balanced_sampler(labels: &[Gender], mode: Balance, seed: u64) -> Result<BalancedSampler> {
    let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    if mode != Balance::None && by_class.iter().any(Vec::is_empty) {
        return Err(Error::SingleClassDataset);
    }
    Ok(BalancedSampler { by_class, mode, seed })
}

impl BalancedSampler {
    /// Shuffled indices for `epoch`. Oversampling repeats reshuffled copies
    /// of the smaller class up to the larger class's count; undersampling
    /// draws the larger class down to the smaller class's count.
    pub fn epoch(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x5a, epoch as u64]));
        let counts = self.by_class.each_ref().map(Vec::len);
        let target = match self.mode {
            Balance::OversampleMinority => counts.into_iter().max().unwrap_or(0),
            Balance::UndersampleMajority => counts.into_iter().min().unwrap_or(0),
            Balance::None => 0,
        };
        let mut out = Vec::new();
        for class in &self.by_class {
            if self.mode == Balance::None {
                out.extend_from_slice(class);
                continue;
            }
            let mut drawn = Vec::with_capacity(target);
            while drawn.len() < target {
                let mut copy = class.clone();
                copy.shuffle(&mut rng);
                let take = (target - drawn.len()).min(copy.len());
                drawn.extend_from_slice(&copy[..take]);
            }
            out.extend(drawn);
        }
        out.shuffle(&mut rng);
        out
    }
}

/// Trained classifier plus the TSSI geometry it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHandle {
    net: ResNet18,
    frames: usize,
    order: TraversalOrder,
}

const MODEL_MAGIC: &[u8; 8] = b"GGMODEL1";
const EVAL_BATCH: usize = 32;

impl ModelHandle {
    fn new(net: ResNet18, frames: usize) -> Self {
        ModelHandle {
            net,
            frames,
            order: coco17_traversal(),
        }
    }

    pub fn network_config(&self) -> ResNetConfig {
        self.net.config
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn encode(&self, seq: &SkeletonSequence) -> Result<TssiImage> {
        encode_tssi(seq, &self.order, self.frames)
    }

    fn pixels(&self, img: &TssiImage) -> Vec<f32> {
        img.to_pixels(self.net.config.input_size)
    }

    fn predict_pixels(&self, pixels: &[Vec<f32>]) -> Vec<ProbVector> {
        let s = self.net.config.input_size;
        pixels
            .chunks(EVAL_BATCH)
            .flat_map(|chunk| {
                let data: Vec<f32> = chunk.iter().flatten().copied().collect();
                let x = Tensor::from_vec(chunk.len(), CHANNELS, s, s, data);
                let y = self.net.forward_eval(&x);
                y.data
                    .chunks(y.c)
                    .map(|z| ProbVector::from_logits(&z.iter().map(|&v| v as f64).collect::<Vec<_>>()))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Class probabilities in evaluation mode (running batch-norm statistics).
    pub fn predict(&self, img: &TssiImage) -> ProbVector {
        self.predict_pixels(&[self.pixels(img)]).remove(0)
    }

    pub fn predict_batch(&self, imgs: &[TssiImage]) -> Vec<ProbVector> {
        let pixels: Vec<Vec<f32>> = imgs.par_iter().map(|i| self.pixels(i)).collect();
        self.predict_pixels(&pixels)
    }

    pub fn predict_sequences(&self, seqs: &[&SkeletonSequence]) -> Result<Vec<ProbVector>> {
        let pixels = seqs
            .par_iter()
            .map(|s| self.encode(s).map(|i| self.pixels(&i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.predict_pixels(&pixels))
    }

    /// Layout: 8-byte magic, little-endian u32 TSSI frame count, then the
    /// network in its own format.
    pub fn write_to(&mut self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        self.net.write_to(w)
    }

    pub fn read_from(mut r: impl Read) -> std::io::Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "not a gaitgender model file"));
        }
        let mut frames = [0u8; 4];
        r.read_exact(&mut frames)?;
        let net = ResNet18::read_from(r)?;
        Ok(ModelHandle::new(net, u32::from_le_bytes(frames) as usize))
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).map_err(|e| Error::io(path, e))?;
        crate::manifest::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        ModelHandle::read_from(std::io::BufReader::new(f)).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelHandle,
    pub log: Vec<EpochLog>,
    /// Epoch whose weights were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    /// Noise rates used by importance reweighting.
    pub noise_rates: Option<NoiseRates>,
    /// Labels after PENCIL correction, one per training sample.
    pub corrected_labels: Option<Vec<Gender>>,
}

impl TrainOutcome {
    /// One `epoch<TAB>train_loss<TAB>val_f1` line per epoch.
    pub fn log_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_f1\n");
        for e in &self.log {
            let f1 = e.val_f1.map_or("-".to_string(), |v| format!("{v:.6}"));
            s.push_str(&format!("{}\t{:.6}\t{}\n", e.epoch, e.train_loss, f1));
        }
        s
    }
}

fn training_pixels(
    s: &Sample,
    order: &TraversalOrder,
    cfg: &TrainConfig,
    draw: Option<(usize, usize)>,
) -> Result<Vec<f32>> {
    let img = match (cfg.augment.as_ref(), draw) {
        (Some(aug), Some((epoch, pos))) => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xa6, epoch as u64, pos as u64]));
            encode_tssi(&augment(&s.seq, aug, &mut rng)?, order, cfg.frames)?
        }
        _ => encode_tssi(&s.seq, order, cfg.frames)?,
    };
    Ok(img.to_pixels(cfg.network.input_size))
}

/// Per-sample loss value and gradient with respect to the probabilities.
struct LossCtx<'a> {
    cfg: &'a TrainConfig,
    rates: Option<NoiseRates>,
    phase: PencilPhase,
}

impl LossCtx<'_> {
    fn eval(&self, p: &[f64], y: usize, pencil: Option<&PencilState>, i: usize) -> (f64, Vec<f64>, Option<Vec<f64>>) {
        match self.cfg.loss {
            LossKind::Ce => {
                let l = cross_entropy(p, y);
                (l.value, l.grad, None)
            }
            LossKind::NflRce => {
                let l = nfl_rce(p, y, &self.cfg.nfl_rce);
                (l.value, l.grad, None)
            }
            LossKind::Iw => {
                let l = match &self.rates {
                    Some(r) => iw_loss_detached(p, y, r, self.cfg.iw_max_weight),
                    None => cross_entropy(p, y),
                };
                (l.value, l.grad, None)
            }
            LossKind::Pencil => {
                let state = pencil.expect("PENCIL state is initialised for PENCIL training");
                let pc = &self.cfg.pencil;
                let step = pencil_step(p, state.logits(i), y, pc.alpha_c, pc.beta_c, self.phase);
                (step.loss, step.grad_pred, Some(step.grad_label))
            }
        }
    }
}

/// Trains a fresh network on `train`. With a validation set the weights of
/// the epoch with the best validation F1 are kept and training stops early
/// after `patience` epochs without improvement.
pub fn train(train_set: &[Sample], val: Option<&[Sample]>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let order = coco17_traversal();
    let labels: Vec<Gender> = train_set.iter().map(|s| s.label).collect();
    let ys: Vec<usize> = labels.iter().map(|g| g.index()).collect();
    let sampler = make_balanced_sampler(&labels, cfg.balance, cfg.seed)?;
    let mut net = ResNet18::new(cfg.network, derive_seed(cfg.seed, &[0x1e]))?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.learning_rate,
        ..Default::default()
    });

    let plain: Vec<Vec<f32>> = train_set
        .par_iter()
        .map(|s| training_pixels(s, &order, cfg, None))
        .collect::<Result<_>>()?;
    let val_pixels: Option<Vec<Vec<f32>>> = val
        .map(|v| v.par_iter().map(|s| training_pixels(s, &order, cfg, None)).collect::<Result<_>>())
        .transpose()?;

    // Running batch-norm statistics trail the weights during training, so
    // every model that is evaluated or returned gets them recomputed.
    let recalibrated = |net: &ResNet18| -> ResNet18 {
        let mut net = net.clone();
        if cfg.bn_recalibration {
            let s = cfg.network.input_size;
            let batches = plain
                .chunks(cfg.batch_size)
                .filter(|c| c.len() > 1)
                .map(|c| Tensor::from_vec(c.len(), CHANNELS, s, s, c.concat()));
            net.recalibrate_batch_norm(batches);
        }
        net
    };

    let mut pencil = (cfg.loss == LossKind::Pencil).then(|| pencil_init(&ys, NUM_CLASSES, cfg.pencil.k_init));
    let mut rates = None;
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ResNet18)> = None;
    let mut since_best = 0usize;
    let s = cfg.network.input_size;

    for epoch in 0..cfg.epochs {
        let phase = cfg.pencil.phase_for_epoch(epoch);
        if let Some(state) = pencil.as_mut() {
            state.phase = phase;
        }
        if cfg.loss == LossKind::Iw && epoch == 1 {
            // anchor-point estimate after one cross-entropy warm-up epoch
            let preds = ModelHandle::new(net.clone(), cfg.frames).predict_pixels(&plain);
            let r = estimate_noise_rates(&preds, &ys)?;
            log::info!("estimated noise rates: female {:.3}, male {:.3}", r.rho_female, r.rho_male);
            rates = Some(r);
        }
        let ctx = LossCtx { cfg, rates, phase };

        let stream = sampler.epoch(epoch);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (step, batch) in stream.chunks(cfg.batch_size).enumerate() {
            // batch statistics need at least two samples
            if batch.len() < 2 && stream.len() >= 2 {
                continue;
            }
            let start = step * cfg.batch_size;
            let inputs: Vec<Vec<f32>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    if cfg.augment.is_some() {
                        training_pixels(&train_set[i], &order, cfg, Some((epoch, start + k)))
                    } else {
                        Ok(plain[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let x = Tensor::from_vec(batch.len(), CHANNELS, s, s, inputs.concat());
            let logits = net.forward_train(&x);
            let mut dlogits = Tensor::zeros(batch.len(), logits.c, 1, 1);
            let n = batch.len() as f64;
            for (k, &i) in batch.iter().enumerate() {
                let z: Vec<f64> = logits.sample(k).iter().map(|&v| v as f64).collect();
                let p = ProbVector::from_logits(&z);
                let (value, grad_p, grad_label) = ctx.eval(&p, ys[i], pencil.as_ref(), i);
                if !value.is_finite() || grad_p.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFiniteLoss { epoch, step });
                }
                loss_sum += value;
                loss_count += 1;
                let dz = softmax_backward(&p, &grad_p);
                for (c, g) in dz.iter().enumerate() {
                    dlogits.data[k * logits.c + c] = (g / n) as f32;
                }
                if let (Some(state), Some(g), PencilPhase::Correction) = (pencil.as_mut(), grad_label, phase) {
                    state.update(i, &g, cfg.pencil.label_lr)?;
                }
            }
            net.zero_grad();
            net.backward(&dlogits);
            opt.step(net.params());
        }

        let train_loss = if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 };
        let val_f1 = match (val, &val_pixels) {
            (Some(v), Some(px)) if !v.is_empty() => {
                let candidate = recalibrated(&net);
                let handle = ModelHandle::new(candidate, cfg.frames);
                let pred: Vec<Gender> = handle.predict_pixels(px).iter().map(|p| Gender::from_index(p.argmax())).collect();
                let truth: Vec<Gender> = v.iter().map(Sample::target).collect();
                macro_f1(&truth, &pred).map(|f| (f, handle.net))
            }
            _ => None,
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.4}{}",
            val_f1.as_ref().map_or(String::new(), |(f, _)| format!(", val F1 {f:.4}"))
        );
        log.push(EpochLog {
            epoch,
            train_loss,
            val_f1: val_f1.as_ref().map(|(f, _)| *f),
        });
        if let Some((f1, candidate)) = val_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, candidate));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }

    let (net, best_epoch) = match best {
        Some((_, e, n)) => (n, Some(e)),
        None if log.is_empty() => (net, None),
        None => (recalibrated(&net), log.last().map(|e| e.epoch)),
    };
    let corrected_labels = pencil.map(|st| (0..st.len()).map(|i| Gender::from_index(st.corrected_label(i))).collect());
    Ok(TrainOutcome {
        model: ModelHandle::new(net, cfg.frames),
        log,
        best_epoch,
        noise_rates: rates,
        corrected_labels,
    })
}

/// Macro F1: the mean of per-class F1 over classes present in the truth or
/// the predictions, with class F1 = 2TP / (2TP + FP + FN). A constant
/// predictor on balanced binary data therefore scores (2/3 + 0) / 2 = 1/3.
/// `None` for empty input.
pub fn macro_f1(truth: &[Gender], pred: &[Gender]) -> Option<f64> {
    assert_eq!(truth.len(), pred.len());
    if truth.is_empty() {
        return None;
    }
    let mut f1s = Vec::new();
    for c in [Gender::Female, Gender::Male] {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (t, p) in truth.iter().zip(pred) {
            match (*t == c, *p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ > 0 {
            f1s.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        }
    }
    Some(f1s.iter().sum::<f64>() / f1s.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupBy {
    Angle,
    Variation,
    None,
}

impl FromStr for GroupBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "angle" => Ok(GroupBy::Angle),
            "variation" => Ok(GroupBy::Variation),
            "none" => Ok(GroupBy::None),
            _ => Err(Error::InvalidArgument(format!(
                "unknown grouping {s:?}; expected angle, variation or none"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMetrics {
    pub group: String,
    pub n: usize,
    /// `None` when the group has no samples.
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub n: usize,
    pub f1: f64,
    pub accuracy: f64,
    pub groups: Vec<GroupMetrics>,
    /// Mean of the non-empty per-group F1 values.
    pub mean_f1: Option<f64>,
}

impl Metrics {
    pub fn group(&self, name: &str) -> Option<&GroupMetrics> {
        self.groups.iter().find(|g| g.group == name)
    }

    /// Mean F1 over non-empty groups whose name is not in `skip`.
    pub fn mean_f1_excluding(&self, skip: &[&str]) -> Option<f64> {
        let v: Vec<f64> = self
            .groups
            .iter()
            .filter(|g| !skip.contains(&g.group.as_str()))
            .filter_map(|g| g.f1)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Variation columns reported for front-view data; other variations present
/// in the data are appended.
pub const VARIATION_COLUMNS: [Variation; 4] = [Variation::WS, Variation::CB, Variation::CL, Variation::CBG];

fn group_names(samples: &[Sample], by: GroupBy) -> Vec<String> {
    match by {
        GroupBy::Angle => ViewAngle::all().map(|a| a.to_string()).collect(),
        GroupBy::Variation => {
            let present: BTreeSet<Variation> = samples.iter().map(|s| s.seq.meta.variation).collect();
            let mut v: Vec<Variation> = VARIATION_COLUMNS.to_vec();
            v.extend(present.into_iter().filter(|p| !VARIATION_COLUMNS.contains(p)));
            v.into_iter().map(|v| v.to_string()).collect()
        }
        GroupBy::None => Vec::new(),
    }
}

fn group_of(s: &Sample, by: GroupBy) -> Option<String> {
    match by {
        GroupBy::Angle => s.seq.meta.view_angle.map(|a| a.to_string()),
        GroupBy::Variation => Some(s.seq.meta.variation.to_string()),
        GroupBy::None => None,
    }
}

/// Metrics from predictions already made for `samples`.
pub fn metrics_from_predictions(samples: &[Sample], pred: &[Gender], by: GroupBy) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("evaluation set is empty".into()));
    }
    let truth: Vec<Gender> = samples.iter().map(Sample::target).collect();
    let accuracy = |t: &[Gender], p: &[Gender]| t.iter().zip(p).filter(|(a, b)| a == b).count() as f64 / t.len() as f64;
    let mut buckets: BTreeMap<String, (Vec<Gender>, Vec<Gender>)> = BTreeMap::new();
    for ((s, t), p) in samples.iter().zip(&truth).zip(pred) {
        if let Some(g) = group_of(s, by) {
            let b = buckets.entry(g).or_default();
            b.0.push(*t);
            b.1.push(*p);
        }
    }
    let groups: Vec<GroupMetrics> = group_names(samples, by)
        .into_iter()
        .map(|name| match buckets.get(&name) {
            Some((t, p)) => GroupMetrics {
                n: t.len(),
                f1: macro_f1(t, p),
                accuracy: Some(accuracy(t, p)),
                group: name,
            },
            None => GroupMetrics {
                group: name,
                n: 0,
                f1: None,
                accuracy: None,
            },
        })
        .collect();
    let present: Vec<f64> = groups.iter().filter_map(|g| g.f1).collect();
    Ok(Metrics {
        n: samples.len(),
        f1: macro_f1(&truth, pred).unwrap_or(0.0),
        accuracy: accuracy(&truth, pred),
        mean_f1: (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64),
        groups,
    })
}

pub fn evaluate_f1(model: &ModelHandle, samples: &[Sample], by: GroupBy) -> Result<Metrics> {
    let seqs: Vec<&SkeletonSequence> = samples.iter().map(|s| &s.seq).collect();
    let pred: Vec<Gender> = model
        .predict_sequences(&seqs)?
        .iter()
        .map(|p| Gender::from_index(p.argmax()))
        .collect();
    metrics_from_predictions(samples, &pred, by)
}

/// Subject-disjoint train/validation split for one repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub val_subjects: BTreeSet<String>,
}

/// Draws `holdout` validation subjects per repeat; every sample of a
/// validation subject goes to validation, all others to training.
pub fn subject_splits(subjects: &[&str], holdout: usize, repeats: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let unique: Vec<&str> = subjects.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if unique.len() <= holdout || holdout == 0 {
        return Err(Error::TooFewSubjects {
            holdout,
            got: unique.len(),
        });
    }
    Ok((0..repeats)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xc5, r as u64]));
            let val_subjects: BTreeSet<String> = unique.choose_multiple(&mut rng, holdout).map(|s| s.to_string()).collect();
            let (val, train) = (0..subjects.len()).partition(|&i| val_subjects.contains(subjects[i]));
            FoldSplit { train, val, val_subjects }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossValReport {
    pub repeats: Vec<Metrics>,
    pub splits: Vec<FoldSplit>,
    /// Per-group F1 over repeats, in column order, then `All`.
    pub summary: Vec<(String, Option<MeanStd>)>,
}

impl Serialize for FoldSplit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.val_subjects.serialize(s)
    }
}

/// Repeated subject-disjoint hold-out evaluation grouped by variation.
pub fn crossval_fvg(samples: &[Sample], holdout: usize, repeats: usize, cfg: &TrainConfig) -> Result<CrossValReport> {
    let subjects: Vec<&str> = samples.iter().map(|s| s.seq.meta.subject_id.as_str()).collect();
    let splits = subject_splits(&subjects, holdout, repeats, cfg.seed)?;
    let mut metrics = Vec::with_capacity(repeats);
    for (r, split) in splits.iter().enumerate() {
        let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
        let (tr, va) = (pick(&split.train), pick(&split.val));
        let run_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, &[0xf0, r as u64]),
            ..*cfg
        };
        let out = train(&tr, Some(&va), &run_cfg)?;
        metrics.push(evaluate_f1(&out.model, &va, GroupBy::Variation)?);
    }
    let mut summary = Vec::new();
    if let Some(first) = metrics.first() {
        for g in &first.groups {
            let vals: Vec<f64> = metrics.iter().filter_map(|m| m.group(&g.group).and_then(|x| x.f1)).collect();
            summary.push((g.group.clone(), MeanStd::of(&vals)));
        }
    }
    let all: Vec<f64> = metrics.iter().map(|m| m.f1).collect();
    summary.push(("All".to_string(), MeanStd::of(&all)));
    Ok(CrossValReport {
        repeats: metrics,
        splits,
        summary,
    })
}

/// A sample labeled by propagation and the propagation confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedSample {
    pub sample: Sample,
    pub confidence: f64,
}

/// Trains one model on the front-view samples together with propagated
/// samples whose confidence reaches `tau`.
pub fn train_semisupervised(
    front: &[Sample],
    propagated: &[PropagatedSample],
    tau: f64,
    val: Option<&[Sample]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut set = front.to_vec();
    set.extend(propagated.iter().filter(|p| p.confidence >= tau).map(|p| p.sample.clone()));
    log::info!("semi-supervised training on {} front + {} propagated samples", front.len(), set.len() - front.len());
    train(&set, val, cfg)
}
