//! Pipeline configuration: a flat `key = value` file. Blank lines and text
//! after `#` are ignored; unknown keys are rejected.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | manifest seed | root seed for every randomized stage |
//! | `anchor_mode` | `per_frame` | `per_frame` or `median` normalisation anchors |
//! | `frames` | 60 | TSSI time columns |
//! | `embedding.lateral_weight` | 0.02 | weight of x-derived embedding features |
//! | `knn.k` | 20 | neighbours per node in the affinity graph |
//! | `knn.sigma` | `auto` | kernel bandwidth, `auto` or a positive number |
//! | `propagation.mode` | `spectral` | `nn` or `spectral` |
//! | `propagation.spectral` | `spreading` | `spreading` or `cluster_vote` |
//! | `propagation.alpha` | 0.99 | spreading parameter in (0, 1) |
//! | `propagation.clusters` | 2 | clusters for `cluster_vote` |
//! | `propagation.k_vote` | 5 | vote size for `nn` and for undecided rows |
//! | `propagation.tau` | 0.6 | minimum confidence of propagated training labels |
//! | `face.det_conf_threshold` | 0.9 | ignore detections below this confidence |
//! | `face.decision_threshold` | 0.5 | FEMALE when the aggregated score reaches this |
//! | `face.endpoint` | none | URL of a live face analyzer; fixtures are used when unset |
//! | `face.timeout_s` | 30 | request timeout for the live analyzer |
//! | `train.lr` | 1e-4 | Adam learning rate |
//! | `train.batch_size` | 128 | |
//! | `train.epochs` | 50 | |
//! | `train.steps` | none | optimizer-step budget; overrides `train.epochs` when set |
//! | `train.patience` | 10 | early-stopping patience on validation F1, or `none` |
//! | `train.loss` | `ce` | `ce`, `nflrce`, `iw` or `pencil` |
//! | `train.balance` | `oversample` | `oversample`, `undersample` or `none` |
//! | `train.augment` | true | |
//! | `train.width` | 64 | channels of the first residual stage |
//! | `train.input_size` | 64 | square network input |
//! | `train.bn_recalibration` | true | recompute batch-norm statistics after training |
//! | `nflrce.alpha`, `nflrce.beta`, `nflrce.gamma` | 1, 1, 2 | NFL-RCE weights and focusing |
//! | `pencil.k_init`, `pencil.alpha`, `pencil.beta`, `pencil.label_lr` | 10, 0.1, 0.4, 1 | |
//! | `pencil.warmup_epochs`, `pencil.correction_epochs`, `pencil.finetune_epochs` | 5, 15, 10 | |
//! | `iw.max_weight` | 10 | clip for importance weights |
//! | `eval.group_by` | `angle` | `angle`, `variation` or `none` |
//! | `split.val_fraction` | 0.25 | fraction of subjects assigned to VAL |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::face::FaceConfig;
use crate::propagation::{Bandwidth, HandcraftedEmbedder, SpectralMode, SpectralParams};
use crate::skeleton::AnchorMode;
use crate::train::{GroupBy, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationMode {
    Nn,
    Spectral,
}

impl FromStr for PropagationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nn" => Ok(PropagationMode::Nn),
            "spectral" => Ok(PropagationMode::Spectral),
            _ => Err(Error::InvalidArgument(format!(
                "unknown propagation mode {s:?}; expected nn or spectral"
            ))),
        }
    }
}

impl fmt::Display for PropagationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PropagationMode::Nn => "nn",
            PropagationMode::Spectral => "spectral",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationConfig {
    pub mode: PropagationMode,
    pub spectral: SpectralMode,
    pub params: SpectralParams,
    pub k_vote: usize,
    pub tau: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            mode: PropagationMode::Spectral,
            spectral: SpectralMode::Spreading,
            params: SpectralParams::default(),
            k_vote: 5,
            tau: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Overrides the manifest seed when set.
    pub seed: Option<u64>,
    pub anchor_mode: AnchorMode,
    pub embedding: HandcraftedEmbedder,
    pub knn_k: usize,
    pub knn_sigma: Bandwidth,
    pub propagation: PropagationConfig,
    pub face: FaceConfig,
    pub face_endpoint: Option<String>,
    pub face_timeout_s: f64,
    /// `train.frames` doubles as the TSSI width used by `encode`.
    pub train: TrainConfig,
    pub train_steps: Option<usize>,
    pub group_by: GroupBy,
    pub val_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: None,
            anchor_mode: AnchorMode::PerFrame,
            embedding: HandcraftedEmbedder::default(),
            knn_k: 20,
            knn_sigma: Bandwidth::Auto,
            propagation: PropagationConfig::default(),
            face: FaceConfig::default(),
            face_endpoint: None,
            face_timeout_s: 30.0,
            train: TrainConfig::default(),
            train_steps: None,
            group_by: GroupBy::Angle,
            val_fraction: 0.25,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad boolean {v:?} for {key}"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_value(key, v).map(Some)
    }
}

impl PipelineConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, format!("expected key = value, found {line:?}")))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let p = &mut self.propagation;
        match key {
            "seed" => self.seed = parse_opt(key, v)?,
            "anchor_mode" => self.anchor_mode = v.parse()?,
            "frames" => t.frames = parse_value(key, v)?,
            "embedding.lateral_weight" => self.embedding.lateral_weight = parse_value(key, v)?,
            "knn.k" => self.knn_k = parse_value(key, v)?,
            "knn.sigma" => {
                self.knn_sigma = if v.eq_ignore_ascii_case("auto") {
                    Bandwidth::Auto
                } else {
                    Bandwidth::Fixed(parse_value(key, v)?)
                }
            }
            "propagation.mode" => p.mode = v.parse()?,
            "propagation.spectral" => {
                p.spectral = match v.to_ascii_lowercase().as_str() {
                    "spreading" => SpectralMode::Spreading,
                    "cluster_vote" | "cluster-vote" => SpectralMode::ClusterVote,
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown spectral mode {v:?}; expected spreading or cluster_vote"
                        )))
                    }
                }
            }
            "propagation.alpha" => p.params.alpha = parse_value(key, v)?,
            "propagation.clusters" => p.params.clusters = parse_value(key, v)?,
            "propagation.k_vote" => {
                p.k_vote = parse_value(key, v)?;
                p.params.fallback_k_vote = p.k_vote;
            }
            "propagation.tau" => p.tau = parse_value(key, v)?,
            "face.det_conf_threshold" => self.face.det_conf_threshold = parse_value(key, v)?,
            "face.decision_threshold" => self.face.decision_threshold = parse_value(key, v)?,
            "face.endpoint" => self.face_endpoint = parse_opt(key, v)?,
            "face.timeout_s" => self.face_timeout_s = parse_value(key, v)?,
            "train.lr" => t.learning_rate = parse_value(key, v)?,
            "train.batch_size" => t.batch_size = parse_value(key, v)?,
            "train.epochs" => t.epochs = parse_value(key, v)?,
            "train.steps" => self.train_steps = parse_opt(key, v)?,
            "train.patience" => t.patience = parse_opt(key, v)?,
            "train.loss" => t.loss = v.parse()?,
            "train.balance" => t.balance = v.parse()?,
            "train.augment" => t.augment = parse_bool(key, v)?.then(Default::default),
            "train.width" => t.network.width = parse_value(key, v)?,
            "train.input_size" => t.network.input_size = parse_value(key, v)?,
            "train.bn_recalibration" => t.bn_recalibration = parse_bool(key, v)?,
            "nflrce.alpha" => t.nfl_rce.alpha = parse_value(key, v)?,
            "nflrce.beta" => t.nfl_rce.beta = parse_value(key, v)?,
            "nflrce.gamma" => t.nfl_rce.gamma = parse_value(key, v)?,
            "pencil.k_init" => t.pencil.k_init = parse_value(key, v)?,
            "pencil.alpha" => t.pencil.alpha_c = parse_value(key, v)?,
            "pencil.beta" => t.pencil.beta_c = parse_value(key, v)?,
            "pencil.label_lr" => t.pencil.label_lr = parse_value(key, v)?,
            "pencil.warmup_epochs" => t.pencil.warmup_epochs = parse_value(key, v)?,
            "pencil.correction_epochs" => t.pencil.correction_epochs = parse_value(key, v)?,
            "pencil.finetune_epochs" => t.pencil.finetune_epochs = parse_value(key, v)?,
            "iw.max_weight" => t.iw_max_weight = parse_value(key, v)?,
            "eval.group_by" => self.group_by = v.parse()?,
            "split.val_fraction" => self.val_fraction = parse_value(key, v)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let p = &self.propagation;
        if self.knn_k == 0 || p.k_vote == 0 {
            return Err(Error::InvalidArgument("knn.k and propagation.k_vote must be at least 1".into()));
        }
        if !(p.params.alpha > 0.0 && p.params.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "propagation.alpha must lie in (0, 1), got {}",
                p.params.alpha
            )));
        }
        if !(0.0..=1.0).contains(&p.tau) {
            return Err(Error::InvalidArgument(format!("propagation.tau must lie in [0, 1], got {}", p.tau)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!(
                "split.val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.train_steps == Some(0) {
            return Err(Error::InvalidArgument("train.steps must be at least 1".into()));
        }
        if let Bandwidth::Fixed(s) = self.knn_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("knn.sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }
}
