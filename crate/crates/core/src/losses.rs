//! Classification losses over predicted class probabilities, each with its
//! analytic gradient with respect to the probability vector.
//!
//! Gradients are partial derivatives treating every `p[k]` as an independent
//! coordinate, so they can be checked against finite differences and chained
//! through a softmax by the caller.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-6;

/// Class probabilities: non-negative, summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("not a probability vector: {p:?}")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidArgument(format!("probabilities sum to {sum}")));
        }
        Ok(ProbVector(p))
    }

    pub fn from_logits(z: &[f64]) -> Self {
        ProbVector(softmax(z))
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Backpropagates `dL/dp` through `p = softmax(z)`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(&pj, &gj)| pj * (gj - dot)).collect()
}

/// First index of the maximum; ties resolve to the lower class index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn flog(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// d/dx of `flog`.
fn dflog(x: f64) -> f64 {
    if x > LOG_FLOOR {
        1.0 / x
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Set when the loss hit a degenerate denominator and was replaced by 0.
    pub degenerate: bool,
}

impl LossEval {
    fn new(value: f64, grad: Vec<f64>) -> Self {
        LossEval {
            value,
            grad,
            degenerate: false,
        }
    }

    fn scaled(mut self, s: f64) -> Self {
        self.value *= s;
        self.grad.iter_mut().for_each(|g| *g *= s);
        self
    }
}

pub fn cross_entropy(p: &[f64], y: usize) -> LossEval {
    let mut grad = vec![0.0; p.len()];
    grad[y] = -dflog(p[y]);
    LossEval::new(-flog(p[y]), grad)
}

/// Per-class focal term `-(1-p)^gamma log p` and its derivative.
fn focal_term(pk: f64, gamma: f64) -> (f64, f64) {
    let q = 1.0 - pk;
    let l = flog(pk);
    let qg = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let dqg = if gamma == 0.0 {
        0.0
    } else {
        -gamma * q.powf(gamma - 1.0)
    };
    (-qg * l, -(dqg * l + qg * dflog(pk)))
}

/// Focal loss of the target class divided by the sum of focal losses over
/// all classes.
pub fn normalized_focal_loss(p: &[f64], y: usize, gamma: f64) -> LossEval {
    let terms: Vec<(f64, f64)> = p.iter().map(|&pk| focal_term(pk, gamma)).collect();
    let s: f64 = terms.iter().map(|t| t.0).sum();
    if s < LOG_FLOOR {
        return LossEval {
            value: 0.0,
            grad: vec![0.0; p.len()],
            degenerate: true,
        };
    }
    let fy = terms[y].0;
    let grad = terms
        .iter()
        .enumerate()
        .map(|(j, &(_, dj))| {
            let own = if j == y { dj / s } else { 0.0 };
            own - fy * dj / (s * s)
        })
        .collect();
    LossEval::new(fy / s, grad)
}

/// Cross entropy with prediction and target swapped, `log 0` replaced by
/// `a` (negative). Equals `-a * (1 - p[y])` on the simplex.
pub fn reverse_cross_entropy(p: &[f64], y: usize, a: f64) -> LossEval {
    let mut value = 0.0;
    let grad = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| {
            if k == y {
                0.0
            } else {
                value -= a * pk;
                -a
            }
        })
        .collect();
    LossEval::new(value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NflRceParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub log_zero: f64,
}

impl Default for NflRceParams {
    fn default() -> Self {
        NflRceParams {
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
            log_zero: -4.0,
        }
    }
}

pub fn nfl_rce(p: &[f64], y: usize, params: &NflRceParams) -> LossEval {
    let nfl = normalized_focal_loss(p, y, params.gamma).scaled(params.alpha);
    let rce = reverse_cross_entropy(p, y, params.log_zero).scaled(params.beta);
    LossEval {
        value: nfl.value + rce.value,
        grad: nfl.grad.iter().zip(&rce.grad).map(|(a, b)| a + b).collect(),
        degenerate: nfl.degenerate,
    }
}

/// Class-conditional flip probabilities for the two-class problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRates {
    /// P(observed MALE | true FEMALE)
    pub rho_female: f64,
    /// P(observed FEMALE | true MALE)
    pub rho_male: f64,
}

impl NoiseRates {
    pub const ZERO: NoiseRates = NoiseRates {
        rho_female: 0.0,
        rho_male: 0.0,
    };

    pub fn new(rho_female: f64, rho_male: f64) -> Result<Self> {
        let ok = |r: f64| (0.0..1.0).contains(&r);
        if !ok(rho_female) || !ok(rho_male) || rho_female + rho_male >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "invalid noise rates ({rho_female}, {rho_male})"
            )));
        }
        Ok(NoiseRates { rho_female, rho_male })
    }

    /// Flip rate of class index `c` (0 = FEMALE, 1 = MALE).
    pub fn rho(&self, c: usize) -> f64 {
        if c == 0 {
            self.rho_female
        } else {
            self.rho_male
        }
    }
}

pub const IW_MAX_WEIGHT: f64 = 10.0;
const MAX_ANCHOR_RATE: f64 = 0.49;

/// Anchor-point estimate: for each class, one minus the highest predicted
/// probability of that class among samples labeled with it.
pub fn estimate_noise_rates<P: AsRef<[f64]>>(predictions: &[P], labels: &[usize]) -> Result<NoiseRates> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut best = [f64::NEG_INFINITY; 2];
    for (p, &y) in predictions.iter().zip(labels) {
        let p = p.as_ref();
        if y >= 2 || p.len() != 2 {
            return Err(Error::InvalidArgument("noise-rate estimation is two-class only".into()));
        }
        best[y] = best[y].max(p[y]);
    }
    if best.iter().any(|b| b.is_infinite()) {
        return Err(Error::InsufficientData(
            "noise-rate estimation needs at least one sample per class".into(),
        ));
    }
    let rate = |b: f64| (1.0 - b).clamp(0.0, MAX_ANCHOR_RATE);
    NoiseRates::new(rate(best[0]), rate(best[1]))
}

/// Importance weight of a sample with label `y` and predicted `p_y`, and
/// its derivative with respect to `p_y` (zero where the clamp is active).
pub fn iw_weight(p_y: f64, y: usize, rates: &NoiseRates, w_max: f64) -> (f64, f64) {
    let rho_y = rates.rho(y);
    let rho_o = rates.rho(1 - y);
    let c = 1.0 - rho_y - rho_o;
    let py = p_y.max(LOG_FLOOR);
    let w = (py - rho_o) / (c * py);
    if w <= 0.0 {
        (0.0, 0.0)
    } else if w >= w_max {
        (w_max, 0.0)
    } else {
        (w, rho_o / (c * py * py))
    }
}

/// Importance-reweighted cross entropy. The gradient includes the weight's
/// dependence on `p`; use [`iw_loss_detached`] for training.
pub fn iw_loss(p: &[f64], y: usize, rates: &NoiseRates, w_max: f64) -> LossEval {
    let (w, dw) = iw_weight(p[y], y, rates, w_max);
    let ce = cross_entropy(p, y);
    let mut grad = ce.grad.iter().map(|g| w * g).collect::<Vec<_>>();
    grad[y] += dw * ce.value;
    LossEval::new(w * ce.value, grad)
}

/// Importance-reweighted cross entropy with the weight held constant.
pub fn iw_loss_detached(p: &[f64], y: usize, rates: &NoiseRates, w_max: f64) -> LossEval {
    let (w, _) = iw_weight(p[y], y, rates, w_max);
    cross_entropy(p, y).scaled(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PencilPhase {
    Warmup,
    Correction,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PencilConfig {
    pub k_init: f64,
    pub alpha_c: f64,
    pub beta_c: f64,
    pub warmup_epochs: usize,
    pub correction_epochs: usize,
    pub finetune_epochs: usize,
    /// Step size for the per-sample label logits.
    pub label_lr: f64,
}

impl Default for PencilConfig {
    fn default() -> Self {
        PencilConfig {
            k_init: 10.0,
            alpha_c: 0.1,
            beta_c: 0.4,
            warmup_epochs: 5,
            correction_epochs: 15,
            finetune_epochs: 10,
            label_lr: 1.0,
        }
    }
}

impl PencilConfig {
    pub fn phase_for_epoch(&self, epoch: usize) -> PencilPhase {
        if epoch < self.warmup_epochs {
            PencilPhase::Warmup
        } else if epoch < self.warmup_epochs + self.correction_epochs {
            PencilPhase::Correction
        } else {
            PencilPhase::Finetune
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.correction_epochs + self.finetune_epochs
    }
}

/// Learnable label distribution per training sample, stored as logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PencilState {
    num_classes: usize,
    logits: Vec<f64>,
    pub phase: PencilPhase,
}

pub fn pencil_init(labels: &[usize], num_classes: usize, k_init: f64) -> PencilState {
    let mut logits = vec![0.0; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        logits[i * num_classes + y] = k_init;
    }
    PencilState {
        num_classes,
        logits,
        phase: PencilPhase::Warmup,
    }
}

impl PencilState {
    pub fn len(&self) -> usize {
        self.logits.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits(&self, i: usize) -> &[f64] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn distribution(&self, i: usize) -> Vec<f64> {
        softmax(self.logits(i))
    }

    pub fn corrected_label(&self, i: usize) -> usize {
        argmax(self.logits(i))
    }

    /// Moves the label logits of sample `i` against `grad`, the loss
    /// gradient with respect to the label distribution (a mirror-descent
    /// step on the simplex). Unlike the logit gradient it does not vanish
    /// when the distribution saturates. Only allowed while correcting.
    pub fn update(&mut self, i: usize, grad: &[f64], lr: f64) -> Result<()> {
        if self.phase != PencilPhase::Correction {
            return Err(Error::PhaseViolation(self.phase));
        }
        let k = self.num_classes;
        for (l, g) in self.logits[i * k..(i + 1) * k].iter_mut().zip(grad) {
            *l -= lr * g;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PencilStep {
    pub loss: f64,
    /// dL/d(prediction probabilities)
    pub grad_pred: Vec<f64>,
    /// dL/d(label distribution); zero outside the correction phase.
    pub grad_label: Vec<f64>,
}

/// Loss for one sample given the network prediction and its label logits.
///
/// Warm-up: cross entropy against the noisy label. Correction:
/// `KL(q || pred) / K + alpha_c * CE(q, noisy) + beta_c * H(pred)` with
/// `q = softmax(logits)`. Fine-tuning: the KL term alone with `q` frozen.
pub fn pencil_step(
    pred: &[f64],
    logits: &[f64],
    noisy: usize,
    alpha_c: f64,
    beta_c: f64,
    phase: PencilPhase,
) -> PencilStep {
    pencil_objective(pred, &softmax(logits), noisy, alpha_c, beta_c, phase)
}

/// [`pencil_step`] with the label distribution `q` given directly.
pub fn pencil_objective(
    pred: &[f64],
    q: &[f64],
    noisy: usize,
    alpha_c: f64,
    beta_c: f64,
    phase: PencilPhase,
) -> PencilStep {
    let k = pred.len();
    if phase == PencilPhase::Warmup {
        let ce = cross_entropy(pred, noisy);
        return PencilStep {
            loss: ce.value,
            grad_pred: ce.grad,
            grad_label: vec![0.0; k],
        };
    }
    let kf = k as f64;
    let mut kl = 0.0;
    let mut grad_pred = vec![0.0; k];
    let mut grad_label = vec![0.0; k];
    for j in 0..k {
        kl += q[j] * (flog(q[j]) - flog(pred[j]));
        grad_pred[j] = -q[j] * dflog(pred[j]) / kf;
        grad_label[j] = (flog(q[j]) + q[j] * dflog(q[j]) - flog(pred[j])) / kf;
    }
    let mut loss = kl / kf;
    if phase == PencilPhase::Finetune {
        return PencilStep {
            loss,
            grad_pred,
            grad_label: vec![0.0; k],
        };
    }
    let ce = cross_entropy(q, noisy);
    loss += alpha_c * ce.value;
    for (g, c) in grad_label.iter_mut().zip(&ce.grad) {
        *g += alpha_c * c;
    }
    let mut entropy = 0.0;
    for j in 0..k {
        entropy -= pred[j] * flog(pred[j]);
        grad_pred[j] += beta_c * -(flog(pred[j]) + pred[j] * dflog(pred[j]));
    }
    loss += beta_c * entropy;
    PencilStep {
        loss,
        grad_pred,
        grad_label,
    }
}
