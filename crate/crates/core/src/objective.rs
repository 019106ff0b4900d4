//! The branching loss: a Poisson-type Bregman term for remaining splits, a
//! binary cross-entropy for deletion, and squared-error / cross-entropy terms
//! for the base process endpoint.

use serde::{Deserialize, Serialize};

use crate::conditional::{ElementTarget, PathTargets};
use crate::error::{Error, Result};
use crate::hazard::HazardSpec;
use crate::latent::ElementState;

/// Clamp for deletion probabilities inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Per-element model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub endpoint_mean: Vec<f64>,
    /// One logit per class, mask class last.
    pub token_logits: Vec<f64>,
    /// `ln R`.
    pub log_splits: f64,
    /// `logit rho`.
    pub delete_logit: f64,
}

impl Prediction {
    pub fn splits(&self) -> f64 {
        self.log_splits.exp()
    }

    pub fn delete_prob(&self) -> f64 {
        sigmoid(self.delete_logit)
    }

    pub fn token_probs(&self) -> Vec<f64> {
        softmax(&self.token_logits)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

/// `R_pred - R ln R_pred`; minimised at `R_pred = R`.
pub fn split_loss(r_target: u32, r_pred: f64) -> Result<f64> {
    if !(r_pred > 0.0) {
        return Err(Error::domain(format!("predicted split count must be positive, got {r_pred}")));
    }
    Ok(r_pred - r_target as f64 * r_pred.ln())
}

/// Binary cross-entropy with `rho_pred` clamped to `[eps, 1 - eps]`.
pub fn deletion_loss(rho_target: bool, rho_pred: f64) -> f64 {
    let p = rho_pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if rho_target {
        -p.ln()
    } else {
        -(-p).ln_1p()
    }
}

/// Time weight for a base-process term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeWeight {
    Constant { value: f64 },
    /// `scale * min(h(t), cap)`.
    HazardScaled { hazard: HazardSpec, scale: f64, cap: f64 },
}

impl Default for TimeWeight {
    fn default() -> Self {
        TimeWeight::Constant { value: 1.0 }
    }
}

impl TimeWeight {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            TimeWeight::Constant { value } => value,
            TimeWeight::HazardScaled { hazard, scale, cap } => {
                let h = if t < 1.0 { hazard.hazard_rate_unchecked(t) } else { f64::INFINITY };
                scale * h.min(cap)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossWeights {
    #[serde(default)]
    pub continuous: TimeWeight,
    #[serde(default)]
    pub discrete: TimeWeight,
}

/// Unweighted base-process terms: `(squared error, token cross-entropy)`.
pub fn base_terms(anchor: &ElementState, pred: &Prediction) -> Result<(f64, f64)> {
    if anchor.continuous.len() != pred.endpoint_mean.len() {
        return Err(Error::structural(format!(
            "anchor has {} coordinates, prediction {}",
            anchor.continuous.len(),
            pred.endpoint_mean.len()
        )));
    }
    let se = anchor.continuous.iter().zip(&pred.endpoint_mean).map(|(a, m)| (m - a).powi(2)).sum();
    let tok = anchor.token as usize;
    if tok >= pred.token_logits.len() {
        return Err(Error::structural(format!("token {tok} outside {} logits", pred.token_logits.len())));
    }
    let ce = log_sum_exp(&pred.token_logits) - pred.token_logits[tok];
    Ok((se, ce))
}

/// `lambda_c(t) |mean - a|^2 + lambda_d(t) CE(logits, token)`.
pub fn base_loss(anchor: &ElementState, pred: &Prediction, weights: &LossWeights, t: f64) -> Result<f64> {
    let (se, ce) = base_terms(anchor, pred)?;
    Ok(weights.continuous.at(t) * se + weights.discrete.at(t) * ce)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub split: f64,
    pub delete: f64,
    pub continuous: f64,
    pub discrete: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.split += o.split;
        self.delete += o.delete;
        self.continuous += o.continuous;
        self.discrete += o.discrete;
        self.total += o.total;
    }

    fn scale(&mut self, c: f64) {
        self.split *= c;
        self.delete *= c;
        self.continuous *= c;
        self.discrete *= c;
        self.total *= c;
    }
}

/// Loss of one element, with weights applied.
pub fn element_loss(target: &ElementTarget, pred: &Prediction, weights: &LossWeights, t: f64) -> Result<LossBreakdown> {
    let split = split_loss(target.splits, pred.splits())?;
    let delete = deletion_loss(target.deleted, pred.delete_prob());
    let (se, ce) = base_terms(&target.anchor, pred)?;
    let continuous = weights.continuous.at(t) * se;
    let discrete = weights.discrete.at(t) * ce;
    Ok(LossBreakdown { split, delete, continuous, discrete, total: split + delete + continuous + discrete })
}

/// Gradient of [`element_loss`] with respect to the prediction's raw outputs.
/// Ignores the deletion clamp, which is inactive for `|delete_logit| < 16`.
pub fn element_loss_grad(target: &ElementTarget, pred: &Prediction, weights: &LossWeights, t: f64) -> Prediction {
    let wc = weights.continuous.at(t);
    let wd = weights.discrete.at(t);
    let endpoint_mean = pred.endpoint_mean.iter().zip(&target.anchor.continuous).map(|(m, a)| 2.0 * wc * (m - a)).collect();
    let mut token_logits = softmax(&pred.token_logits);
    for (c, g) in token_logits.iter_mut().enumerate() {
        if c == target.anchor.token as usize {
            *g -= 1.0;
        }
        *g *= wd;
    }
    Prediction {
        endpoint_mean,
        token_logits,
        log_splits: pred.log_splits.exp() - target.splits as f64,
        delete_logit: sigmoid(pred.delete_logit) - f64::from(u8::from(target.deleted)),
    }
}

/// One training example: the time, the targets and the predictions at that time.
#[derive(Debug, Clone, Copy)]
pub struct LossItem<'a> {
    pub t: f64,
    pub targets: &'a PathTargets,
    pub predictions: &'a [Prediction],
}

/// Per-example loss summed over non-fixed elements.
pub fn example_loss(item: &LossItem<'_>, weights: &LossWeights) -> Result<LossBreakdown> {
    if item.targets.len() != item.predictions.len() {
        return Err(Error::structural(format!(
            "{} targets but {} predictions",
            item.targets.len(),
            item.predictions.len()
        )));
    }
    let mut acc = LossBreakdown::default();
    for (tg, p) in item.targets.items.iter().zip(item.predictions) {
        if let Some(tg) = tg {
            acc.add(&element_loss(tg, p, weights, item.t)?);
        }
    }
    Ok(acc)
}

/// Mean over the batch of per-example sums.
pub fn cbf_loss(batch: &[LossItem<'_>], weights: &LossWeights) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut acc = LossBreakdown::default();
    for item in batch {
        acc.add(&example_loss(item, weights)?);
    }
    acc.scale(1.0 / batch.len() as f64);
    Ok(acc)
}
