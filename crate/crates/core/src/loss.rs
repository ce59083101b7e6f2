//! Focal loss and the quartile-gated super-majority loss over consensus targets.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NEGATIVE_MAX: f64 = 0.25;
pub const MAJORITY_MIN: f64 = 0.5;
pub const SUPER_MAJORITY_MIN: f64 = 0.75;

/// Per-pixel probabilistic target built from weighted binary annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusMask {
    pub y: Tensor,
    pub annotations: Vec<Tensor>,
    pub weights: Vec<f64>,
}

impl ConsensusMask {
    pub fn from_probabilities(y: Tensor) -> Result<Self> {
        if y.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("consensus values must lie in [0, 1]"));
        }
        Ok(ConsensusMask {
            y,
            annotations: Vec::new(),
            weights: Vec::new(),
        })
    }

    /// `y = Σ w_i m_i / Σ w_i` over binary annotator masks.
    pub fn from_annotations(annotations: Vec<Tensor>, weights: Vec<f64>) -> Result<Self> {
        let first = annotations
            .first()
            .ok_or_else(|| Error::invalid("consensus needs at least one annotator"))?;
        if annotations.len() != weights.len() {
            return Err(Error::invalid("one weight per annotator is required"));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("annotator weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        let mut y = Tensor::zeros(first.shape());
        for (m, &w) in annotations.iter().zip(&weights) {
            if m.shape() != first.shape() {
                return Err(Error::shape("consensus", first.shape(), m.shape()));
            }
            y.data_mut()
                .iter_mut()
                .zip(m.data())
                .for_each(|(acc, &v)| *acc += w * v);
        }
        y.data_mut().iter_mut().for_each(|v| *v = (*v / total).clamp(0.0, 1.0));
        Ok(ConsensusMask {
            y,
            annotations,
            weights,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Quartile-gated focal loss with the super-majority boost.
    SuperMajority,
    /// Focal loss on consensus rounded to {0, 1}; no ignore band, no boost.
    RoundedFocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Boost applied where `y >= 0.75`.
    pub beta: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Use the consensus value itself as a soft focal target inside each band.
    pub soft_targets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::SuperMajority,
            beta: 1.25,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            soft_targets: false,
        }
    }
}

impl LossConfig {
    pub fn rounded_focal() -> Self {
        LossConfig {
            kind: LossKind::RoundedFocal,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 1.0) {
            return Err(Error::Config(format!("beta must be >= 1, got {}", self.beta)));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_alpha > 0.0) {
            return Err(Error::Config("focal gamma must be >= 0 and alpha > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    SuperMajority,
    Majority,
    Ignore,
    Negative,
}

impl Band {
    pub fn of(y: f64) -> Band {
        if y >= SUPER_MAJORITY_MIN {
            Band::SuperMajority
        } else if y >= MAJORITY_MIN {
            Band::Majority
        } else if y > NEGATIVE_MAX {
            Band::Ignore
        } else {
            Band::Negative
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    crate::autograd::sigmoid(x)
}

/// `−α (1 − p)^γ ln p` for a positive target, `p = σ(x)`.
fn focal_pos(x: f64, gamma: f64, alpha: f64) -> f64 {
    let log_p = -softplus(-x);
    let q = sigmoid(-x);
    -alpha * q.powf(gamma) * log_p
}

fn focal_pos_grad(x: f64, gamma: f64, alpha: f64) -> f64 {
    let p = sigmoid(x);
    let q = sigmoid(-x);
    let log_p = -softplus(-x);
    let qg = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    alpha * qg * (gamma * p * log_p - q)
}

/// Per-pixel focal loss for a target in `[0, 1]` (hard targets are 0 or 1).
pub fn focal_loss(x: f64, target: f64, gamma: f64, alpha: f64) -> f64 {
    let mut l = 0.0;
    if target > 0.0 {
        l += target * focal_pos(x, gamma, alpha);
    }
    if target < 1.0 {
        l += (1.0 - target) * focal_pos(-x, gamma, alpha);
    }
    l
}

/// Derivative of [`focal_loss`] with respect to the logit.
pub fn focal_loss_grad(x: f64, target: f64, gamma: f64, alpha: f64) -> f64 {
    let mut g = 0.0;
    if target > 0.0 {
        g += target * focal_pos_grad(x, gamma, alpha);
    }
    if target < 1.0 {
        g -= (1.0 - target) * focal_pos_grad(-x, gamma, alpha);
    }
    g
}

/// The focal target and weight a consensus value maps to. Weight zero means ignored.
pub fn pixel_target(y: f64, cfg: &LossConfig) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::invalid(format!("consensus value {y} is outside [0, 1]")));
    }
    if cfg.kind == LossKind::RoundedFocal {
        let hard = if y >= MAJORITY_MIN { 1.0 } else { 0.0 };
        return Ok((if cfg.soft_targets { y } else { hard }, 1.0));
    }
    let soft = |hard: f64| if cfg.soft_targets { y } else { hard };
    Ok(match Band::of(y) {
        Band::SuperMajority => (soft(1.0), cfg.beta),
        Band::Majority => (soft(1.0), 1.0),
        Band::Ignore => (0.0, 0.0),
        Band::Negative => (soft(0.0), 1.0),
    })
}

/// Per-pixel training loss for one consensus value.
pub fn sml(x: f64, y: f64, cfg: &LossConfig) -> Result<f64> {
    let (t, w) = pixel_target(y, cfg)?;
    Ok(if w == 0.0 {
        0.0
    } else {
        w * focal_loss(x, t, cfg.focal_gamma, cfg.focal_alpha)
    })
}

pub fn sml_grad(x: f64, y: f64, cfg: &LossConfig) -> Result<f64> {
    let (t, w) = pixel_target(y, cfg)?;
    Ok(if w == 0.0 {
        0.0
    } else {
        w * focal_loss_grad(x, t, cfg.focal_gamma, cfg.focal_alpha)
    })
}

/// Focal targets and band weights for a whole consensus map.
#[derive(Clone, Debug)]
pub struct PreparedTarget {
    pub targets: Tensor,
    pub weights: Tensor,
    /// Pixels with non-zero weight.
    pub valid: usize,
}

pub fn prepare_target(consensus: &Tensor, cfg: &LossConfig) -> Result<PreparedTarget> {
    let mut targets = Vec::with_capacity(consensus.numel());
    let mut weights = Vec::with_capacity(consensus.numel());
    for &y in consensus.data() {
        let (t, w) = pixel_target(y, cfg)?;
        targets.push(t);
        weights.push(w);
    }
    let valid = weights.iter().filter(|&&w| w > 0.0).count();
    Ok(PreparedTarget {
        targets: Tensor::new(consensus.shape(), targets)?,
        weights: Tensor::new(consensus.shape(), weights)?,
        valid,
    })
}

/// `scale · Σ_i w_i · FL(x_i, t_i)` as a differentiable scalar.
pub fn weighted_focal_sum<'t>(
    logits: &Var<'t>,
    target: &PreparedTarget,
    cfg: &LossConfig,
    scale: f64,
) -> Result<Var<'t>> {
    if logits.shape() != target.targets.shape() {
        return Err(Error::shape("loss", target.targets.shape(), logits.shape()));
    }
    if !logits.value().is_finite() {
        return Err(Error::NonFinite("logits"));
    }
    let (gamma, alpha) = (cfg.focal_gamma, cfg.focal_alpha);
    let x = logits.value().clone();
    let t = target.targets.clone();
    let w = target.weights.clone();
    let total: f64 = x
        .data()
        .iter()
        .zip(t.data())
        .zip(w.data())
        .filter(|(_, &w)| w > 0.0)
        .map(|((&x, &t), &w)| w * focal_loss(x, t, gamma, alpha))
        .sum();
    Ok(logits
        .tape()
        .record(Tensor::scalar(total * scale), &[logits], move |g, _| {
            let s = g.data()[0] * scale;
            let d = x
                .data()
                .iter()
                .zip(t.data())
                .zip(w.data())
                .map(|((&x, &t), &w)| {
                    if w > 0.0 {
                        s * w * focal_loss_grad(x, t, gamma, alpha)
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![Some(Tensor::new(x.shape(), d).unwrap())]
        }))
}

/// Result of [`total_loss`].
pub struct TotalLoss<'t> {
    pub loss: Var<'t>,
    /// Set when every pixel fell in the ignore band; the loss is then zero.
    pub all_ignored: bool,
}

/// Sum over heads of the mean loss over non-ignored pixels.
pub fn total_loss<'t>(heads: &[Var<'t>], consensus: &Tensor, cfg: &LossConfig) -> Result<TotalLoss<'t>> {
    let first = heads
        .first()
        .ok_or_else(|| Error::invalid("total_loss needs at least one head"))?;
    let target = prepare_target(consensus, cfg)?;
    if target.valid == 0 {
        let zero = first.tape().constant(Tensor::scalar(0.0));
        return Ok(TotalLoss {
            loss: zero,
            all_ignored: true,
        });
    }
    let scale = 1.0 / target.valid as f64;
    let mut loss: Option<Var<'t>> = None;
    for head in heads {
        let term = weighted_focal_sum(head, &target, cfg, scale)?;
        loss = Some(match loss {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(TotalLoss {
        loss: loss.expect("at least one head"),
        all_ignored: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn focal_with_zero_gamma_is_cross_entropy() {
        for &x in &[-3.0f64, -0.2, 0.0, 0.7, 4.0] {
            let p = 1.0 / (1.0 + (-x).exp());
            assert!((focal_loss(x, 1.0, 0.0, 1.0) + p.ln()).abs() < 1e-12);
            assert!((focal_loss(x, 0.0, 0.0, 1.0) + (1.0 - p).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_closed_form_at_zero_logit() {
        let want = 0.25 * std::f64::consts::LN_2;
        assert!((focal_loss(0.0, 1.0, 2.0, 1.0) - want).abs() < 1e-15);
    }

    #[test]
    fn confident_predictions_cost_nothing() {
        assert!(focal_loss(40.0, 1.0, 2.0, 0.25) < 1e-30);
        assert!(sml(-40.0, 0.0, &LossConfig::default()).unwrap() < 1e-30);
    }

    #[test]
    fn focal_is_stable_for_extreme_logits() {
        for &x in &[-800.0, 800.0] {
            for t in [0.0, 1.0] {
                assert!(focal_loss(x, t, 2.0, 0.25).is_finite());
                assert!(focal_loss_grad(x, t, 2.0, 0.25).is_finite());
            }
        }
    }

    #[test]
    fn band_boundaries_follow_the_inequalities() {
        assert_eq!(Band::of(0.25), Band::Negative);
        assert_eq!(Band::of(0.2500001), Band::Ignore);
        assert_eq!(Band::of(0.5), Band::Majority);
        assert_eq!(Band::of(0.75), Band::SuperMajority);
        assert_eq!(Band::of(1.0), Band::SuperMajority);
    }

    #[test]
    fn super_majority_boost_ratio() {
        let cfg = LossConfig::default();
        for &x in &[-2.0, 0.0, 0.3, 1.5] {
            let r = sml(x, 0.8, &cfg).unwrap() / sml(x, 0.6, &cfg).unwrap();
            assert_eq!(r, 1.25);
        }
    }

    #[test]
    fn ignore_band_has_no_loss_or_gradient() {
        let cfg = LossConfig::default();
        assert_eq!(sml(3.0, 0.3, &cfg).unwrap(), 0.0);
        assert_eq!(sml_grad(3.0, 0.3, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_consensus_is_rejected() {
        let cfg = LossConfig::default();
        assert!(sml(0.0, 1.2, &cfg).is_err());
        assert!(sml(0.0, -0.1, &cfg).is_err());
    }

    #[test]
    fn focal_gradient_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-3.0, -0.4, 0.0, 0.9, 5.0] {
            for &t in &[0.0, 0.3, 1.0] {
                for &gamma in &[0.0, 0.5, 2.0] {
                    let num = (focal_loss(x + h, t, gamma, 0.25) - focal_loss(x - h, t, gamma, 0.25))
                        / (2.0 * h);
                    let ana = focal_loss_grad(x, t, gamma, 0.25);
                    assert!((num - ana).abs() < 1e-7, "x={x} t={t} g={gamma}");
                }
            }
        }
    }

    #[test]
    fn rounded_focal_has_no_ignore_band() {
        let cfg = LossConfig::rounded_focal();
        assert_eq!(pixel_target(0.3, &cfg).unwrap(), (0.0, 1.0));
        assert_eq!(pixel_target(0.8, &cfg).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn fully_ignored_target_flags_and_returns_zero() {
        let tape = Tape::new();
        let head = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let y = Tensor::full(&[1, 1, 2, 2], 0.4);
        let out = total_loss(&[head], &y, &LossConfig::default()).unwrap();
        assert!(out.all_ignored);
        assert_eq!(out.loss.value().data(), &[0.0]);
    }
}
