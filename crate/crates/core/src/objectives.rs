//! Token-level similarity, contrastive and adversarial losses, and the
//! weighted training objective.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::Var;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5, gamma: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            bail!(Config, "loss weights must be finite and non-negative: {self:?}");
        }
        Ok(())
    }
}

/// Weighted token interaction between every sequence in `x1: [B1, N1, e]`
/// and every sequence in `x2: [B2, N2, e]`, giving `[B1, B2]`.
///
/// `w1: [B1, N1]` and `w2: [B2, N2]` are per-token logits; they are
/// softmax-normalized over tokens here.
pub fn wti<'t>(x1: Var<'t>, w1: Var<'t>, x2: Var<'t>, w2: Var<'t>) -> Result<Var<'t>> {
    let (s1, s2) = (x1.shape(), x2.shape());
    if s1.len() != 3 || s2.len() != 3 || s1[2] != s2[2] {
        bail!(Dimension, "wti: token sets {s1:?} and {s2:?}");
    }
    if s1[1] == 0 || s2[1] == 0 {
        bail!(Input, "wti: empty token sequence");
    }
    let (b1, n1, b2, n2, e) = (s1[0], s1[1], s2[0], s2[1], s1[2]);
    if w1.shape() != [b1, n1] || w2.shape() != [b2, n2] {
        bail!(Dimension, "wti: token weights {:?} / {:?}", w1.shape(), w2.shape());
    }
    let a = x1.l2_normalize_lastdim(NORM_EPS)?.reshape([b1 * n1, e])?;
    let b = x2.l2_normalize_lastdim(NORM_EPS)?.reshape([b2 * n2, e])?;
    let sim = a.matmul(b.transpose()?)?.reshape([b1, n1, b2, n2])?;
    let p1 = w1.softmax_lastdim()?;
    let p2 = w2.softmax_lastdim()?;

    // each token of x1 against its best match in x2
    let fwd = sim.max_axis(3)?.mul(p1.repeat_axis(2, b2)?)?.sum_axis(1)?;
    // each token of x2 against its best match in x1
    let bwd = sim.max_axis(1)?.mul(p2.repeat_axis(0, b1)?)?.sum_axis(2)?;
    fwd.add(bwd)?.scale(0.5)
}

/// Symmetric InfoNCE over a square score matrix with scale `inv_tau`
/// (a scalar var holding `1/tau`). Ground truth is the diagonal.
pub fn contrastive_loss<'t>(s: Var<'t>, inv_tau: Var<'t>) -> Result<Var<'t>> {
    let shape = s.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        bail!(Dimension, "contrastive_loss needs a square matrix, got {shape:?}");
    }
    let logits = s.mul_scalar(inv_tau)?;
    let rows = logits.log_softmax_lastdim()?.diag()?.mean_all()?;
    let cols = logits.transpose()?.log_softmax_lastdim()?.diag()?.mean_all()?;
    rows.add(cols)?.scale(-0.5)
}

/// Domain-classification cross-entropy. Class 0 is "masked", class 1
/// "unmasked"; both inputs are `[B, 2]` probability rows.
pub fn adversarial_loss<'t>(d_masked: Var<'t>, d_unmasked: Var<'t>) -> Result<Var<'t>> {
    for (name, d) in [("masked", d_masked), ("unmasked", d_unmasked)] {
        let s = d.shape();
        if s.len() != 2 || s[1] != 2 {
            bail!(Dimension, "adversarial_loss: {name} probabilities {s:?}");
        }
    }
    let a = d_masked.select(1, 0)?.log_clamped(PROB_FLOOR)?.mean_all()?;
    let b = d_unmasked.select(1, 1)?.log_clamped(PROB_FLOOR)?.mean_all()?;
    a.add(b)?.scale(-0.5)
}

/// The six component losses of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<T> {
    pub vtc: T,
    pub vtc_h: T,
    pub vvc_h: T,
    pub vtc_l: T,
    pub vvc_l: T,
    pub adv: T,
}

impl<'t> LossParts<Var<'t>> {
    pub fn values(&self) -> Result<LossParts<f64>> {
        Ok(LossParts {
            vtc: self.vtc.item()?,
            vtc_h: self.vtc_h.item()?,
            vvc_h: self.vvc_h.item()?,
            vtc_l: self.vtc_l.item()?,
            vvc_l: self.vvc_l.item()?,
            adv: self.adv.item()?,
        })
    }
}

impl LossParts<f64> {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.vtc + w.alpha * (self.vtc_h + self.vvc_h) + w.beta * (self.vtc_l + self.vvc_l) + w.gamma * self.adv
    }
}

/// `L_vtc + alpha (L_vtc^H + L_vvc^H) + beta (L_vtc^L + L_vvc^L) + gamma L_adv`.
/// Terms with zero weight are left off the tape.
pub fn total_loss<'t>(parts: &LossParts<Var<'t>>, w: &LossWeights) -> Result<Var<'t>> {
    let mut total = parts.vtc;
    for (k, a, b) in [(w.alpha, parts.vtc_h, parts.vvc_h), (w.beta, parts.vtc_l, parts.vvc_l)] {
        if k != 0.0 {
            total = total.add(a.add(b)?.scale(k)?)?;
        }
    }
    if w.gamma != 0.0 {
        total = total.add(parts.adv.scale(w.gamma)?)?;
    }
    Ok(total)
}

/// One line of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    #[serde(rename = "L_vtc")]
    pub vtc: f64,
    #[serde(rename = "L_vtc_H")]
    pub vtc_h: f64,
    #[serde(rename = "L_vvc_H")]
    pub vvc_h: f64,
    #[serde(rename = "L_vtc_L")]
    pub vtc_l: f64,
    #[serde(rename = "L_vvc_L")]
    pub vvc_l: f64,
    #[serde(rename = "L_adv")]
    pub adv: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn new(step: u64, p: &LossParts<f64>, total: f64) -> Self {
        Self { step, vtc: p.vtc, vtc_h: p.vtc_h, vvc_h: p.vvc_h, vtc_l: p.vtc_l, vvc_l: p.vvc_l, adv: p.adv, total }
    }
}
