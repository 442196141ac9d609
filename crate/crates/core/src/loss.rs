//! Training objectives: source cross-entropy, teacher pseudo-labels with an
//! image-level quality weight, the quality-weighted target loss, the
//! symmetric stop-gradient contrastive loss, and their weighted sum.
//!
//! Cross-entropy terms are averaged over contributing (non-ignored) pixels
//! rather than summed, so magnitudes do not depend on crop size.

use serde::{Deserialize, Serialize};

use crate::autograd::{neg_cosine_row, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{LabelMap, ProbabilityField, IGNORE_LABEL};

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeValue<T> {
    pub value: T,
    /// No pixel contributed; `value` is zero.
    pub no_support: bool,
}

fn check_field_label<T: Scalar>(probs: &ProbabilityField<T>, labels: &LabelMap) -> Result<()> {
    if probs.height != labels.height || probs.width != labels.width {
        return Err(Error::Shape(format!(
            "probabilities {}x{} vs labels {}x{}",
            probs.height, probs.width, labels.height, labels.width
        )));
    }
    labels.validate(probs.num_classes)
}

/// Mean over non-ignored pixels of `-ln(max(p_true, 1e-12))`.
pub fn source_ce<T: Scalar>(probs: &ProbabilityField<T>, labels: &LabelMap) -> Result<CeValue<T>> {
    check_field_label(probs, labels)?;
    let hw = probs.height * probs.width;
    let floor = T::of(PROB_FLOOR);
    let mut total = T::zero();
    let mut count = 0usize;
    for j in 0..hw {
        let t = labels.data[j];
        if t == IGNORE_LABEL {
            continue;
        }
        total += -probs.values[t as usize * hw + j].max(floor).ln();
        count += 1;
    }
    Ok(if count == 0 {
        CeValue {
            value: T::zero(),
            no_support: true,
        }
    } else {
        CeValue {
            value: total / T::of(count as f64),
            no_support: false,
        }
    })
}

/// Teacher pseudo-labels: per-pixel argmax, lowest index on ties. The
/// one-hot grid is kept as a class-index map.
pub fn pseudo_labels<T: Scalar>(teacher_probs: &ProbabilityField<T>) -> LabelMap {
    teacher_probs.argmax()
}

/// Fraction of pixels whose top class probability is strictly above `tau`.
pub fn quality<T: Scalar>(teacher_probs: &ProbabilityField<T>, tau: T) -> T {
    let hw = teacher_probs.height * teacher_probs.width;
    let confident = (0..hw)
        .filter(|&j| teacher_probs.pixel(j).fold(T::neg_infinity(), T::max) > tau)
        .count();
    T::of(confident as f64) / T::of(hw as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBundle<T> {
    pub labels: LabelMap,
    pub num_classes: usize,
    pub quality: T,
    pub tau: T,
}

impl<T: Scalar> PseudoLabelBundle<T> {
    pub fn from_teacher(teacher_probs: &ProbabilityField<T>, tau: T) -> Result<Self> {
        if !(tau > T::zero() && tau < T::one()) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
        }
        Ok(Self {
            labels: pseudo_labels(teacher_probs),
            num_classes: teacher_probs.num_classes,
            quality: quality(teacher_probs, tau),
            tau,
        })
    }

    /// Dense one-hot grid laid out `[C, H, W]`.
    pub fn one_hot(&self) -> Vec<T> {
        let hw = self.labels.data.len();
        let mut out = vec![T::zero(); self.num_classes * hw];
        for (j, &c) in self.labels.data.iter().enumerate() {
            out[c as usize * hw + j] = T::one();
        }
        out
    }
}

/// `q` times the mean cross-entropy of the student against the pseudo-labels.
pub fn target_loss<T: Scalar>(student_probs: &ProbabilityField<T>, bundle: &PseudoLabelBundle<T>) -> Result<T> {
    let ce = source_ce(student_probs, &bundle.labels)?;
    Ok(bundle.quality * ce.value)
}

/// Negative cosine similarity `-(p/|p|)·(z/|z|)`.
pub fn neg_cosine<T: Scalar>(p: &[T], z: &[T]) -> Result<T> {
    if p.len() != z.len() {
        return Err(Error::Shape(format!("embedding lengths {} vs {}", p.len(), z.len())));
    }
    neg_cosine_row(p, z)
}

/// Prediction (`p`) and projection (`z`) outputs for the two views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEmbeddings<T> {
    pub p1: Vec<T>,
    pub p2: Vec<T>,
    pub z1: Vec<T>,
    pub z2: Vec<T>,
}

/// `½·D(p1, sg(z2)) + ½·D(p2, sg(z1))`. Values only; see
/// [`contrastive_loss_graph`] for the differentiable form.
pub fn contrastive_loss<T: Scalar>(emb: &ViewEmbeddings<T>) -> Result<T> {
    let half = T::of(0.5);
    Ok(half * neg_cosine(&emb.p1, &emb.z2)? + half * neg_cosine(&emb.p2, &emb.z1)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the target self-training term.
    pub beta: f64,
    /// Weight of the contrastive term.
    pub gamma: f64,
}

impl Default for LossWeights {
    /// Both 1.0; never reported alongside the method, so unverified.
    fn default() -> Self {
        Self { beta: 1.0, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss.{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub source: f64,
    pub target: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// `L_S + β·L_T + γ·L_CLR`.
pub fn total_loss(source: f64, target: f64, contrastive: f64, weights: LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("L_S", source), ("L_T", target), ("L_CLR", contrastive)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(LossBreakdown {
        source,
        target,
        contrastive,
        total: source + weights.beta * target + weights.gamma * contrastive,
    })
}

/// Differentiable weighted pixel cross-entropy over `[N, C, H, W]` logits,
/// normalized by the number of non-ignored pixels. Returns `None` when every
/// pixel is ignored.
pub fn pixel_ce_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[u8], weights: &[T]) -> Result<Option<Var>> {
    let count = targets.iter().filter(|&&t| t != IGNORE_LABEL).count();
    if count == 0 {
        return Ok(None);
    }
    g.pixel_cross_entropy(logits, targets, weights, T::of(count as f64)).map(Some)
}

/// Batch mean of the symmetric contrastive loss on `[N, D]` embeddings,
/// with `z1` and `z2` detached.
pub fn contrastive_loss_graph<T: Scalar>(g: &mut Graph<T>, p1: Var, z1: Var, p2: Var, z2: Var) -> Result<Var> {
    let z2_sg = g.detach(z2);
    let z1_sg = g.detach(z1);
    let d12 = g.neg_cosine(p1, z2_sg)?;
    let d21 = g.neg_cosine(p2, z1_sg)?;
    let m12 = g.mean(d12);
    let m21 = g.mean(d21);
    let a = g.scale(m12, T::of(0.5));
    let b = g.scale(m21, T::of(0.5));
    g.add(a, b)
}
