//! Cross-entropy, supervised contrastive loss, and their convex
//! combination `beta * CE + (1 - beta) * supcon` used by every training
//! stage.
//!
//! The contrastive term operates on unit-normalized feature rows drawn
//! from the whole mini-batch: for each anchor, same-label rows form the
//! positive set and every other row enters the denominator. Whether the
//! anchor itself participates (in its positive set and in the
//! denominator) is switchable; the default excludes it, matching the
//! standard formulation. Anchors without positives contribute zero and
//! are not renormalized away: the loss is a sum over anchors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Whether an anchor is a member of its own positive set and denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelfInclusion {
    /// Anchor excluded: positives are other same-label rows, denominator
    /// runs over all rows except the anchor.
    #[default]
    Exclude,
    /// Anchor included in both sums, reading the printed formula literally.
    Include,
}

/// Hyper-parameters for [`combined_loss`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight on cross-entropy; `1 - beta` goes to the contrastive term.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Optional per-class weights for the cross-entropy term.
    pub class_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub self_inclusion: SelfInclusion,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.9,
            tau: 0.1,
            class_weights: None,
            self_inclusion: SelfInclusion::Exclude,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must be in [0,1], got {}", self.beta)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config("class weights must be positive".into()));
            }
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], num_classes: usize, context: &str) -> Result<()> {
    for &y in labels {
        if y >= num_classes {
            return Err(Error::LabelRange {
                label: y,
                num_classes,
                context: context.into(),
            });
        }
    }
    Ok(())
}

/// Mean (optionally class-weighted) cross-entropy over a batch of logits.
pub fn cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    let [b, c] = g.value(logits).shape();
    if labels.len() != b {
        return Err(Error::Shape {
            context: "cross_entropy labels".into(),
            expected: vec![b],
            got: vec![labels.len()],
        });
    }
    check_labels(labels, c, "cross_entropy")?;
    let weights: Option<Vec<T>> =
        class_weights.map(|w| w.iter().map(|v| T::from_f64(*v)).collect());
    Ok(g.cross_entropy(logits, labels, weights.as_deref()))
}

/// Supervised contrastive loss over unit-normalized feature rows.
///
/// `features` is `B x F` with every row within 1e-4 of unit norm
/// (violations are contract errors); `tau` is the temperature. The result
/// is the sum over anchors of the mean negative log-ratio across that
/// anchor's positives.
pub fn sup_con_loss<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    labels: &[usize],
    tau: f64,
    variant: SelfInclusion,
) -> Result<Var> {
    let [b, _f] = g.value(features).shape();
    if labels.len() != b {
        return Err(Error::Shape {
            context: "sup_con_loss labels".into(),
            expected: vec![b],
            got: vec![labels.len()],
        });
    }
    if b < 2 {
        return Err(Error::Contract(format!(
            "sup_con_loss requires a batch of at least 2, got {b}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    for r in 0..b {
        let norm = g.value(features).row(r).iter().map(|v| *v * *v).sum::<T>().sqrt();
        if (norm.to_f64() - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!(
                "sup_con_loss: feature row {r} has norm {norm}, expected 1"
            )));
        }
    }

    // Positive-pair weights: row j holds 1/|P_j| at the columns of P_j.
    let mut pos_weights = vec![0.0f64; b * b];
    let mut has_positives = vec![0.0f64; b];
    for j in 0..b {
        let positives: Vec<usize> = (0..b)
            .filter(|&p| labels[p] == labels[j] && (variant == SelfInclusion::Include || p != j))
            .collect();
        if positives.is_empty() {
            continue;
        }
        has_positives[j] = 1.0;
        let w = 1.0 / positives.len() as f64;
        for p in positives {
            pos_weights[j * b + p] = w;
        }
    }

    let sims = g.matmul_nt(features, features);
    let scaled = g.scale(sims, T::from_f64(1.0 / tau));

    // Denominator: log-sum-exp per row, with the anchor's own column
    // suppressed in the excluding variant.
    let denom_input = match variant {
        SelfInclusion::Include => scaled,
        SelfInclusion::Exclude => {
            let mut diag = vec![T::ZERO; b * b];
            for j in 0..b {
                diag[j * b + j] = T::from_f64(-1e9);
            }
            let d = g.input(Tensor::from_raw(b, b, diag));
            g.add(scaled, d)
        }
    };
    let lse = g.logsumexp_rows(denom_input);

    let wpos = g.input(Tensor::from_raw(
        b,
        b,
        pos_weights.iter().map(|v| T::from_f64(*v)).collect(),
    ));
    let numer_terms = g.mul(scaled, wpos);
    let numer = g.sum_all(numer_terms);

    let anchor_gate = g.input(Tensor::from_raw(
        b,
        1,
        has_positives.iter().map(|v| T::from_f64(*v)).collect(),
    ));
    let denom_terms = g.mul(lse, anchor_gate);
    let denom = g.sum_all(denom_terms);

    Ok(g.sub(denom, numer))
}

/// `beta * CE + (1 - beta) * supcon` on one mini-batch.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    proj_features: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let ce = cross_entropy(g, logits, labels, cfg.class_weights.as_deref())?;
    let sc = sup_con_loss(g, proj_features, labels, cfg.tau, cfg.self_inclusion)?;
    let ce_term = g.scale(ce, T::from_f64(cfg.beta));
    let sc_term = g.scale(sc, T::from_f64(1.0 - cfg.beta));
    Ok(g.add(ce_term, sc_term))
}

// ── Plain-tensor entry points ───────────────────────────────────────────

pub fn cross_entropy_eval<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<T> {
    let mut g = Graph::new();
    let lv = g.input(logits.clone());
    let loss = cross_entropy(&mut g, lv, labels, class_weights)?;
    Ok(g.value(loss).item())
}

pub fn sup_con_eval<T: Scalar>(
    features: &Tensor<T>,
    labels: &[usize],
    tau: f64,
    variant: SelfInclusion,
) -> Result<T> {
    let mut g = Graph::new();
    let fv = g.input(features.clone());
    let loss = sup_con_loss(&mut g, fv, labels, tau, variant)?;
    Ok(g.value(loss).item())
}

pub fn combined_eval<T: Scalar>(
    logits: &Tensor<T>,
    proj_features: &Tensor<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<T> {
    let mut g = Graph::new();
    let lv = g.input(logits.clone());
    let fv = g.input(proj_features.clone());
    let loss = combined_loss(&mut g, lv, fv, labels, cfg)?;
    Ok(g.value(loss).item())
}

/// Literal term-by-term enumeration of the contrastive loss, kept free of
/// the graph machinery so it can serve as an independent oracle.
pub mod oracle {
    use super::SelfInclusion;

    pub fn sup_con_reference(
        features: &[Vec<f64>],
        labels: &[usize],
        tau: f64,
        variant: SelfInclusion,
    ) -> f64 {
        let b = features.len();
        let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(a, b)| a * b).sum() };
        let mut total = 0.0;
        for j in 0..b {
            let positives: Vec<usize> = (0..b)
                .filter(|&p| {
                    labels[p] == labels[j] && (variant == SelfInclusion::Include || p != j)
                })
                .collect();
            if positives.is_empty() {
                continue;
            }
            let mut anchor_sum = 0.0;
            for &p in &positives {
                let numerator = (dot(&features[j], &features[p]) / tau).exp();
                let denominator: f64 = (0..b)
                    .filter(|&a| variant == SelfInclusion::Include || a != j)
                    .map(|a| (dot(&features[j], &features[a]) / tau).exp())
                    .sum();
                anchor_sum += -(numerator / denominator).ln();
            }
            total += anchor_sum / positives.len() as f64;
        }
        total
    }
}
