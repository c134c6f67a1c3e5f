//! Uncertain feature means, the uncertain feature loss, the smoothed source
//! cross-entropy and uncertainty-based filtering.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfalError};
use crate::numeric::{log_softmax, squared_distance, top_k_sum};
use crate::pseudo_store::PseudoLabelStore;

pub const DEFAULT_PHI: f64 = 0.5;
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

/// Per-class feature means built from (possibly random) class assignments.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMeans {
    /// `None` until the class has received at least one sample.
    pub means: Vec<Option<Vec<f64>>>,
    /// Class assigned to each target sample at the last rebuild; `None` when filtered.
    pub assignments: Vec<Option<usize>>,
}

impl ClassMeans {
    pub fn available(&self, class: usize) -> bool {
        self.means.get(class).is_some_and(Option::is_some)
    }

    pub fn n_available(&self) -> usize {
        self.means.iter().filter(|m| m.is_some()).count()
    }

    pub fn mean(&self, class: usize) -> Option<&[f64]> {
        self.means.get(class)?.as_deref()
    }
}

/// Where the class assignments for the feature means come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentSource {
    /// One class per sample drawn with probability `p_tilde`.
    Resampled,
    /// The arg-max pseudo-label.
    PseudoLabel,
}

/// Draws one class per kept sample with probability proportional to `p_tilde`.
pub fn resample_assignments(
    store: &PseudoLabelStore,
    kept: &[bool],
    rng: &mut impl Rng,
) -> Vec<Option<usize>> {
    store
        .records
        .iter()
        .zip(kept)
        .map(|(record, &keep)| {
            keep.then(|| match WeightedIndex::new(&record.p_tilde) {
                Ok(dist) => dist.sample(rng),
                Err(_) => record.p_hat,
            })
        })
        .collect()
}

pub fn pseudo_label_assignments(store: &PseudoLabelStore, kept: &[bool]) -> Vec<Option<usize>> {
    store
        .records
        .iter()
        .zip(kept)
        .map(|(record, &keep)| keep.then_some(record.p_hat))
        .collect()
}

pub fn assignments(
    source: AssignmentSource,
    store: &PseudoLabelStore,
    kept: &[bool],
    rng: &mut impl Rng,
) -> Vec<Option<usize>> {
    match source {
        AssignmentSource::Resampled => resample_assignments(store, kept, rng),
        AssignmentSource::PseudoLabel => pseudo_label_assignments(store, kept),
    }
}

/// Class means of the assigned features. Classes without a current
/// assignment keep their previous mean when one exists.
pub fn build_ufm<F: AsRef<[f64]>>(
    features: &[F],
    assignments: &[Option<usize>],
    n_classes: usize,
    previous: Option<&ClassMeans>,
) -> Result<ClassMeans> {
    if features.len() != assignments.len() {
        return Err(UfalError::Shape {
            expected: features.len(),
            got: assignments.len(),
        });
    }
    let dim = features.first().map_or(0, |f| f.as_ref().len());
    let mut sums = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (feature, assignment) in features.iter().zip(assignments) {
        let Some(class) = *assignment else { continue };
        if class >= n_classes {
            return Err(UfalError::ClassIndex { class, n_classes });
        }
        counts[class] += 1;
        for (s, v) in sums[class].iter_mut().zip(feature.as_ref()) {
            *s += v;
        }
    }
    let means: Vec<Option<Vec<f64>>> = (0..n_classes)
        .map(|c| {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                Some(sums[c].iter().map(|s| s / n).collect())
            } else {
                previous.and_then(|p| p.mean(c)).map(<[f64]>::to_vec)
            }
        })
        .collect();
    if means.iter().all(Option::is_none) {
        return Err(UfalError::ColdMeans);
    }
    Ok(ClassMeans {
        means,
        assignments: assignments.to_vec(),
    })
}

/// The two parts of the uncertain feature loss for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UflTerms {
    /// `None` when fewer than two classes have a mean.
    pub distance: Option<f64>,
    pub prediction: f64,
}

impl UflTerms {
    pub fn total(&self) -> f64 {
        self.distance.unwrap_or(0.0) + self.prediction
    }
}

/// Distance-based term and its gradient with respect to the feature.
///
/// Cross-entropy between `p_tilde` (restricted to classes with a mean and
/// renormalized) and the softmax over `-||feature - mean_c||^2`. Means are
/// constants. Returns `None` if fewer than two classes have a mean or
/// `p_tilde` has no mass on them.
pub fn distance_term(feature: &[f64], p_tilde: &[f64], means: &ClassMeans) -> Option<(f64, Vec<f64>)> {
    let classes: Vec<usize> = (0..p_tilde.len()).filter(|&c| means.available(c)).collect();
    if classes.len() < 2 {
        return None;
    }
    let mass: f64 = classes.iter().map(|&c| p_tilde[c]).sum();
    if mass <= 0.0 {
        return None;
    }
    let target: Vec<f64> = classes.iter().map(|&c| p_tilde[c] / mass).collect();
    let scores: Vec<f64> = classes
        .iter()
        .map(|&c| -squared_distance(feature, means.mean(c).expect("available")))
        .collect();
    let log_q = log_softmax(&scores);
    let loss = -target.iter().zip(&log_q).map(|(t, l)| t * l).sum::<f64>();
    let mut grad = vec![0.0; feature.len()];
    for ((&c, &t), &l) in classes.iter().zip(&target).zip(&log_q) {
        let coef = -2.0 * (l.exp() - t);
        for ((g, x), m) in grad.iter_mut().zip(feature).zip(means.mean(c).expect("available")) {
            *g += coef * (x - m);
        }
    }
    Some((loss, grad))
}

/// Prediction-based term `-log softmax(logits)[p_hat]` and its logit gradient.
pub fn prediction_term(logits: &[f64], p_hat: usize) -> Result<(f64, Vec<f64>)> {
    smoothed_cross_entropy(logits, p_hat, 0.0)
}

/// Uncertain feature loss for one target sample given the model's
/// probabilities `g(x)`.
pub fn ufl(
    x_feature: &[f64],
    model_probs: &[f64],
    p_tilde: &[f64],
    p_hat: usize,
    means: &ClassMeans,
) -> Result<UflTerms> {
    if p_hat >= model_probs.len() {
        return Err(UfalError::ClassIndex {
            class: p_hat,
            n_classes: model_probs.len(),
        });
    }
    if p_tilde.len() != model_probs.len() {
        return Err(UfalError::Shape {
            expected: model_probs.len(),
            got: p_tilde.len(),
        });
    }
    Ok(UflTerms {
        distance: distance_term(x_feature, p_tilde, means).map(|(l, _)| l),
        prediction: -model_probs[p_hat].max(f64::MIN_POSITIVE).ln(),
    })
}

fn smoothed_target(n: usize, label: usize, smoothing: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let off = smoothing / (n - 1) as f64;
    (0..n).map(|c| if c == label { 1.0 - smoothing } else { off }).collect()
}

fn check_label(label: usize, n: usize, smoothing: f64) -> Result<()> {
    if label >= n {
        return Err(UfalError::ClassIndex { class: label, n_classes: n });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(UfalError::InvalidArgument(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    Ok(())
}

/// Cross-entropy of `model_probs` against the label-smoothed target
/// (`1 - smoothing` on the label, `smoothing / (N - 1)` elsewhere).
pub fn source_loss(model_probs: &[f64], true_label: usize, smoothing: f64) -> Result<f64> {
    check_label(true_label, model_probs.len(), smoothing)?;
    let target = smoothed_target(model_probs.len(), true_label, smoothing);
    Ok(-target
        .iter()
        .zip(model_probs)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| t * p.max(f64::MIN_POSITIVE).ln())
        .sum::<f64>())
}

/// Smoothed cross-entropy from logits with its logit gradient `softmax - target`.
pub fn smoothed_cross_entropy(logits: &[f64], label: usize, smoothing: f64) -> Result<(f64, Vec<f64>)> {
    check_label(label, logits.len(), smoothing)?;
    let target = smoothed_target(logits.len(), label, smoothing);
    let log_p = log_softmax(logits);
    let loss = -target.iter().zip(&log_p).map(|(t, l)| t * l).sum::<f64>();
    let grad = log_p.iter().zip(&target).map(|(l, t)| l.exp() - t).collect();
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub kept: bool,
    pub top_k_mass: f64,
    pub k: usize,
}

/// `k = max(1, round_half_up(N / 4))`.
pub fn ubf_k(n_classes: usize) -> usize {
    ((n_classes + 2) / 4).max(1)
}

/// Keeps a sample iff the `k` largest entries of `p_tilde` hold more than `phi`.
pub fn ubf(p_tilde: &[f64], n_classes: usize, phi: f64) -> FilterDecision {
    let k = ubf_k(n_classes);
    let top_k_mass = top_k_sum(p_tilde, k);
    FilterDecision {
        kept: top_k_mass > phi,
        top_k_mass,
        k,
    }
}
