//! Unified instance scores and containment-aware soft NMS.

use alloc::vec;
use alloc::vec::Vec;

use crate::grid::Grid;
use crate::math;
use crate::predictor::{Instance, InstanceSet};

/// Score decay applied to the remaining candidates after each selection,
/// as a function of bounding-box IoU `u` with the selected mask.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum Decay {
    /// `1[u < iou]`
    Hard { iou: f64 },
    /// `1 − u`
    Linear,
    /// `(1 − u)²`
    Polynomial,
    /// `exp(−u² / σ)`
    #[default]
    Exponential,
}

impl Decay {
    pub fn factor(&self, u: f64, sigma: f64) -> f64 {
        match *self {
            Decay::Hard { iou } => {
                if u < iou {
                    1.0
                } else {
                    0.0
                }
            }
            Decay::Linear => 1.0 - u,
            Decay::Polynomial => (1.0 - u) * (1.0 - u),
            Decay::Exponential => math::exp(-u * u / sigma),
        }
    }
}

/// Which evidence the initial NMS scores are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum ScoreMode {
    /// Every mask scores 1.
    None,
    /// Normalized mean hematoxylin only.
    HChannel,
    /// Predictor confidence only.
    Model,
    /// Predictor confidence plus normalized mean hematoxylin.
    #[default]
    Combined,
}

fn default_sigma() -> f64 {
    0.5
}
fn default_epsilon_pen() -> f64 {
    0.5
}
fn default_tau() -> f64 {
    0.05
}
fn default_containment_frac() -> f64 {
    0.9
}
#[cfg(feature = "serde")]
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct NmsConfig {
    #[cfg_attr(feature = "serde", serde(default))]
    pub decay: Decay,
    #[cfg_attr(feature = "serde", serde(default = "default_sigma"))]
    pub sigma: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_epsilon_pen"))]
    pub epsilon_pen: f64,
    /// Candidates whose score falls below this are discarded.
    #[cfg_attr(feature = "serde", serde(default = "default_tau"))]
    pub tau: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub score_mode: ScoreMode,
    #[cfg_attr(feature = "serde", serde(default = "default_containment_frac"))]
    pub containment_frac: f64,
    /// Apply the containment penalty before selection.
    #[cfg_attr(feature = "serde", serde(default = "default_true"))]
    pub containment_penalty: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            decay: Decay::default(),
            sigma: default_sigma(),
            epsilon_pen: default_epsilon_pen(),
            tau: default_tau(),
            score_mode: ScoreMode::default(),
            containment_frac: default_containment_frac(),
            containment_penalty: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid NMS configuration: {0}")]
pub struct NmsConfigError(pub &'static str);

impl NmsConfig {
    pub fn validate(&self) -> Result<(), NmsConfigError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(NmsConfigError("sigma must be positive"));
        }
        if !(self.epsilon_pen > 0.0 && self.epsilon_pen.is_finite()) {
            return Err(NmsConfigError("epsilon_pen must be positive"));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(NmsConfigError("tau must lie in [0, 1)"));
        }
        if !(self.containment_frac > 0.0 && self.containment_frac <= 1.0) {
            return Err(NmsConfigError("containment_frac must lie in (0, 1]"));
        }
        if let Decay::Hard { iou } = self.decay {
            if !(0.0..=1.0).contains(&iou) {
                return Err(NmsConfigError("hard decay IoU must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Mean of `map` over each instance.
pub fn mean_inside(set: &InstanceSet, map: &Grid<f64>) -> Vec<f64> {
    set.instances
        .iter()
        .map(|inst| {
            let sum: f64 = inst.pixels().map(|(r, c)| *map.get(r, c)).sum();
            sum / inst.area() as f64
        })
        .collect()
}

/// Min–max normalization; a degenerate range maps everything to 1.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Initial per-mask scores for the given mode.
pub fn unified_scores(set: &InstanceSet, hematoxylin: &Grid<f64>, mode: ScoreMode) -> Vec<f64> {
    if set.is_empty() {
        return Vec::new();
    }
    let h = || min_max_normalize(&mean_inside(set, hematoxylin));
    match mode {
        ScoreMode::None => vec![1.0; set.len()],
        ScoreMode::HChannel => h(),
        ScoreMode::Model => set.instances.iter().map(|i| i.score).collect(),
        ScoreMode::Combined => set.instances.iter().zip(h()).map(|(i, s)| i.score + s).collect(),
    }
}

/// Number of other masks that `mask` contains: `|m ∩ mask| / |m| ≥ frac`
/// and `|m| < |mask|`.
pub fn count_contained(mask: &Instance, others: &[Instance], frac: f64) -> usize {
    others
        .iter()
        .filter(|m| {
            !core::ptr::eq(*m, mask)
                && m.area() < mask.area()
                && mask.intersection(m) as f64 >= frac * m.area() as f64
        })
        .count()
}

/// A kept mask with its final score.
#[derive(Debug, Clone, PartialEq)]
pub struct Kept {
    /// Index into the input set.
    pub index: usize,
    pub score: f64,
}

/// Containment-aware soft NMS.
///
/// Masks containing more than one smaller mask are first penalized by
/// `1 − tanh(ε_pen · N)` (counts taken on the original set). Then the best
/// remaining mask is repeatedly kept, the others decayed by their bounding
/// box IoU with it, and anything below `tau` dropped. Returns the kept masks
/// in selection order.
pub fn containment_soft_nms(set: &InstanceSet, scores: &[f64], config: &NmsConfig) -> Vec<Kept> {
    assert_eq!(scores.len(), set.len(), "one score per instance");
    let mut current: Vec<f64> = scores.to_vec();
    if config.containment_penalty {
        for (i, inst) in set.instances.iter().enumerate() {
            let n = count_contained(inst, &set.instances, config.containment_frac);
            if n > 1 {
                current[i] *= 1.0 - math::tanh(config.epsilon_pen * n as f64);
            }
        }
    }
    let mut alive: Vec<usize> = (0..set.len()).filter(|&i| current[i] >= config.tau).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let (pos, &best) = alive
            .iter()
            .enumerate()
            .max_by(|a, b| current[*a.1].total_cmp(&current[*b.1]).then(b.1.cmp(a.1)))
            .expect("non-empty");
        alive.swap_remove(pos);
        kept.push(Kept { index: best, score: current[best] });
        let chosen = &set.instances[best];
        for &i in &alive {
            let u = chosen.bbox_iou(&set.instances[i]);
            current[i] *= config.decay.factor(u, config.sigma);
        }
        alive.retain(|&i| current[i] >= config.tau);
    }
    kept
}

/// Kept instances in descending final score (stable on selection order),
/// carrying their final scores.
pub fn kept_instances(set: &InstanceSet, kept: &[Kept]) -> InstanceSet {
    let mut order: Vec<&Kept> = kept.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let instances = order
        .into_iter()
        .map(|k| {
            let mut inst = set.instances[k.index].clone();
            inst.score = k.score;
            inst
        })
        .collect();
    InstanceSet { height: set.height, width: set.width, instances }
}
