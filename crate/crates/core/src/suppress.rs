//! Greedy, Soft (linear and Gaussian) and Pairwise non-maximum suppression.
//!
//! All methods select the highest-scoring remaining proposal, ties going to
//! the earlier input position, and return the selections in order. Pairwise
//! suppression is greedy suppression with one extra condition: a neighbor is
//! removed only if it also sits within `dist_thr` of the selected proposal in
//! the learned pair-distance space.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embed::DistanceMatrix;
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::scene::ScoredProposal;

/// A surviving proposal: its input position and its final score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kept {
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Greedy,
    SoftLinear,
    SoftGaussian,
    Pairwise,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Method::Greedy),
            "soft-linear" => Ok(Method::SoftLinear),
            "soft-gaussian" => Ok(Method::SoftGaussian),
            "pairwise" => Ok(Method::Pairwise),
            other => Err(Error::InvalidConfig(format!("unknown suppression method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuppressionConfig {
    pub method: Method,
    pub nms_thr: f64,
    pub dist_thr: f64,
    pub sigma: f64,
    pub theta: f64,
}

impl Default for SuppressionConfig {
    fn default() -> Self {
        SuppressionConfig { method: Method::Greedy, nms_thr: 0.5, dist_thr: 0.5, sigma: 0.5, theta: 0.0 }
    }
}

impl SuppressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nms_thr) {
            return Err(Error::InvalidConfig(format!("NMS threshold {} outside [0, 1]", self.nms_thr)));
        }
        match self.method {
            Method::Pairwise if self.dist_thr.is_nan() || self.dist_thr < 0.0 => {
                Err(Error::InvalidConfig(format!("distance threshold {} must be >= 0", self.dist_thr)))
            }
            Method::SoftGaussian if self.sigma.is_nan() || self.sigma <= 0.0 => {
                Err(Error::InvalidConfig(format!("sigma {} must be positive", self.sigma)))
            }
            Method::SoftLinear | Method::SoftGaussian if !(0.0..=1.0).contains(&self.theta) => {
                Err(Error::InvalidConfig(format!("theta {} outside [0, 1]", self.theta)))
            }
            _ => Ok(()),
        }
    }
}

/// Per-threshold operating points tuned for crowded pedestrian data:
/// `(E_t, N_t, D_t)`. The `E_t = 0.9` row has `N_t = 1`, which suppresses
/// only exact duplicates whatever `D_t` is.
pub const PAIRWISE_PRESETS: [(f64, f64, f64); 10] = [
    (0.5, 0.55, 1.25),
    (0.55, 0.55, 1.25),
    (0.6, 0.55, 1.25),
    (0.65, 0.6, 1.4),
    (0.7, 0.65, 1.3),
    (0.75, 0.7, 0.65),
    (0.8, 0.8, 0.9),
    (0.85, 0.85, 0.5),
    (0.9, 1.0, 0.0),
    (0.95, 0.95, 0.2),
];

/// `(N_t, D_t)` preset for an evaluation threshold, if one is tabulated.
pub fn preset_for(eval_thr: f64) -> Option<(f64, f64)> {
    PAIRWISE_PRESETS.iter().find(|(e, _, _)| (e - eval_thr).abs() < 1e-9).map(|&(_, n, d)| (n, d))
}

/// Indices sorted by descending score, input order among equal scores.
fn score_order(props: &[ScoredProposal]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| props[b].score.partial_cmp(&props[a].score).unwrap_or(Ordering::Equal));
    order
}

pub fn greedy_nms(props: &[ScoredProposal], nms_thr: f64) -> Vec<Kept> {
    let order = score_order(props);
    let mut removed = vec![false; props.len()];
    let mut kept = Vec::new();
    for (pos, &m) in order.iter().enumerate() {
        if removed[m] {
            continue;
        }
        kept.push(Kept { index: m, score: props[m].score });
        for &b in &order[pos + 1..] {
            if !removed[b] && iou(&props[m].bbox, &props[b].bbox) >= nms_thr {
                removed[b] = true;
            }
        }
    }
    kept
}

/// Greedy suppression relaxed by pair distances: `b` is removed by the
/// selected `m` only when `iou(m, b) >= nms_thr` and `d(m, b) <= dist_thr`.
/// `dm` must hold every pair whose IoU reaches `nms_thr`.
pub fn pairwise_nms(props: &[ScoredProposal], nms_thr: f64, dist_thr: f64, dm: &DistanceMatrix) -> Result<Vec<Kept>> {
    let order = score_order(props);
    let mut removed = vec![false; props.len()];
    let mut kept = Vec::new();
    for (pos, &m) in order.iter().enumerate() {
        if removed[m] {
            continue;
        }
        kept.push(Kept { index: m, score: props[m].score });
        for &b in &order[pos + 1..] {
            if removed[b] || iou(&props[m].bbox, &props[b].bbox) < nms_thr {
                continue;
            }
            let d = dm.get(m, b).ok_or(Error::IncompleteDistanceMatrix(m.min(b), m.max(b)))?;
            if d <= dist_thr {
                removed[b] = true;
            }
        }
    }
    Ok(kept)
}

/// Shared Soft-NMS loop; `decay(iou)` gives the score multiplier.
fn soft_nms(props: &[ScoredProposal], theta: f64, decay: impl Fn(f64) -> f64) -> Vec<Kept> {
    let mut scores: Vec<f64> = props.iter().map(|p| p.score).collect();
    let mut remaining: Vec<usize> = (0..props.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for (pos, &k) in remaining.iter().enumerate() {
            if scores[k] > scores[remaining[best]] {
                best = pos;
            }
        }
        let m = remaining.remove(best);
        kept.push(Kept { index: m, score: scores[m] });
        for &b in &remaining {
            scores[b] *= decay(iou(&props[m].bbox, &props[b].bbox));
        }
        remaining.retain(|&b| scores[b] >= theta);
    }
    kept
}

/// Linear Soft-NMS: neighbors with `iou >= nms_thr` are rescored by
/// `s * (1 - iou)`; anything below `theta` is dropped after each round.
pub fn soft_nms_linear(props: &[ScoredProposal], nms_thr: f64, theta: f64) -> Vec<Kept> {
    soft_nms(props, theta, |o| if o >= nms_thr { 1.0 - o } else { 1.0 })
}

/// Gaussian Soft-NMS: every remaining proposal is rescored by
/// `s * exp(-iou^2 / sigma)`.
pub fn soft_nms_gaussian(props: &[ScoredProposal], sigma: f64, theta: f64) -> Vec<Kept> {
    soft_nms(props, theta, |o| (-(o * o) / sigma).exp())
}

/// Runs the configured method. `dm` is required for pairwise suppression.
pub fn suppress(props: &[ScoredProposal], cfg: &SuppressionConfig, dm: Option<&DistanceMatrix>) -> Result<Vec<Kept>> {
    cfg.validate()?;
    if let Some(p) = props.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::InvalidConfig(format!("non-finite score {}", p.score)));
    }
    Ok(match cfg.method {
        Method::Greedy => greedy_nms(props, cfg.nms_thr),
        Method::SoftLinear => soft_nms_linear(props, cfg.nms_thr, cfg.theta),
        Method::SoftGaussian => soft_nms_gaussian(props, cfg.sigma, cfg.theta),
        Method::Pairwise => {
            let dm = dm.ok_or_else(|| Error::InvalidConfig("pairwise suppression needs a distance matrix".into()))?;
            pairwise_nms(props, cfg.nms_thr, cfg.dist_thr, dm)?
        }
    })
}

/// Materializes kept entries as proposals carrying their final scores.
pub fn kept_proposals(props: &[ScoredProposal], kept: &[Kept]) -> Vec<ScoredProposal> {
    kept.iter().map(|k| ScoredProposal { score: k.score, ..props[k.index] }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn p(x: f64, score: f64) -> ScoredProposal {
        ScoredProposal::new(0, BBox::new(x, 0.0, 10.0, 10.0).unwrap(), score).unwrap()
    }

    fn idx(k: &[Kept]) -> Vec<usize> {
        k.iter().map(|k| k.index).collect()
    }

    #[test]
    fn greedy_basics() {
        assert!(greedy_nms(&[], 0.5).is_empty());
        assert_eq!(idx(&greedy_nms(&[p(0.0, 0.3)], 0.5)), vec![0]);
        assert_eq!(idx(&greedy_nms(&[p(0.0, 0.3), p(50.0, 0.6)], 0.5)), vec![1, 0]);
        assert_eq!(idx(&greedy_nms(&[p(0.0, 0.8), p(0.0, 0.9)], 0.5)), vec![1]);
    }

    #[test]
    fn ties_go_to_input_order() {
        assert_eq!(idx(&greedy_nms(&[p(0.0, 0.5), p(0.0, 0.5)], 0.5)), vec![0]);
        assert_eq!(idx(&soft_nms_linear(&[p(0.0, 0.5), p(0.0, 0.5)], 0.5, 0.0)), vec![0, 1]);
    }

    #[test]
    fn pairwise_distance_gate() {
        let props = [p(0.0, 0.9), p(1.0, 0.8)];
        let mut dm = DistanceMatrix::new(0);
        dm.insert(0, 1, 0.9).unwrap();
        assert_eq!(idx(&pairwise_nms(&props, 0.5, 0.5, &dm).unwrap()), vec![0, 1]);
        dm.insert(0, 1, 0.1).unwrap();
        assert_eq!(idx(&pairwise_nms(&props, 0.5, 0.5, &dm).unwrap()), vec![0]);
        assert_eq!(idx(&pairwise_nms(&props, 0.5, f64::INFINITY, &dm).unwrap()), idx(&greedy_nms(&props, 0.5)));
    }

    /// A box that survives only because of the distance gate can remove a
    /// box greedy would have kept.
    #[test]
    fn pairwise_is_not_a_superset_of_greedy() {
        let props = [p(0.0, 0.9), p(2.0, 0.8), p(6.0, 0.7)];
        let mut dm = DistanceMatrix::new(0);
        dm.insert(0, 1, 1.0).unwrap();
        dm.insert(0, 2, 1.0).unwrap();
        dm.insert(1, 2, 0.0).unwrap();
        assert_eq!(idx(&greedy_nms(&props, 0.3)), vec![0, 2]);
        assert_eq!(idx(&pairwise_nms(&props, 0.3, 0.5, &dm).unwrap()), vec![0, 1]);
    }

    #[test]
    fn pairwise_needs_complete_matrix() {
        let props = [p(0.0, 0.9), p(1.0, 0.8), p(100.0, 0.7)];
        let dm = DistanceMatrix::new(0);
        assert!(matches!(pairwise_nms(&props, 0.5, 0.5, &dm), Err(Error::IncompleteDistanceMatrix(0, 1))));
        // distant pairs need no entry
        assert!(pairwise_nms(&props[..1], 0.5, 0.5, &dm).is_ok());
        let cfg = SuppressionConfig { method: Method::Pairwise, ..Default::default() };
        assert!(suppress(&props, &cfg, None).is_err());
    }

    #[test]
    fn linear_decay_value() {
        // iou 0.6 -> shift 2.5 on 10-wide boxes
        let out = soft_nms_linear(&[p(0.0, 0.9), p(2.5, 0.8)], 0.5, 0.0);
        assert_eq!(idx(&out), vec![0, 1]);
        assert!((out[1].score - 0.32).abs() < 1e-12);
        // 0.8 * (1 - 0.8125) = 0.15 < 0.2 -> dropped; shift for iou 0.8125 is 10*0.1875/1.8125
        let shift = 10.0 * 0.1875 / 1.8125;
        let out = soft_nms_linear(&[p(0.0, 0.9), p(shift, 0.8)], 0.5, 0.2);
        assert_eq!(idx(&out), vec![0]);
    }

    #[test]
    fn linear_below_threshold_untouched() {
        let props = [p(0.0, 0.9), p(20.0, 0.8), p(40.0, 0.7)];
        let out = soft_nms_linear(&props, 0.5, 0.0);
        assert_eq!(out.iter().map(|k| k.score).collect::<Vec<_>>(), vec![0.9, 0.8, 0.7]);
    }

    #[test]
    fn gaussian_decay_value() {
        // iou 0.5 -> shift 10/3
        let out = soft_nms_gaussian(&[p(0.0, 0.9), p(10.0 / 3.0, 0.8)], 0.5, 0.0);
        assert!((out[1].score - 0.8 * (-0.5f64).exp()).abs() < 1e-12);
        let out = soft_nms_gaussian(&[p(0.0, 0.9), p(50.0, 0.8)], 0.5, 0.0);
        assert_eq!(out[1].score, 0.8);
        let out = soft_nms_gaussian(&[p(0.0, 0.9), p(1.0, 0.8)], 1e300, 0.0);
        assert_eq!(out[1].score, 0.8);
    }

    #[test]
    fn config_validation() {
        let c = SuppressionConfig { nms_thr: 1.5, ..Default::default() };
        assert!(c.validate().is_err());
        let c = SuppressionConfig { method: Method::SoftGaussian, sigma: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = SuppressionConfig { method: Method::Pairwise, dist_thr: f64::INFINITY, ..Default::default() };
        assert!(c.validate().is_ok());
        assert_eq!("soft-gaussian".parse::<Method>().unwrap(), Method::SoftGaussian);
        assert!("hard".parse::<Method>().is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(preset_for(0.5), Some((0.55, 1.25)));
        assert_eq!(preset_for(0.9), Some((1.0, 0.0)));
        assert_eq!(preset_for(0.42), None);
    }
}
