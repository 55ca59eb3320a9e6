//! Proposal-pair taxonomy, similar/dissimilar labels and training-pair
//! sampling.
//!
//! Two proposals are *nearby* when their IoU reaches the NMS threshold. The
//! number of objects a pair contains is the number of distinct ground-truth
//! identities the two proposals match. Nearby pairs with zero or one object
//! are similar (should be merged); nearby pairs over two objects are
//! dissimilar (both should survive). Pairs that are not nearby never reach
//! the suppression test and are excluded from training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, roi_align, RoiFeature, DEFAULT_ROI_SIZE};
use crate::scene::{GtObject, Scene, ScoredProposal};

/// The six pair relationships, by (nearby, object count).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairCase {
    Case1,
    Case2,
    Case3,
    Case4,
    Case5,
    Case6,
}

impl PairCase {
    pub fn from_parts(nearby: bool, object_count: u8) -> Self {
        match (nearby, object_count) {
            (false, 0) => PairCase::Case1,
            (false, 1) => PairCase::Case2,
            (false, _) => PairCase::Case3,
            (true, 0) => PairCase::Case4,
            (true, 1) => PairCase::Case5,
            (true, _) => PairCase::Case6,
        }
    }

    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    /// Inverse of [`PairCase::id`].
    pub fn from_id(id: u8) -> Option<Self> {
        const ALL: [PairCase; 6] =
            [PairCase::Case1, PairCase::Case2, PairCase::Case3, PairCase::Case4, PairCase::Case5, PairCase::Case6];
        ALL.get(usize::from(id).checked_sub(1)?).copied()
    }

    pub fn nearby(self) -> bool {
        self.id() >= 4
    }

    pub fn object_count(self) -> u8 {
        (self.id() - 1) % 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairLabel {
    pub case: PairCase,
    pub nearby: bool,
    pub object_count: u8,
    /// 1 = similar, 0 = dissimilar.
    pub y: u8,
}

impl PairLabel {
    pub fn new(nearby: bool, object_count: u8) -> Self {
        let object_count = object_count.min(2);
        let y = u8::from(!(nearby && object_count == 2));
        PairLabel { case: PairCase::from_parts(nearby, object_count), nearby, object_count, y }
    }

    pub fn is_similar(&self) -> bool {
        self.y == 1
    }

    pub fn from_case(case: PairCase) -> Self {
        PairLabel::new(case.nearby(), case.object_count())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub image_id: u64,
    pub index_i: usize,
    pub index_j: usize,
    pub roi_i: RoiFeature,
    pub roi_j: RoiFeature,
    pub label: PairLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub pairs_per_image: usize,
    /// Dissimilar : similar ratio, e.g. `(1, 3)`.
    pub ratio: (usize, usize),
    pub match_thr: f64,
    pub nms_thr: f64,
    pub roi_size: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            pairs_per_image: 32,
            ratio: (1, 3),
            match_thr: 0.5,
            nms_thr: 0.5,
            roi_size: DEFAULT_ROI_SIZE,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    /// Budget used for dense (DPM-style) proposal sets.
    pub const DENSE_PAIRS_PER_IMAGE: usize = 64;

    pub fn validate(&self) -> Result<()> {
        if self.ratio.0 == 0 || self.ratio.1 == 0 {
            return Err(Error::InvalidConfig("sampling ratio terms must be positive".into()));
        }
        for (name, t) in [("match_thr", self.match_thr), ("nms_thr", self.nms_thr)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1], got {t}")));
            }
        }
        if self.roi_size == 0 {
            return Err(Error::InvalidConfig("roi_size must be positive".into()));
        }
        Ok(())
    }
}

/// Identity of the best-overlapping ground truth if its IoU reaches
/// `match_thr`. Ties go to the lowest object id.
pub fn match_proposal_to_gt(p: &ScoredProposal, gt: &[GtObject], match_thr: f64) -> Option<u64> {
    let mut best: Option<(f64, u64)> = None;
    for g in gt {
        let o = iou(&p.bbox, &g.bbox);
        best = match best {
            Some((bo, bid)) if bo > o || (bo == o && bid < g.object_id) => Some((bo, bid)),
            _ => Some((o, g.object_id)),
        };
    }
    best.filter(|&(o, _)| o >= match_thr).map(|(_, id)| id)
}

pub fn label_pair(p_i: &ScoredProposal, p_j: &ScoredProposal, gt: &[GtObject], nms_thr: f64, match_thr: f64) -> PairLabel {
    let nearby = iou(&p_i.bbox, &p_j.bbox) >= nms_thr;
    let a = match_proposal_to_gt(p_i, gt, match_thr);
    let b = match_proposal_to_gt(p_j, gt, match_thr);
    let object_count = match (a, b) {
        (None, None) => 0,
        (Some(a), Some(b)) if a != b => 2,
        _ => 1,
    };
    PairLabel::new(nearby, object_count)
}

/// Splits `budget` into (dissimilar, similar) counts following `ratio`,
/// topping up from the other class when one runs short.
pub fn split_budget(budget: usize, ratio: (usize, usize), n_dissimilar: usize, n_similar: usize) -> (usize, usize) {
    let budget = budget.min(n_dissimilar + n_similar);
    let want_dis = budget * ratio.0 / (ratio.0 + ratio.1);
    let want_sim = budget - want_dis;
    if n_dissimilar < want_dis {
        (n_dissimilar, (budget - n_dissimilar).min(n_similar))
    } else if n_similar < want_sim {
        ((budget - n_similar).min(n_dissimilar), n_similar)
    } else {
        (want_dis, want_sim)
    }
}

/// All nearby unordered pairs `(i, j)`, `i < j`, with their labels.
pub fn nearby_pairs(scene: &Scene, nms_thr: f64, match_thr: f64) -> Vec<(usize, usize, PairLabel)> {
    let props = &scene.proposals;
    let mut out = Vec::new();
    for i in 0..props.len() {
        for j in i + 1..props.len() {
            if iou(&props[i].bbox, &props[j].bbox) >= nms_thr {
                out.push((i, j, label_pair(&props[i], &props[j], &scene.gt, nms_thr, match_thr)));
            }
        }
    }
    out
}

/// Draws the training pairs of one image: nearby pairs only, dissimilar and
/// similar mixed by `cfg.ratio` as far as availability allows.
pub fn sample_training_pairs(scene: &Scene, cfg: &SamplingConfig) -> Result<Vec<PairSample>> {
    cfg.validate()?;
    if scene.proposals.len() < 2 {
        return Ok(Vec::new());
    }
    let (mut dissimilar, mut similar): (Vec<_>, Vec<_>) =
        nearby_pairs(scene, cfg.nms_thr, cfg.match_thr).into_iter().partition(|(_, _, l)| !l.is_similar());
    let (n_dis, n_sim) = split_budget(cfg.pairs_per_image, cfg.ratio, dissimilar.len(), similar.len());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(scene.image_id);
    dissimilar.shuffle(&mut rng);
    similar.shuffle(&mut rng);
    let mut chosen: Vec<_> = dissimilar.into_iter().take(n_dis).chain(similar.into_iter().take(n_sim)).collect();
    chosen.sort_by_key(|&(i, j, _)| (i, j));

    let mut rois: Vec<Option<RoiFeature>> = vec![None; scene.proposals.len()];
    let mut roi = |k: usize| -> Result<RoiFeature> {
        if rois[k].is_none() {
            rois[k] = Some(roi_align(&scene.features, &scene.proposals[k].bbox, cfg.roi_size)?);
        }
        Ok(rois[k].clone().expect("filled above"))
    };
    chosen
        .into_iter()
        .map(|(i, j, label)| {
            Ok(PairSample { image_id: scene.image_id, index_i: i, index_j: j, roi_i: roi(i)?, roi_j: roi(j)?, label })
        })
        .collect()
}

/// Rebuilds a training sample for proposals `i` and `j` of `scene`.
pub fn pair_sample(scene: &Scene, i: usize, j: usize, label: PairLabel, roi_size: usize) -> Result<PairSample> {
    let n = scene.proposals.len();
    if i >= n || j >= n {
        return Err(Error::ShapeMismatch {
            expected: format!("proposal indices below {n} in image {}", scene.image_id),
            found: format!("({i}, {j})"),
        });
    }
    Ok(PairSample {
        image_id: scene.image_id,
        index_i: i,
        index_j: j,
        roi_i: roi_align(&scene.features, &scene.proposals[i].bbox, roi_size)?,
        roi_j: roi_align(&scene.features, &scene.proposals[j].bbox, roi_size)?,
        label,
    })
}
