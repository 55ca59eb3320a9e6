//! Deterministic synthetic crowded scenes.
//!
//! A scene holds ground-truth boxes with a controlled pairwise overlap,
//! jittered scored proposals around them, and a feature grid in which every
//! object paints its own channel signature. Overlapping regions are shared by
//! soft ownership: the object whose center is nearer dominates a cell, with
//! distances measured on one scale shared by the whole scene.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, FeatureGrid, DEFAULT_STRIDE};
use crate::pairs::match_proposal_to_gt;

/// Placement attempts allowed per scene before giving up.
pub const PLACEMENT_RETRIES: usize = 1000;

const FREE_PLACEMENT_AFTER: usize = 50;

/// A detection candidate: box, confidence and the image it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    pub image_id: u64,
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredProposal {
    pub fn new(image_id: u64, bbox: BBox, score: f64) -> Result<Self> {
        if !(score.is_finite() && (0.0..=1.0).contains(&score)) {
            return Err(Error::InvalidConfig(format!("proposal score {score} outside [0, 1]")));
        }
        Ok(ScoredProposal { image_id, bbox, score })
    }
}

/// Ground-truth box tagged with an identity unique within its image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub object_id: u64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    pub gt: Vec<GtObject>,
    pub proposals: Vec<ScoredProposal>,
    pub features: FeatureGrid,
}

impl Scene {
    /// Checks the scene invariants: proposal scores in range and owned by
    /// this image, gt boxes inside the image, unique object ids.
    pub fn validate(&self) -> Result<()> {
        for p in &self.proposals {
            if p.image_id != self.image_id {
                return Err(Error::ForeignProposal { expected: self.image_id, found: p.image_id });
            }
            if !(0.0..=1.0).contains(&p.score) {
                return Err(Error::InvalidConfig(format!("proposal score {} outside [0, 1]", p.score)));
            }
        }
        let mut ids: Vec<u64> = self.gt.iter().map(|g| g.object_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig(format!("duplicate object id in image {}", self.image_id)));
        }
        if let Some(g) = self.gt.iter().find(|g| !g.bbox.inside(self.width, self.height)) {
            return Err(Error::InvalidConfig(format!(
                "object {} of image {} lies outside the image",
                g.object_id, self.image_id
            )));
        }
        Ok(())
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.gt.iter().map(|g| g.bbox).collect()
    }

    /// Largest pairwise IoU between ground-truth boxes; 0 with fewer than two.
    pub fn max_gt_overlap(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.gt.iter().enumerate() {
            for b in &self.gt[i + 1..] {
                best = best.max(iou(&a.bbox, &b.bbox));
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_scenes: usize,
    /// Inclusive range of objects per scene.
    pub objects_per_scene: (usize, usize),
    /// Inclusive range of IoU between each placed object and its anchor.
    pub occlusion_target: (f64, f64),
    /// Largest IoU a placed object may have with any object other than its
    /// anchor; keeps crowds from collapsing into piles.
    pub max_other_overlap: f64,
    pub proposals_per_object: usize,
    /// Std-dev of the proposal center shift, as a fraction of box size.
    pub center_jitter: f64,
    /// Std-dev of the proposal log-size perturbation.
    pub size_jitter: f64,
    /// Jittered proposals are resampled until their IoU with the source
    /// ground truth reaches this floor.
    pub min_source_iou: f64,
    pub score_noise: f64,
    pub signature_strength: f64,
    pub background_noise: f64,
    pub feature_channels: usize,
    pub stride: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Range of object widths in pixels.
    pub object_width: (f64, f64),
    /// Range of height / width ratios.
    pub aspect: (f64, f64),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_scenes: 200,
            objects_per_scene: (2, 5),
            occlusion_target: (0.3, 0.6),
            max_other_overlap: 0.3,
            proposals_per_object: 8,
            center_jitter: 0.02,
            size_jitter: 0.02,
            min_source_iou: 0.3,
            score_noise: 0.1,
            signature_strength: 1.0,
            background_noise: 0.1,
            feature_channels: 8,
            stride: DEFAULT_STRIDE,
            image_width: 384.0,
            image_height: 256.0,
            object_width: (48.0, 72.0),
            aspect: (2.0, 2.6),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let (lo, hi) = self.objects_per_scene;
        if lo > hi {
            return bad(format!("objects_per_scene range {lo}..={hi} is empty"));
        }
        let (olo, ohi) = self.occlusion_target;
        if !(0.0..1.0).contains(&olo) || !(0.0..1.0).contains(&ohi) || olo > ohi {
            return bad(format!("occlusion_target [{olo}, {ohi}] must be an ordered range inside [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.max_other_overlap) {
            return bad(format!("max_other_overlap {} outside [0, 1]", self.max_other_overlap));
        }
        let (wlo, whi) = self.object_width;
        let (alo, ahi) = self.aspect;
        if !(wlo > 0.0 && wlo <= whi && alo > 0.0 && alo <= ahi) {
            return bad("object size ranges must be positive and ordered".into());
        }
        if whi * 1.2 >= self.image_width || whi * ahi * 1.2 >= self.image_height {
            return bad("objects do not fit inside the image".into());
        }
        for (name, v) in [
            ("center_jitter", self.center_jitter),
            ("size_jitter", self.size_jitter),
            ("score_noise", self.score_noise),
            ("signature_strength", self.signature_strength),
            ("background_noise", self.background_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.min_source_iou) {
            return bad(format!("min_source_iou {} outside [0, 1)", self.min_source_iou));
        }
        if self.feature_channels == 0 {
            return bad("feature_channels must be positive".into());
        }
        if !(self.stride.is_finite() && self.stride > 0.0) {
            return bad(format!("stride must be positive, got {}", self.stride));
        }
        Ok(())
    }

    fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Generates scene `index` of the corpus described by `cfg`.
pub fn generate_scene(cfg: &SceneConfig, index: usize) -> Result<Scene> {
    generate_scene_with_signatures(cfg, index).map(|(scene, _)| scene)
}

/// Like [`generate_scene`], also returning the channel signature of each
/// ground-truth object (same order as `scene.gt`).
pub fn generate_scene_with_signatures(cfg: &SceneConfig, index: usize) -> Result<(Scene, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let mut rng = cfg.rng_for(index);
    let (lo, hi) = cfg.objects_per_scene;
    let n_objects = rng.random_range(lo..=hi);
    let boxes = place_objects(cfg, n_objects, &mut rng)?;
    let gt: Vec<GtObject> = boxes
        .iter()
        .enumerate()
        .map(|(i, &bbox)| GtObject { object_id: i as u64, bbox })
        .collect();
    let image_id = index as u64;
    let proposals = jitter_proposals(cfg, image_id, &boxes, &mut rng)?;
    let signatures = draw_signatures(cfg, boxes.len(), &mut rng);
    let features = paint_features(cfg, &boxes, &signatures, &mut rng)?;
    let scene = Scene { image_id, width: cfg.image_width, height: cfg.image_height, gt, proposals, features };
    Ok((scene, signatures))
}

/// Generates `cfg.n_scenes` scenes in parallel; output is ordered by index.
pub fn generate_corpus(cfg: &SceneConfig) -> Result<Vec<Scene>> {
    (0..cfg.n_scenes).into_par_iter().map(|i| generate_scene(cfg, i)).collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn place_objects(cfg: &SceneConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BBox>> {
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    if n == 0 {
        return Ok(boxes);
    }
    let (olo, ohi) = cfg.occlusion_target;
    let mut attempts = 0;
    let mut stalled = 0;
    boxes.push(random_box(cfg, rng)?);
    while boxes.len() < n {
        attempts += 1;
        if attempts > PLACEMENT_RETRIES {
            return Err(Error::PlacementFailed { retries: PLACEMENT_RETRIES });
        }
        stalled += 1;
        // only the first pair must hit the target; later objects may go
        // anywhere once anchored placement keeps failing
        let candidate = if boxes.len() >= 2 && stalled > FREE_PLACEMENT_AFTER {
            let candidate = random_box(cfg, rng)?;
            if boxes.iter().any(|b| iou(b, &candidate) > cfg.max_other_overlap) {
                continue;
            }
            candidate
        } else {
            let anchor = boxes[rng.random_range(0..boxes.len())];
            let target = rng.random_range(olo..=ohi);
            let Some(candidate) = place_near(cfg, &anchor, target, rng)? else {
                continue;
            };
            let overlap = iou(&anchor, &candidate);
            if overlap < olo || overlap > ohi || !candidate.inside(cfg.image_width, cfg.image_height) {
                continue;
            }
            if boxes.iter().any(|b| *b != anchor && iou(b, &candidate) > cfg.max_other_overlap) {
                continue;
            }
            candidate
        };
        boxes.push(candidate);
        stalled = 0;
    }
    Ok(boxes)
}

fn random_size(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let w = rng.random_range(cfg.object_width.0..=cfg.object_width.1);
    let aspect = rng.random_range(cfg.aspect.0..=cfg.aspect.1);
    (w, w * aspect)
}

fn random_box(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<BBox> {
    let (w, h) = random_size(cfg, rng);
    let x = rng.random_range(0.0..=cfg.image_width - w);
    let y = rng.random_range(0.0..=cfg.image_height - h);
    BBox::new(x, y, w, h)
}

/// Places a box of random size next to `anchor` so their IoU equals
/// `target`, by bisecting the horizontal offset. `None` when the sampled
/// size and vertical offset cannot reach the target.
fn place_near(cfg: &SceneConfig, anchor: &BBox, target: f64, rng: &mut ChaCha8Rng) -> Result<Option<BBox>> {
    let (w, h) = random_size(cfg, rng);
    let (acx, acy) = anchor.center();
    let dy = rng.random_range(-0.08..=0.08) * anchor.h();
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let at = |dx: f64| BBox::from_center(acx + side * dx, acy + dy, w, h);
    if iou(anchor, &at(0.0)?) < target {
        return Ok(None);
    }
    let (mut near, mut far) = (0.0, anchor.w() + w);
    for _ in 0..60 {
        let mid = 0.5 * (near + far);
        if iou(anchor, &at(mid)?) >= target {
            near = mid;
        } else {
            far = mid;
        }
    }
    at(near).map(Some)
}

fn jitter_proposals(
    cfg: &SceneConfig,
    image_id: u64,
    boxes: &[BBox],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ScoredProposal>> {
    let mut out = Vec::with_capacity(boxes.len() * cfg.proposals_per_object);
    for gt in boxes {
        let (cx, cy) = gt.center();
        for _ in 0..cfg.proposals_per_object {
            let mut bbox = *gt;
            for _ in 0..100 {
                let candidate = BBox::from_center(
                    cx + cfg.center_jitter * gt.w() * normal(rng),
                    cy + cfg.center_jitter * gt.h() * normal(rng),
                    gt.w() * (cfg.size_jitter * normal(rng)).exp(),
                    gt.h() * (cfg.size_jitter * normal(rng)).exp(),
                )?;
                if iou(gt, &candidate) >= cfg.min_source_iou {
                    bbox = candidate;
                    break;
                }
            }
            let base = iou(gt, &bbox);
            let score = (base - cfg.score_noise * normal(rng).abs()).clamp(0.0, 1.0);
            out.push(ScoredProposal::new(image_id, bbox, score)?);
        }
    }
    // interleave objects so input order carries no structure
    for i in (1..out.len()).rev() {
        let j = rng.random_range(0..=i);
        out.swap(i, j);
    }
    Ok(out)
}

/// Unit-norm random channel vectors, scaled by the signature strength, kept
/// pairwise distinct (cosine <= 0.5) when the channel count allows it.
fn draw_signatures(cfg: &SceneConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let c = cfg.feature_channels;
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while sigs.len() < n {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..100 {
            let mut v: Vec<f64> = (0..c).map(|_| normal(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            let worst = sigs
                .iter()
                .map(|s| s.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / cfg.signature_strength.max(1e-12))
                .fold(f64::NEG_INFINITY, f64::max);
            let better = best.as_ref().is_none_or(|(w, _)| worst < *w);
            if better {
                best = Some((worst, v));
            }
            if worst <= 0.5 {
                break;
            }
        }
        let (_, mut v) = best.expect("at least one draw");
        v.iter_mut().for_each(|x| *x *= cfg.signature_strength);
        sigs.push(v);
    }
    sigs
}

/// Low-frequency noise field: a few random plane waves per channel.
struct SmoothNoise {
    waves: Vec<[f64; 4]>,
    per_channel: usize,
}

impl SmoothNoise {
    fn new(channels: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Self {
        let per_channel = 3;
        let waves = (0..channels * per_channel)
            .map(|_| {
                let fx = rng.random_range(-0.25..=0.25);
                let fy = rng.random_range(-0.25..=0.25);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                [fx, fy, phase, amplitude / (per_channel as f64).sqrt()]
            })
            .collect();
        SmoothNoise { waves, per_channel }
    }

    /// Value at grid coordinates `(gy, gx)`.
    fn at(&self, c: usize, gy: f64, gx: f64) -> f64 {
        self.waves[c * self.per_channel..(c + 1) * self.per_channel]
            .iter()
            .map(|[fx, fy, phase, amp]| amp * (std::f64::consts::TAU * (fx * gx + fy * gy) + phase).sin())
            .sum()
    }
}

fn paint_features(
    cfg: &SceneConfig,
    boxes: &[BBox],
    signatures: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<FeatureGrid> {
    let c = cfg.feature_channels;
    let gh = (cfg.image_height / cfg.stride).ceil() as usize;
    let gw = (cfg.image_width / cfg.stride).ceil() as usize;
    let background = SmoothNoise::new(c, cfg.background_noise, rng);
    let texture: Vec<SmoothNoise> =
        boxes.iter().map(|_| SmoothNoise::new(c, 0.5 * cfg.background_noise, rng)).collect();
    let mut values = vec![0.0; c * gh * gw];
    let mut weights = vec![0.0; boxes.len()];
    let scale = boxes.iter().map(|b| 0.25 * (b.w() + b.h())).sum::<f64>() / boxes.len().max(1) as f64;
    for gy in 0..gh {
        let py = (gy as f64 + 0.5) * cfg.stride;
        for gx in 0..gw {
            let px = (gx as f64 + 0.5) * cfg.stride;
            let mut total = 0.0;
            for (k, b) in boxes.iter().enumerate() {
                weights[k] = if px >= b.x() && px < b.right() && py >= b.y() && py < b.bottom() {
                    let (cx, cy) = b.center();
                    let rx = (px - cx) / scale;
                    let ry = (py - cy) / scale;
                    (-(rx * rx + ry * ry) / 0.1).exp()
                } else {
                    0.0
                };
                total += weights[k];
            }
            for ch in 0..c {
                let mut v = background.at(ch, gy as f64, gx as f64);
                if total > 0.0 {
                    for (k, sig) in signatures.iter().enumerate() {
                        if weights[k] > 0.0 {
                            let share = weights[k] / total;
                            v += share * (sig[ch] + texture[k].at(ch, gy as f64, gx as f64));
                        }
                    }
                }
                values[(ch * gh + gy) * gw + gx] = v;
            }
        }
    }
    FeatureGrid::new(c, gh, gw, cfg.stride, values)
}

/// Perfect stand-in for the learned pair distance: 1 when the two
/// proposals match two distinct objects, 0 otherwise.
pub fn oracle_distance(p_i: &ScoredProposal, p_j: &ScoredProposal, scene: &Scene, match_thr: f64) -> Result<f64> {
    for p in [p_i, p_j] {
        if p.image_id != scene.image_id {
            return Err(Error::ForeignProposal { expected: scene.image_id, found: p.image_id });
        }
    }
    let a = match_proposal_to_gt(p_i, &scene.gt, match_thr);
    let b = match_proposal_to_gt(p_j, &scene.gt, match_thr);
    Ok(match (a, b) {
        (Some(a), Some(b)) if a != b => 1.0,
        _ => 0.0,
    })
}
