//! COCO-style detection evaluation.
//!
//! Detections are matched greedily by descending score, each to the
//! still-unmatched ground truth of highest IoU, and count as true positives
//! when that IoU reaches the evaluation threshold. Average precision uses
//! 101-point interpolation of the precision envelope.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{gt_occlusion, iou, BBox};
use crate::scene::{GtObject, ScoredProposal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Mean of the precision envelope at recall 0, 0.01, ..., 1.
    Coco101,
    /// Exact area under the precision envelope (VOC 2010+ style).
    AllPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Half-open `[lo, hi)` occlusion ranges, disjoint and ascending.
    pub buckets: Vec<(f64, f64)>,
    /// Evaluation threshold used for the per-bucket F1.
    pub bucket_thr: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: threshold_range(0.5, 0.95, 0.05),
            buckets: (0..10).map(|i| ((40 + 5 * i) as f64 / 100.0, (45 + 5 * i) as f64 / 100.0)).collect(),
            bucket_thr: 0.5,
            interpolation: Interpolation::Coco101,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.thresholds.iter().chain([&self.bucket_thr]).find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::InvalidConfig(format!("evaluation threshold {t} outside (0, 1]")));
        }
        for (k, &(lo, hi)) in self.buckets.iter().enumerate() {
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(Error::InvalidConfig(format!("occlusion bucket [{lo}, {hi}) is empty")));
            }
            if k > 0 && self.buckets[k - 1].1 > lo {
                return Err(Error::InvalidConfig("occlusion buckets must be disjoint and ascending".into()));
            }
        }
        Ok(())
    }
}

/// `start, start + step, ..., end` computed on a fixed decimal grid.
pub fn threshold_range(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| ((start + step * i as f64) * 1e6).round() / 1e6).collect()
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalImage {
    pub image_id: u64,
    pub detections: Vec<ScoredProposal>,
    pub gt: Vec<GtObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per detection, in input order: matched ground-truth index, if any.
    pub det_match: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn is_tp(&self, det: usize) -> bool {
        self.det_match[det].is_some()
    }

    pub fn tp(&self) -> usize {
        self.det_match.iter().filter(|m| m.is_some()).count()
    }
}

/// Detection indices by descending score, earlier index first on ties.
fn by_score(dets: &[ScoredProposal]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

pub fn match_detections(dets: &[ScoredProposal], gt: &[BBox], eval_thr: f64) -> MatchResult {
    let mut det_match = vec![None; dets.len()];
    let mut gt_matched = vec![false; gt.len()];
    for d in by_score(dets) {
        let mut best: Option<(f64, usize)> = None;
        for (g, gb) in gt.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let o = iou(&dets[d].bbox, gb);
            if o >= eval_thr && best.is_none_or(|(bo, _)| o > bo) {
                best = Some((o, g));
            }
        }
        if let Some((_, g)) = best {
            gt_matched[g] = true;
            det_match[d] = Some(g);
        }
    }
    MatchResult { det_match, gt_matched }
}

/// Cumulative precision/recall points, one per detection in global score
/// order, plus the ground-truth count.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
}

pub fn pr_curve(images: &[EvalImage], eval_thr: f64) -> PrCurve {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0;
    for img in images {
        let boxes: Vec<BBox> = img.gt.iter().map(|g| g.bbox).collect();
        n_gt += boxes.len();
        let m = match_detections(&img.detections, &boxes, eval_thr);
        for d in by_score(&img.detections) {
            scored.push((img.detections[d].score, m.is_tp(d)));
        }
    }
    // stable: image order, then in-image score order, breaks ties
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    for &(_, is_tp) in &scored {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 });
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    PrCurve { recall, precision, n_gt, tp, fp }
}

impl PrCurve {
    /// Interpolated average precision; `None` without ground truth.
    pub fn average_precision(&self, interpolation: Interpolation) -> Option<f64> {
        if self.n_gt == 0 {
            return None;
        }
        let mut envelope = self.precision.clone();
        for k in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[k] = envelope[k].max(envelope[k + 1]);
        }
        Some(match interpolation {
            Interpolation::Coco101 => {
                let mut sum = 0.0;
                for i in 0..=100 {
                    let r = i as f64 / 100.0;
                    let k = self.recall.partition_point(|&rec| rec < r);
                    sum += envelope.get(k).copied().unwrap_or(0.0);
                }
                sum / 101.0
            }
            Interpolation::AllPoint => {
                let mut area = 0.0;
                let mut prev = 0.0;
                for (k, &rec) in self.recall.iter().enumerate() {
                    area += (rec - prev) * envelope[k];
                    prev = rec;
                }
                area
            }
        })
    }
}

/// 101-point AP of one image; `None` when it has no ground truth.
pub fn average_precision(dets: &[ScoredProposal], gt: &[GtObject], eval_thr: f64) -> Option<f64> {
    let img = EvalImage { image_id: 0, detections: dets.to_vec(), gt: gt.to_vec() };
    pr_curve(std::slice::from_ref(&img), eval_thr).average_precision(Interpolation::Coco101)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub eval_thr: f64,
    pub tp: usize,
    pub fp: usize,
    pub detections: usize,
    pub gt: usize,
    pub recall: f64,
    pub precision: f64,
    pub ap: Option<f64>,
    /// `(recall, precision)` after each detection in score order.
    pub pr_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub lo: f64,
    pub hi: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: Option<f64>,
}

impl BucketStats {
    fn finish(&mut self) {
        self.f1 = f1_score(self.tp, self.fp, self.fn_);
    }
}

/// `2PR / (P + R)`; `None` for an empty bucket, 0 when `P + R = 0`.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> Option<f64> {
    if tp + fp + fn_ == 0 {
        return None;
    }
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    Some(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionF1 {
    pub eval_thr: f64,
    pub buckets: Vec<BucketStats>,
    /// Ground truth (and attributed false positives) outside every bucket;
    /// its `lo` and `hi` are zero.
    pub remainder: BucketStats,
}

/// Per-occlusion-bucket F1. Each ground truth falls in the bucket holding
/// its largest IoU with another ground truth of its image; an unmatched
/// detection is charged to the bucket of its best-overlapping ground truth.
pub fn f1_by_occlusion(images: &[EvalImage], eval_thr: f64, buckets: &[(f64, f64)]) -> OcclusionF1 {
    let mut stats: Vec<BucketStats> =
        buckets.iter().map(|&(lo, hi)| BucketStats { lo, hi, ..BucketStats::default() }).collect();
    let mut remainder = BucketStats::default();
    for img in images {
        let boxes: Vec<BBox> = img.gt.iter().map(|g| g.bbox).collect();
        let occlusion: Vec<f64> = (0..boxes.len())
            .map(|k| gt_occlusion(&boxes[k], boxes.iter().enumerate().filter(|&(o, _)| o != k).map(|(_, b)| b)))
            .collect();
        let bucket_of = |g: usize| buckets.iter().position(|&(lo, hi)| occlusion[g] >= lo && occlusion[g] < hi);
        let m = match_detections(&img.detections, &boxes, eval_thr);
        for (g, &matched) in m.gt_matched.iter().enumerate() {
            let s = match bucket_of(g) {
                Some(b) => &mut stats[b],
                None => &mut remainder,
            };
            if matched {
                s.tp += 1;
            } else {
                s.fn_ += 1;
            }
        }
        for (d, det) in img.detections.iter().enumerate() {
            if m.is_tp(d) {
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for (g, gb) in boxes.iter().enumerate() {
                let o = iou(&det.bbox, gb);
                if o > 0.0 && best.is_none_or(|(bo, _)| o > bo) {
                    best = Some((o, g));
                }
            }
            if let Some((_, g)) = best {
                match bucket_of(g) {
                    Some(b) => stats[b].fp += 1,
                    None => remainder.fp += 1,
                }
            }
        }
    }
    stats.iter_mut().for_each(BucketStats::finish);
    remainder.finish();
    OcclusionF1 { eval_thr, buckets: stats, remainder }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub thresholds: Vec<ThresholdResult>,
    /// Mean of the defined per-threshold APs.
    pub mean_ap: Option<f64>,
    pub occlusion: OcclusionF1,
}

impl EvalReport {
    pub fn at(&self, eval_thr: f64) -> Option<&ThresholdResult> {
        self.thresholds.iter().find(|t| (t.eval_thr - eval_thr).abs() < 1e-9)
    }

    pub fn ap_at(&self, eval_thr: f64) -> Option<f64> {
        self.at(eval_thr).and_then(|t| t.ap)
    }
}

pub fn map_over_thresholds(images: &[EvalImage], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let n_dets: usize = images.iter().map(|i| i.detections.len()).sum();
    let thresholds: Vec<ThresholdResult> = cfg
        .thresholds
        .iter()
        .map(|&t| {
            let curve = pr_curve(images, t);
            ThresholdResult {
                eval_thr: t,
                tp: curve.tp,
                fp: curve.fp,
                detections: n_dets,
                gt: curve.n_gt,
                recall: if curve.n_gt > 0 { curve.tp as f64 / curve.n_gt as f64 } else { 0.0 },
                precision: if n_dets > 0 { curve.tp as f64 / n_dets as f64 } else { 0.0 },
                ap: curve.average_precision(cfg.interpolation),
                pr_curve: curve.recall.iter().copied().zip(curve.precision.iter().copied()).collect(),
            }
        })
        .collect();
    let aps: Vec<f64> = thresholds.iter().filter_map(|t| t.ap).collect();
    let mean_ap = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
    let occlusion = f1_by_occlusion(images, cfg.bucket_thr, &cfg.buckets);
    Ok(EvalReport { label: String::new(), thresholds, mean_ap, occlusion })
}
