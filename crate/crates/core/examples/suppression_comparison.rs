//! Greedy, Soft and Pairwise suppression side by side on occluded scenes,
//! with the perfect oracle distance standing in for the learned one.

use crowdnms::embed::DistanceMatrix;
use crowdnms::eval::{pr_curve, EvalImage, Interpolation};
use crowdnms::scene::{generate_corpus, oracle_distance};
use crowdnms::suppress::{kept_proposals, suppress};
use crowdnms::{Method, SceneConfig, SuppressionConfig};

fn main() -> crowdnms::Result<()> {
    let cfg = SceneConfig { n_scenes: 100, occlusion_target: (0.5, 0.8), seed: 11, ..SceneConfig::default() };
    let scenes = generate_corpus(&cfg)?;
    let methods = [
        ("greedy", SuppressionConfig { method: Method::Greedy, ..Default::default() }),
        ("soft-linear", SuppressionConfig { method: Method::SoftLinear, theta: 0.2, ..Default::default() }),
        ("soft-gaussian", SuppressionConfig { method: Method::SoftGaussian, theta: 0.2, ..Default::default() }),
        ("pairwise", SuppressionConfig { method: Method::Pairwise, ..Default::default() }),
    ];
    println!("{:<14} {:>5} {:>5} {:>6} {:>7} {:>7}", "method", "tp", "fp", "dets", "recall", "AP@0.5");
    for (name, sc) in methods {
        let mut images = Vec::new();
        for s in &scenes {
            let dm = DistanceMatrix::from_fn(s, sc.nms_thr, |i, j| {
                oracle_distance(&s.proposals[i], &s.proposals[j], s, 0.5)
            })?;
            let kept = suppress(&s.proposals, &sc, Some(&dm))?;
            images.push(EvalImage { image_id: s.image_id, detections: kept_proposals(&s.proposals, &kept), gt: s.gt.clone() });
        }
        let curve = pr_curve(&images, 0.5);
        let ap = curve.average_precision(Interpolation::Coco101).unwrap_or(0.0);
        let recall = curve.tp as f64 / curve.n_gt as f64;
        println!("{name:<14} {:>5} {:>5} {:>6} {recall:>7.4} {ap:>7.4}", curve.tp, curve.fp, curve.tp + curve.fp);
    }
    Ok(())
}
