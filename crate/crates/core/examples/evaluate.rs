//! COCO-style evaluation: AP over IoU thresholds and F1 by occlusion level.

use crowdnms::eval::{map_over_thresholds, EvalConfig, EvalImage};
use crowdnms::scene::generate_corpus;
use crowdnms::suppress::{greedy_nms, kept_proposals};
use crowdnms::SceneConfig;

fn main() -> crowdnms::Result<()> {
    let scenes = generate_corpus(&SceneConfig { n_scenes: 50, occlusion_target: (0.4, 0.8), seed: 4, ..SceneConfig::default() })?;
    let images: Vec<EvalImage> = scenes
        .iter()
        .map(|s| EvalImage {
            image_id: s.image_id,
            detections: kept_proposals(&s.proposals, &greedy_nms(&s.proposals, 0.5)),
            gt: s.gt.clone(),
        })
        .collect();
    let report = map_over_thresholds(&images, &EvalConfig::default())?;
    println!("E_t    tp    fp  recall  precision  AP");
    for t in &report.thresholds {
        let ap = t.ap.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!("{:.2} {:>5} {:>5}  {:.4}     {:.4}  {ap}", t.eval_thr, t.tp, t.fp, t.recall, t.precision);
    }
    println!("mean AP {:.4}", report.mean_ap.unwrap_or(0.0));
    println!("F1 at E_t = {} by gt occlusion:", report.occlusion.eval_thr);
    for b in &report.occlusion.buckets {
        let f1 = b.f1.map_or("-".to_string(), |f| format!("{f:.4}"));
        println!("  [{:.2}, {:.2})  tp {:>3} fp {:>3} fn {:>3}  F1 {f1}", b.lo, b.hi, b.tp, b.fp, b.fn_);
    }
    Ok(())
}
