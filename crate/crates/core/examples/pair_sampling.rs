//! Labelling proposal pairs and drawing a balanced training set.

use std::collections::BTreeMap;

use crowdnms::pairs::{nearby_pairs, sample_training_pairs, SamplingConfig};
use crowdnms::scene::generate_corpus;
use crowdnms::SceneConfig;

fn main() -> crowdnms::Result<()> {
    let scenes = generate_corpus(&SceneConfig { n_scenes: 20, seed: 3, ..SceneConfig::default() })?;
    let sc = SamplingConfig::default();
    let mut available: BTreeMap<u8, usize> = BTreeMap::new();
    let mut sampled: BTreeMap<u8, usize> = BTreeMap::new();
    for s in &scenes {
        for (_, _, label) in nearby_pairs(s, sc.nms_thr, sc.match_thr) {
            *available.entry(label.case.id()).or_default() += 1;
        }
        for p in sample_training_pairs(s, &sc)? {
            *sampled.entry(p.label.case.id()).or_default() += 1;
        }
    }
    println!("nearby pairs by case:  {available:?}");
    println!("sampled pairs by case: {sampled:?}");
    let dissimilar = sampled.get(&6).copied().unwrap_or(0);
    let total: usize = sampled.values().sum();
    println!("dissimilar share {:.3} (target 1 of {})", dissimilar as f64 / total as f64, sc.ratio.0 + sc.ratio.1);
    Ok(())
}
