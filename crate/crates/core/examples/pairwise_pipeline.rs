//! End to end: generate, sample, train, infer distances, suppress, evaluate.
//! Usage: `pairwise_pipeline [epochs]`.

use crowdnms::embed::{infer_distance_matrix, train};
use crowdnms::eval::{pr_curve, EvalImage, Interpolation};
use crowdnms::pairs::{sample_training_pairs, SamplingConfig};
use crowdnms::scene::generate_corpus;
use crowdnms::suppress::{greedy_nms, kept_proposals, pairwise_nms, Kept};
use crowdnms::{EmbeddingModel, ModelConfig, Scene, SceneConfig, TrainConfig};

fn ap50(scenes: &[Scene], kept: &[Vec<Kept>]) -> f64 {
    let images: Vec<EvalImage> = scenes
        .iter()
        .zip(kept)
        .map(|(s, k)| EvalImage { image_id: s.image_id, detections: kept_proposals(&s.proposals, k), gt: s.gt.clone() })
        .collect();
    pr_curve(&images, 0.5).average_precision(Interpolation::Coco101).unwrap_or(0.0)
}

fn main() -> crowdnms::Result<()> {
    let epochs = std::env::args().nth(1).map_or(4, |v| v.parse().expect("epochs"));
    let scenes = generate_corpus(&SceneConfig { n_scenes: 120, seed: 21, ..SceneConfig::default() })?;
    let (train_scenes, test_scenes) = scenes.split_at(100);
    let sc = SamplingConfig::default();
    let mut samples = Vec::new();
    for s in train_scenes {
        samples.extend(sample_training_pairs(s, &sc)?);
    }
    let mut model = EmbeddingModel::new(ModelConfig { width: 16, ..ModelConfig::default() }, 0)?;
    let report = train(&mut model, &samples, &TrainConfig { epochs, ..TrainConfig::default() })?;
    println!("trained {} steps, final mean loss {:.4}", report.steps, report.loss_trace.last().unwrap_or(&f64::NAN));

    let mut greedy = Vec::new();
    let mut pairwise = Vec::new();
    for s in test_scenes {
        let dm = infer_distance_matrix(&model, s, 0.5)?;
        greedy.push(greedy_nms(&s.proposals, 0.5));
        pairwise.push(pairwise_nms(&s.proposals, 0.5, 0.5, &dm)?);
    }
    println!("held-out AP@0.5  greedy {:.4}  pairwise {:.4}", ap50(test_scenes, &greedy), ap50(test_scenes, &pairwise));
    Ok(())
}
