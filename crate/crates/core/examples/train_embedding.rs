//! Trains the pair embedding on a small corpus and reports held-out pair
//! accuracy, overall and per class. Usage: `train_embedding [epochs] [width]`.

use crowdnms::embed::{pair_accuracy, train_with};
use crowdnms::pairs::{sample_training_pairs, PairSample, SamplingConfig};
use crowdnms::scene::generate_corpus;
use crowdnms::{EmbeddingModel, ModelConfig, SceneConfig, TrainConfig};

/// Fraction of similar and of dissimilar pairs classified correctly.
fn per_class(model: &EmbeddingModel, pairs: &[PairSample]) -> crowdnms::Result<(f64, f64)> {
    let (mut hits, mut counts) = ([0usize; 2], [0usize; 2]);
    for p in pairs {
        let similar = p.label.is_similar();
        let predicted = model.pair_distance(&p.roi_i, &p.roi_j)? <= 0.5;
        counts[similar as usize] += 1;
        hits[similar as usize] += (predicted == similar) as usize;
    }
    let rate = |k: usize| hits[k] as f64 / counts[k].max(1) as f64;
    Ok((rate(1), rate(0)))
}

fn report(stage: &str, model: &EmbeddingModel, pairs: &[PairSample]) -> crowdnms::Result<()> {
    let (sim, dis) = per_class(model, pairs)?;
    println!("{stage:<16} accuracy {:.4}  similar {sim:.4}  dissimilar {dis:.4}", pair_accuracy(model, pairs, 0.5)?);
    Ok(())
}

fn main() -> crowdnms::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(6, |v| v.parse().expect("epochs"));
    let width = args.next().map_or(16, |v| v.parse().expect("width"));

    let scenes = generate_corpus(&SceneConfig { n_scenes: 100, seed: 1, ..SceneConfig::default() })?;
    let sc = SamplingConfig::default();
    let pairs = |s: &[crowdnms::Scene]| -> crowdnms::Result<Vec<PairSample>> {
        Ok(s.iter().map(|s| sample_training_pairs(s, &sc)).collect::<crowdnms::Result<Vec<_>>>()?.concat())
    };
    let (train, held_out) = (pairs(&scenes[..80])?, pairs(&scenes[80..])?);

    let mut model = EmbeddingModel::new(ModelConfig { width, ..ModelConfig::default() }, 0)?;
    println!("{} parameters, {} training pairs, {} held-out pairs", model.num_parameters(), train.len(), held_out.len());
    report("before training", &model, &held_out)?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    train_with(&mut model, &train, &cfg, |e, loss| println!("epoch {:>2}  mean pair loss {loss:.4}", e + 1))?;
    report("after training", &model, &held_out)?;
    Ok(())
}
