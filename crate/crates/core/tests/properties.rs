use std::collections::BTreeSet;

use crowdnms::embed::{pair_accuracy, train, DistanceMatrix};
use crowdnms::eval::{average_precision, f1_by_occlusion, EvalImage};
use crowdnms::geometry::roi_align;
use crowdnms::pairs::{label_pair, match_proposal_to_gt, nearby_pairs, sample_training_pairs, split_budget, PairSample, SamplingConfig};
use crowdnms::scene::{generate_corpus, generate_scene, generate_scene_with_signatures, GtObject};
use crowdnms::suppress::{greedy_nms, pairwise_nms, soft_nms_linear};
use crowdnms::{iou, BBox, EmbeddingModel, FeatureGrid, ModelConfig, SceneConfig, ScoredProposal, TrainConfig};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..80.0f64, 1.0..80.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
}

fn proposals(max: usize) -> impl Strategy<Value = Vec<ScoredProposal>> {
    prop::collection::vec(
        ((0.0..120.0f64, 0.0..120.0f64, 10.0..60.0f64, 10.0..60.0f64), 0u8..12),
        0..=max,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|((x, y, w, h), s)| ScoredProposal::new(0, BBox::new(x, y, w, h).unwrap(), s as f64 / 11.0).unwrap())
            .collect()
    })
}

/// Proposals plus distances for every pair.
fn instance(max: usize) -> impl Strategy<Value = (Vec<ScoredProposal>, DistanceMatrix)> {
    proposals(max).prop_flat_map(|props| {
        let n = props.len();
        (Just(props), prop::collection::vec(0.0..2.0f64, n * n.saturating_sub(1) / 2)).prop_map(move |(props, ds)| {
            let mut dm = DistanceMatrix::new(0);
            let mut it = ds.into_iter();
            for i in 0..n {
                for j in i + 1..n {
                    dm.insert(i, j, it.next().unwrap()).unwrap();
                }
            }
            (props, dm)
        })
    })
}

fn grid(channels: usize, h: usize, w: usize) -> impl Strategy<Value = FeatureGrid> {
    prop::collection::vec(-5.0..5.0f64, channels * h * w)
        .prop_map(move |v| FeatureGrid::new(channels, h, w, 8.0, v).unwrap())
}

/// Bilinear interpolation written as a sum over every lattice point with a
/// triangle kernel; lattice value `(gy, gx)` sits at `(gy + 0.5, gx + 0.5)`.
fn kernel_sample(fg: &FeatureGrid, c: usize, fy: f64, fx: f64) -> f64 {
    let mut v = 0.0;
    for gy in 0..fg.height() {
        for gx in 0..fg.width() {
            let wy = (1.0 - (fy - 0.5 - gy as f64).abs()).max(0.0);
            let wx = (1.0 - (fx - 0.5 - gx as f64).abs()).max(0.0);
            v += wy * wx * fg.get(c, gy, gx);
        }
    }
    v
}

fn scene_cfg(n_scenes: usize, seed: u64) -> SceneConfig {
    SceneConfig { n_scenes, seed, ..SceneConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_shrinks_as_boxes_separate(a in bbox(), b in bbox(), step in 0.1..20.0f64) {
        let (acx, _) = a.center();
        let (bcx, _) = b.center();
        let dir = if bcx >= acx { 1.0 } else { -1.0 };
        let mut prev = iou(&a, &b);
        let mut moved = b;
        for _ in 0..10 {
            moved = moved.translated(dir * step, 0.0).unwrap();
            let cur = iou(&a, &moved);
            prop_assert!(cur <= prev + 1e-15, "{cur} > {prev}");
            prev = cur;
        }
    }

    #[test]
    fn roi_align_is_linear(f in grid(2, 6, 7), g in grid(2, 6, 7), alpha in -3.0..3.0f64, beta in -3.0..3.0f64,
                           x in 0.0..50.0f64, y in 0.0..40.0f64, w in 1.0..40.0f64, h in 1.0..40.0f64) {
        let roi = BBox::new(x, y, w, h).unwrap();
        let mix: Vec<f64> = f.values().iter().zip(g.values()).map(|(a, b)| alpha * a + beta * b).collect();
        let m = FeatureGrid::new(2, 6, 7, 8.0, mix).unwrap();
        let (rf, rg, rm) = (roi_align(&f, &roi, 5).unwrap(), roi_align(&g, &roi, 5).unwrap(), roi_align(&m, &roi, 5).unwrap());
        for k in 0..rm.values().len() {
            let want = alpha * rf.values()[k] + beta * rg.values()[k];
            prop_assert!((rm.values()[k] - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn roi_align_matches_kernel_oracle(f in grid(2, 5, 6), x in -10.0..50.0f64, y in -10.0..40.0f64,
                                       w in 1.0..40.0f64, h in 1.0..40.0f64, size in 1usize..6) {
        let roi = BBox::new(x, y, w, h).unwrap();
        prop_assume!(roi.right() > 0.0 && roi.bottom() > 0.0 && x < 48.0 && y < 40.0);
        let r = roi_align(&f, &roi, size).unwrap();
        for c in 0..2 {
            for oy in 0..size {
                for ox in 0..size {
                    let fy = (y + (oy as f64 + 0.5) * h / size as f64) / 8.0;
                    let fx = (x + (ox as f64 + 0.5) * w / size as f64) / 8.0;
                    prop_assert!((r.get(c, oy, ox) - kernel_sample(&f, c, fy, fx)).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn greedy_keeps_no_overlapping_pair(props in proposals(30), nt in 0.05..1.0f64) {
        let kept = greedy_nms(&props, nt);
        for (a, ka) in kept.iter().enumerate() {
            for kb in &kept[a + 1..] {
                prop_assert!(iou(&props[ka.index].bbox, &props[kb.index].bbox) < nt);
            }
        }
    }

    #[test]
    fn suppression_never_invents_boxes(props in proposals(30), nt in 0.0..1.0f64, theta in 0.0..0.5f64) {
        for kept in [greedy_nms(&props, nt), soft_nms_linear(&props, nt, theta)] {
            let mut seen = BTreeSet::new();
            for k in kept {
                prop_assert!(k.index < props.len() && seen.insert(k.index));
                prop_assert!(k.score <= props[k.index].score);
            }
        }
    }

    #[test]
    fn pairwise_with_infinite_threshold_is_greedy((props, dm) in instance(30), nt in 0.0..1.0f64) {
        prop_assert_eq!(pairwise_nms(&props, nt, f64::INFINITY, &dm).unwrap(), greedy_nms(&props, nt));
    }

    /// The kept set never holds a pair that would suppress each other, and
    /// every dropped proposal has a higher-ranked kept proposal that
    /// suppresses it.
    #[test]
    fn pairwise_output_is_independent_and_covering((props, dm) in instance(20), nt in 0.0..1.0f64, dt in 0.0..2.0f64) {
        let kept = pairwise_nms(&props, nt, dt, &dm).unwrap();
        let suppresses = |m: usize, b: usize| {
            iou(&props[m].bbox, &props[b].bbox) >= nt && dm.get(m.min(b), m.max(b)).unwrap() <= dt
        };
        let rank: Vec<usize> = kept.iter().map(|k| k.index).collect();
        for (a, &m) in rank.iter().enumerate() {
            for &b in &rank[a + 1..] {
                prop_assert!(!suppresses(m, b));
            }
        }
        let kept_set: BTreeSet<usize> = rank.iter().copied().collect();
        for b in (0..props.len()).filter(|b| !kept_set.contains(b)) {
            let ahead = |m: usize| props[m].score > props[b].score || (props[m].score == props[b].score && m < b);
            prop_assert!(rank.iter().any(|&m| ahead(m) && suppresses(m, b)), "dropped {b} has no suppressor");
        }
        if let Some(top) = greedy_nms(&props, nt).first() {
            prop_assert_eq!(kept[0], *top);
        }
    }

    #[test]
    fn soft_linear_at_unit_threshold_is_identity(props in proposals(30)) {
        prop_assume!((0..props.len()).all(|i| (0..i).all(|j| iou(&props[i].bbox, &props[j].bbox) < 1.0)));
        let mut kept = soft_nms_linear(&props, 1.0, 0.0);
        kept.sort_by_key(|k| k.index);
        prop_assert_eq!(kept.len(), props.len());
        for k in kept {
            prop_assert_eq!(k.score, props[k.index].score);
        }
    }

    #[test]
    fn low_score_disjoint_false_positive_never_raises_ap(props in proposals(10), n_gt in 1usize..4, thr in 0.5..0.95f64) {
        let gt: Vec<GtObject> = (0..n_gt)
            .map(|k| GtObject { object_id: k as u64, bbox: BBox::new(20.0 * k as f64, 30.0, 40.0, 50.0).unwrap() })
            .collect();
        let base = average_precision(&props, &gt, thr).unwrap();
        let mut more = props.clone();
        more.push(ScoredProposal::new(0, BBox::new(5000.0, 5000.0, 10.0, 10.0).unwrap(), 0.0).unwrap());
        prop_assert!(average_precision(&more, &gt, thr).unwrap() <= base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn ap_non_increasing_in_threshold(props in proposals(10), n_gt in 1usize..4) {
        let gt: Vec<GtObject> = (0..n_gt)
            .map(|k| GtObject { object_id: k as u64, bbox: BBox::new(25.0 * k as f64, 20.0, 45.0, 45.0).unwrap() })
            .collect();
        let aps: Vec<f64> = (0..10).map(|k| average_precision(&props, &gt, 0.5 + 0.05 * k as f64).unwrap()).collect();
        prop_assert!(aps.windows(2).all(|w| w[1] <= w[0]), "{aps:?}");
    }

    #[test]
    fn f1_buckets_account_for_every_gt(seed in 0u64..1000, thr in 0.5..0.9f64) {
        let scene = generate_scene(&SceneConfig { n_scenes: 1, seed, ..SceneConfig::default() }, 0).unwrap();
        let img = EvalImage { image_id: 0, detections: greedy_nms_props(&scene.proposals), gt: scene.gt.clone() };
        let buckets: Vec<(f64, f64)> = (0..10).map(|i| (0.4 + 0.05 * i as f64, 0.45 + 0.05 * i as f64)).collect();
        let f1 = f1_by_occlusion(std::slice::from_ref(&img), thr, &buckets);
        let counted: usize = f1.buckets.iter().chain([&f1.remainder]).map(|b| b.tp + b.fn_).sum();
        prop_assert_eq!(counted, scene.gt.len());
    }

    #[test]
    fn split_budget_respects_availability(budget in 0usize..80, nd in 0usize..40, ns in 0usize..80) {
        let (d, s) = split_budget(budget, (1, 3), nd, ns);
        prop_assert!(d <= nd && s <= ns);
        prop_assert_eq!(d + s, budget.min(nd + ns));
        if nd >= budget / 4 && ns >= budget - budget / 4 {
            prop_assert_eq!(d, budget / 4);
        }
    }
}

fn greedy_nms_props(props: &[ScoredProposal]) -> Vec<ScoredProposal> {
    crowdnms::suppress::kept_proposals(props, &greedy_nms(props, 0.5))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenes_are_deterministic(seed in 0u64..10_000, index in 0usize..50) {
        let cfg = scene_cfg(50, seed);
        prop_assert_eq!(generate_scene(&cfg, index).unwrap(), generate_scene(&cfg, index).unwrap());
    }

    #[test]
    fn lone_object_mean_is_its_signature(seed in 0u64..10_000) {
        let cfg = SceneConfig { objects_per_scene: (1, 1), ..scene_cfg(1, seed) };
        let (scene, sigs) = generate_scene_with_signatures(&cfg, 0).unwrap();
        let mean = scene.features.mean_over(&scene.gt[0].bbox);
        let err = sigs[0].iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(err < 3.0 * cfg.background_noise, "{err}");
    }

    #[test]
    fn occluded_pair_means_identify_their_own_signature(seed in 0u64..10_000, lo in 0.0..0.7f64) {
        let cfg = SceneConfig { objects_per_scene: (2, 2), occlusion_target: (lo, lo + 0.1), ..scene_cfg(1, seed) };
        let (scene, sigs) = generate_scene_with_signatures(&cfg, 0).unwrap();
        for (k, g) in scene.gt.iter().enumerate() {
            let mean = scene.features.mean_over(&g.bbox);
            let dist = |s: &Vec<f64>| s.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let nearest = (0..sigs.len()).min_by(|&a, &b| dist(&sigs[a]).total_cmp(&dist(&sigs[b]))).unwrap();
            prop_assert_eq!(nearest, k);
        }
    }

    #[test]
    fn scores_in_range(seed in 0u64..10_000) {
        let scene = generate_scene(&scene_cfg(1, seed), 0).unwrap();
        prop_assert!(scene.proposals.iter().all(|p| (0.0..=1.0).contains(&p.score)));
    }

    #[test]
    fn label_is_symmetric_and_follows_the_rule(seed in 0u64..10_000) {
        let cfg = SceneConfig { objects_per_scene: (2, 2), proposals_per_object: 2, center_jitter: 0.1, ..scene_cfg(1, seed) };
        let scene = generate_scene(&cfg, 0).unwrap();
        let ps = &scene.proposals;
        for i in 0..ps.len() {
            for j in 0..ps.len() {
                let l = label_pair(&ps[i], &ps[j], &scene.gt, 0.5, 0.5);
                prop_assert_eq!(l, label_pair(&ps[j], &ps[i], &scene.gt, 0.5, 0.5));
                let (a, b) = (match_proposal_to_gt(&ps[i], &scene.gt, 0.5), match_proposal_to_gt(&ps[j], &scene.gt, 0.5));
                let two_objects = matches!((a, b), (Some(a), Some(b)) if a != b);
                let nearby = iou(&ps[i].bbox, &ps[j].bbox) >= 0.5;
                prop_assert_eq!(l.y == 0, nearby && two_objects);
            }
        }
    }

    #[test]
    fn sampled_pairs_are_nearby_and_balanced(seed in 0u64..10_000) {
        let scene = generate_scene(&SceneConfig { occlusion_target: (0.5, 0.7), ..scene_cfg(1, seed) }, 0).unwrap();
        let sc = SamplingConfig { seed, ..SamplingConfig::default() };
        let pairs = sample_training_pairs(&scene, &sc).unwrap();
        for p in &pairs {
            prop_assert!(iou(&scene.proposals[p.index_i].bbox, &scene.proposals[p.index_j].bbox) >= sc.nms_thr);
            prop_assert!(p.label.nearby);
        }
        let available = nearby_pairs(&scene, sc.nms_thr, sc.match_thr);
        let n_dis = available.iter().filter(|(_, _, l)| !l.is_similar()).count();
        let n_sim = available.len() - n_dis;
        if n_dis >= sc.pairs_per_image / 4 && n_sim >= sc.pairs_per_image * 3 / 4 {
            let dis = pairs.iter().filter(|p| !p.label.is_similar()).count();
            prop_assert_eq!(pairs.len(), sc.pairs_per_image);
            prop_assert_eq!(dis * 4, pairs.len());
        }
    }
}

fn small_model_config() -> ModelConfig {
    ModelConfig { width: 4, embedding_dim: 8, ..ModelConfig::default() }
}

fn small_samples() -> Vec<PairSample> {
    let scenes = generate_corpus(&scene_cfg(4, 77)).unwrap();
    scenes.iter().flat_map(|s| sample_training_pairs(s, &SamplingConfig::default()).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn distances_are_symmetric_and_non_negative(seed in 0u64..1000, a in 0usize..20, b in 0usize..20) {
        let samples = small_samples();
        let model = EmbeddingModel::new(small_model_config(), seed).unwrap();
        let (ra, rb) = (&samples[a % samples.len()].roi_i, &samples[b % samples.len()].roi_j);
        let (dab, dba) = (model.pair_distance(ra, rb).unwrap(), model.pair_distance(rb, ra).unwrap());
        prop_assert_eq!(dab, dba);
        prop_assert!(dab >= 0.0);
        prop_assert_eq!(model.forward(ra).unwrap(), model.forward(ra).unwrap());
    }
}

#[test]
fn training_is_bit_reproducible() {
    let samples = small_samples();
    let cfg = TrainConfig { epochs: 2, seed: 5, ..TrainConfig::default() };
    let run = || {
        let mut m = EmbeddingModel::new(small_model_config(), 3).unwrap();
        let report = train(&mut m, &samples, &cfg).unwrap();
        (m, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    let bits = |m: &EmbeddingModel| -> Vec<u64> {
        m.tensors().iter().chain(m.running_mean()).chain(m.running_var()).flatten().map(|v| v.to_bits()).collect()
    };
    assert_eq!(bits(&a), bits(&b));
}

/// Widely separated signatures and pure ROIs: trained distances straddle
/// half the margin.
#[test]
fn margin_separates_classes_on_separable_data() {
    let cfg = SceneConfig {
        objects_per_scene: (2, 3),
        occlusion_target: (0.3, 0.5),
        center_jitter: 0.01,
        size_jitter: 0.01,
        ..scene_cfg(50, 8)
    };
    let scenes = generate_corpus(&cfg).unwrap();
    let sc = SamplingConfig::default();
    let pairs = |s: &[crowdnms::Scene]| -> Vec<PairSample> {
        s.iter().flat_map(|s| sample_training_pairs(s, &sc).unwrap()).collect()
    };
    let (tr, val) = (pairs(&scenes[..40]), pairs(&scenes[40..]));
    let mut model = EmbeddingModel::new(ModelConfig { width: 8, ..ModelConfig::default() }, 0).unwrap();
    train(&mut model, &tr, &TrainConfig { epochs: 3, ..TrainConfig::default() }).unwrap();
    let mean = |similar: bool| {
        let ds: Vec<f64> = val
            .iter()
            .filter(|p| p.label.is_similar() == similar)
            .map(|p| model.pair_distance(&p.roi_i, &p.roi_j).unwrap())
            .collect();
        ds.iter().sum::<f64>() / ds.len() as f64
    };
    let (sim, dis) = (mean(true), mean(false));
    assert!(dis > 0.5 && 0.5 > sim, "similar {sim}, dissimilar {dis}");
    assert!(pair_accuracy(&model, &val, 0.5).unwrap() > 0.9);
}
