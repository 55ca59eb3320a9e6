use std::path::Path;
use std::process::{Command, Output};

use crowdnms::embed::infer_distance_matrix;
use crowdnms::eval::EvalReport;
use crowdnms::io;
use crowdnms::scene::generate_corpus;
use crowdnms::{iou, EmbeddingModel, ModelConfig, SceneConfig, ScoredProposal};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdnms"))
        .args(["--seed", "9", "--out-dir"])
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = cli(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(cli(dir.path(), &["nms", "--proposals", "x.jsonl", "--method", "pairwise"]).status.code(), Some(2));
    let missing = cli(dir.path(), &["nms", "--proposals", &s(&dir.path().join("absent.jsonl"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn corpus_on_disk_matches_library_generation() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--scenes", "3"]);
    let (_, scenes) = io::read_corpus(dir.path()).unwrap();
    let expected = generate_corpus(&SceneConfig { n_scenes: 3, seed: 9, ..SceneConfig::default() }).unwrap();
    assert_eq!(scenes, expected);
}

#[test]
fn empty_corpus_runs_through() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--scenes", "0"]);
    let props = s(&dir.path().join("proposals.jsonl"));
    ok(dir.path(), &["nms", "--proposals", &props]);
    assert!(io::read_proposals(&dir.path().join("detections.jsonl")).unwrap().is_empty());
}

#[test]
fn generated_scenes_meet_the_occlusion_target() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--scenes", "20", "--occlusion", "0.5:0.6", "--objects", "2:4"]);
    let (_, scenes) = io::read_corpus(dir.path()).unwrap();
    for scene in scenes {
        let hit = scene.gt.iter().enumerate().any(|(a, g)| {
            scene.gt[a + 1..].iter().any(|h| (0.5..=0.6).contains(&iou(&g.bbox, &h.bbox)))
        });
        assert!(hit, "scene {} misses the target", scene.image_id);
    }
}

#[test]
fn pairwise_with_infinite_threshold_writes_the_greedy_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| s(&dir.path().join(f));
    ok(dir.path(), &["gen", "--scenes", "5"]);
    ok(dir.path(), &["distances", "--corpus", &p(""), "--oracle"]);
    ok(dir.path(), &["nms", "--proposals", &p("proposals.jsonl"), "--output", "greedy.jsonl"]);
    ok(
        dir.path(),
        &[
            "nms", "--proposals", &p("proposals.jsonl"), "--method", "pairwise", "--distances", &p("distances.jsonl"),
            "--dt", "inf", "--output", "pairwise.jsonl",
        ],
    );
    assert_eq!(std::fs::read(p("greedy.jsonl")).unwrap(), std::fs::read(p("pairwise.jsonl")).unwrap());
}

#[test]
fn ground_truth_as_detections_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f);
    ok(dir.path(), &["gen", "--scenes", "4"]);
    let gt = io::read_gt(&p("gt.jsonl")).unwrap();
    let dets: Vec<ScoredProposal> = gt
        .iter()
        .flat_map(|(&id, objs)| objs.iter().map(move |g| ScoredProposal::new(id, g.bbox, 1.0).unwrap()))
        .collect();
    io::write_proposals(&p("perfect.jsonl"), &dets).unwrap();
    ok(dir.path(), &["eval", "--detections", &s(&p("perfect.jsonl")), "--gt", &s(&p("gt.jsonl"))]);
    let report: EvalReport = io::read_json(&p("eval.json")).unwrap();
    assert_eq!(report.thresholds.len(), 10);
    assert!(report.thresholds.iter().all(|t| t.ap == Some(1.0)));
    assert_eq!(report.mean_ap, Some(1.0));
}

#[test]
fn malformed_proposal_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f);
    ok(dir.path(), &["gen", "--scenes", "1"]);
    let text = std::fs::read_to_string(p("proposals.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"image_id\": 0, \"x\": 1.0";
    std::fs::write(p("proposals.jsonl"), lines.join("\n")).unwrap();
    let out = cli(dir.path(), &["nms", "--proposals", &s(&p("proposals.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("proposals.jsonl:3:"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# corpus size\nscenes = 2\nproposals_per_object = 3\n").unwrap();
    ok(dir.path(), &["--config", &s(&cfg), "gen"]);
    let (_, scenes) = io::read_corpus(dir.path()).unwrap();
    assert_eq!(scenes.len(), 2);
    assert!(scenes.iter().all(|sc| sc.proposals.len() == 3 * sc.gt.len()));
    ok(dir.path(), &["--config", &s(&cfg), "gen", "--scenes", "4"]);
    assert_eq!(io::read_corpus(dir.path()).unwrap().1.len(), 4);
}

#[test]
fn checkpoint_and_distances_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f);
    let model = EmbeddingModel::new(ModelConfig { width: 4, embedding_dim: 6, ..ModelConfig::default() }, 1).unwrap();
    io::write_checkpoint(&p("m.bin"), &model).unwrap();
    assert_eq!(io::read_checkpoint(&p("m.bin")).unwrap(), model);

    let scenes = generate_corpus(&SceneConfig { n_scenes: 2, seed: 3, ..SceneConfig::default() }).unwrap();
    let matrices: Vec<_> = scenes.iter().map(|sc| infer_distance_matrix(&model, sc, 0.5).unwrap()).collect();
    io::write_distances(&p("d.jsonl"), &matrices).unwrap();
    let back = io::read_distances(&p("d.jsonl")).unwrap();
    for m in &matrices {
        assert_eq!(&back[&m.image_id], m);
    }
}
