//! The `crowdnms` command line: `gen`, `sample-pairs`, `train`,
//! `distances`, `nms`, `eval` and `report`.
//!
//! Every subcommand reads its inputs from explicit paths and writes its
//! outputs into `--out-dir`. A `--config` file of `key = value` lines
//! supplies defaults for any long flag; flags given on the command line (or
//! through the environment) win.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{ArgAction, ArgGroup, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::embed::{self, infer_distance_matrix, DistanceMatrix, EmbeddingModel, HeadType, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, EvalImage, EvalReport, Interpolation};
use crate::io;
use crate::pairs::{self, PairCase, PairLabel, SamplingConfig};
use crate::scene::{self, oracle_distance, Scene, SceneConfig};
use crate::suppress::{self, Method, SuppressionConfig};

#[derive(Debug, Parser)]
#[command(name = "crowdnms", version, about = "Pairwise non-maximum suppression toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for scene generation, pair sampling and training.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving the outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// File of `key = value` lines providing defaults for long flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-image stages (default: all cores).
    #[arg(long, global = true, env = "CROWDNMS_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene corpus.
    Gen(GenArgs),
    /// Sample labelled training pairs from a corpus.
    SamplePairs(SamplePairsArgs),
    /// Train the pair embedding network.
    Train(TrainArgs),
    /// Compute pair distances for every nearby proposal pair.
    Distances(DistancesArgs),
    /// Run non-maximum suppression over a proposal file.
    Nms(NmsArgs),
    /// Evaluate detections against ground truth.
    Eval(EvalArgs),
    /// Merge evaluation reports into comparison tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Objects per scene, `lo:hi` inclusive.
    #[arg(long, value_parser = parse_pair::<usize>)]
    pub objects: Option<(usize, usize)>,
    /// Target IoU between each placed object and its neighbor, `lo:hi`.
    #[arg(long, value_parser = parse_pair::<f64>)]
    pub occlusion: Option<(f64, f64)>,
    #[arg(long)]
    pub proposals_per_object: Option<usize>,
    #[arg(long)]
    pub center_jitter: Option<f64>,
    #[arg(long)]
    pub size_jitter: Option<f64>,
    #[arg(long)]
    pub min_source_iou: Option<f64>,
    #[arg(long)]
    pub score_noise: Option<f64>,
    #[arg(long)]
    pub signature_strength: Option<f64>,
    #[arg(long)]
    pub background_noise: Option<f64>,
    /// Feature channels.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Feature grid stride in pixels.
    #[arg(long)]
    pub stride: Option<f64>,
    #[arg(long)]
    pub image_width: Option<f64>,
    #[arg(long)]
    pub image_height: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SamplePairsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub pairs_per_image: usize,
    /// Use the dense-proposal budget of 64 pairs per image.
    #[arg(long, conflicts_with = "pairs_per_image")]
    pub dense: bool,
    /// Dissimilar to similar ratio, `a:b`.
    #[arg(long, default_value = "1:3", value_parser = parse_pair::<usize>)]
    pub ratio: (usize, usize),
    #[arg(long, default_value_t = 0.5)]
    pub nt: f64,
    #[arg(long, default_value_t = 0.5)]
    pub match_thr: f64,
    #[arg(long, default_value_t = crate::geometry::DEFAULT_ROI_SIZE)]
    pub roi_size: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HeadArg {
    Gap,
    Fc,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    /// Images per SGD step.
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Contrastive margin.
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 0.9)]
    pub bn_momentum: f64,
    /// Channel width of the convolutional trunk.
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 50)]
    pub embedding_dim: usize,
    #[arg(long, value_enum, default_value = "gap")]
    pub head: HeadArg,
    #[arg(long, default_value_t = crate::geometry::DEFAULT_ROI_SIZE)]
    pub roi_size: usize,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["model", "oracle"])))]
pub struct DistancesArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use the ground-truth oracle distance instead of a model.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 0.5)]
    pub nt: f64,
    /// Matching threshold of the oracle.
    #[arg(long, default_value_t = 0.5)]
    pub match_thr: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Greedy,
    SoftLinear,
    SoftGaussian,
    Pairwise,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Greedy => Method::Greedy,
            MethodArg::SoftLinear => Method::SoftLinear,
            MethodArg::SoftGaussian => Method::SoftGaussian,
            MethodArg::Pairwise => Method::Pairwise,
        }
    }
}

#[derive(Debug, Args)]
pub struct NmsArgs {
    #[arg(long)]
    pub proposals: PathBuf,
    #[arg(long, value_enum, default_value = "greedy")]
    pub method: MethodArg,
    /// IoU threshold N_t.
    #[arg(long)]
    pub nt: Option<f64>,
    /// Distance threshold D_t; `inf` disables the distance test.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Take N_t and D_t from the tabulated preset for this evaluation
    /// threshold unless given explicitly.
    #[arg(long)]
    pub preset: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    /// Score floor of Soft-NMS.
    #[arg(long, default_value_t = 0.0)]
    pub theta: f64,
    #[arg(long, required_if_eq("method", "pairwise"))]
    pub distances: Option<PathBuf>,
    /// Output file name inside `--out-dir`.
    #[arg(long, default_value = "detections.jsonl")]
    pub output: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Evaluation IoU thresholds: `start:end:step`, a list `a,b,...` or one value.
    #[arg(long, default_value = "0.5:0.95:0.05", value_parser = parse_thresholds)]
    pub et: Thresholds,
    /// Occlusion buckets as `lo:hi:width`.
    #[arg(long, default_value = "0.4:0.9:0.05", value_parser = parse_buckets)]
    pub buckets: Buckets,
    /// Evaluation threshold used for the occlusion buckets.
    #[arg(long, default_value_t = 0.5)]
    pub bucket_et: f64,
    /// Report label (default: the detection file stem).
    #[arg(long)]
    pub label: Option<String>,
    /// All-point interpolated AP instead of 101-point.
    #[arg(long)]
    pub all_point: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `eval.json` files to merge.
    #[arg(required = true)]
    pub evals: Vec<PathBuf>,
    /// Evaluation threshold of the comparison table.
    #[arg(long, default_value_t = 0.5)]
    pub at: f64,
    /// Label the gains are measured against (default: the first report).
    #[arg(long)]
    pub baseline: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct Buckets(pub Vec<(f64, f64)>);

fn parse_pair<T: FromStr>(s: &str) -> std::result::Result<(T, T), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected `lo:hi`, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<T>().map_err(|_| format!("bad number {v:?} in {s:?}"));
    Ok((parse(a)?, parse(b)?))
}

fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    v.trim().parse().map_err(|_| format!("bad number {v:?}"))
}

fn parse_triple(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [a, b, c] => {
            let (a, b, c) = (parse_f64(a)?, parse_f64(b)?, parse_f64(c)?);
            if c.is_nan() || c <= 0.0 || b < a {
                return Err(format!("range {s:?} needs start <= end and a positive step"));
            }
            Ok((a, b, c))
        }
        _ => Err(format!("expected `start:end:step`, got {s:?}")),
    }
}

fn parse_thresholds(s: &str) -> std::result::Result<Thresholds, String> {
    if s.contains(':') {
        let (a, b, c) = parse_triple(s)?;
        Ok(Thresholds(eval::threshold_range(a, b, c)))
    } else {
        s.split(',').map(parse_f64).collect::<std::result::Result<_, _>>().map(Thresholds)
    }
}

fn parse_buckets(s: &str) -> std::result::Result<Buckets, String> {
    let (a, b, c) = parse_triple(s)?;
    let edges = eval::threshold_range(a, b, c);
    if edges.len() < 2 {
        return Err(format!("bucket range {s:?} holds no bucket"));
    }
    Ok(Buckets(edges.windows(2).map(|w| (w[0], w[1])).collect()))
}

enum Failure {
    Usage(clap::Error),
    Runtime(Error),
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 on usage errors, 1 on runtime errors.
pub fn main() -> i32 {
    run(std::env::args_os())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse(args) {
        Ok(cli) => cli,
        Err(Failure::Usage(e)) => {
            let _ = e.print();
            return e.exit_code();
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let result = match cli.global.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Error::InvalidConfig(format!("cannot start {n} worker threads: {e}"))),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn parse(args: Vec<OsString>) -> std::result::Result<Cli, Failure> {
    let matches = Cli::command().try_get_matches_from(&args).map_err(Failure::Usage)?;
    let Some(config) = matches.get_one::<PathBuf>("config").cloned() else {
        return Cli::from_arg_matches(&matches).map_err(Failure::Usage);
    };
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let extra = config_tokens(&config, name, sub_matches)?;
    let mut full = args;
    full.extend(extra);
    let matches = Cli::command().try_get_matches_from(&full).map_err(Failure::Usage)?;
    Cli::from_arg_matches(&matches).map_err(Failure::Usage)
}

/// Flags for the config entries that apply to subcommand `name` and were not
/// already given on the command line or through the environment.
fn config_tokens(path: &Path, name: &str, given: &clap::ArgMatches) -> std::result::Result<Vec<OsString>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(Error::io(path, e)))?;
    let root = Cli::command();
    let sub = root.find_subcommand(name).expect("parsed subcommand exists");
    let known_elsewhere: BTreeSet<&str> =
        root.get_subcommands().flat_map(|s| s.get_arguments()).filter_map(|a| a.get_long()).collect();
    let usage = |msg: String| Failure::Usage(Cli::command().error(ErrorKind::InvalidValue, msg));

    let mut tokens = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{}:{}: expected `key = value`", path.display(), k + 1)))?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        if key == "config" {
            return Err(usage(format!("{}:{}: config files cannot nest", path.display(), k + 1)));
        }
        let arg = sub.get_arguments().chain(root.get_arguments()).find(|a| a.get_long() == Some(key.as_str()));
        let Some(arg) = arg else {
            if known_elsewhere.contains(key.as_str()) {
                continue;
            }
            return Err(usage(format!("{}:{}: unknown key {key:?}", path.display(), k + 1)));
        };
        if matches!(given.value_source(arg.get_id().as_str()), Some(ValueSource::CommandLine | ValueSource::EnvVariable))
        {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value {
                "true" => tokens.push(OsString::from(format!("--{key}"))),
                "false" => {}
                _ => return Err(usage(format!("{}:{}: {key} expects true or false", path.display(), k + 1))),
            }
        } else {
            tokens.push(OsString::from(format!("--{key}={value}")));
        }
    }
    Ok(tokens)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Gen(a) => cmd_gen(g, a),
        Command::SamplePairs(a) => cmd_sample_pairs(g, a),
        Command::Train(a) => cmd_train(g, a),
        Command::Distances(a) => cmd_distances(g, a),
        Command::Nms(a) => cmd_nms(g, a),
        Command::Eval(a) => cmd_eval(g, a),
        Command::Report(a) => cmd_report(g, a),
    }
}

pub fn cmd_gen(g: &GlobalArgs, a: &GenArgs) -> Result<()> {
    let d = SceneConfig::default();
    let cfg = SceneConfig {
        n_scenes: a.scenes.unwrap_or(d.n_scenes),
        objects_per_scene: a.objects.unwrap_or(d.objects_per_scene),
        occlusion_target: a.occlusion.unwrap_or(d.occlusion_target),
        proposals_per_object: a.proposals_per_object.unwrap_or(d.proposals_per_object),
        center_jitter: a.center_jitter.unwrap_or(d.center_jitter),
        size_jitter: a.size_jitter.unwrap_or(d.size_jitter),
        min_source_iou: a.min_source_iou.unwrap_or(d.min_source_iou),
        score_noise: a.score_noise.unwrap_or(d.score_noise),
        signature_strength: a.signature_strength.unwrap_or(d.signature_strength),
        background_noise: a.background_noise.unwrap_or(d.background_noise),
        feature_channels: a.channels.unwrap_or(d.feature_channels),
        stride: a.stride.unwrap_or(d.stride),
        image_width: a.image_width.unwrap_or(d.image_width),
        image_height: a.image_height.unwrap_or(d.image_height),
        seed: g.seed,
        ..d
    };
    let scenes = scene::generate_corpus(&cfg)?;
    io::write_corpus(&g.out_dir, &cfg, &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), g.out_dir.display());
    Ok(())
}

pub fn cmd_sample_pairs(g: &GlobalArgs, a: &SamplePairsArgs) -> Result<()> {
    let (_, scenes) = io::read_corpus(&a.corpus)?;
    let cfg = SamplingConfig {
        pairs_per_image: if a.dense { SamplingConfig::DENSE_PAIRS_PER_IMAGE } else { a.pairs_per_image },
        ratio: a.ratio,
        match_thr: a.match_thr,
        nms_thr: a.nt,
        roi_size: a.roi_size,
        seed: g.seed,
    };
    cfg.validate()?;
    let per_image: Vec<Vec<_>> =
        scenes.par_iter().map(|s| pairs::sample_training_pairs(s, &cfg)).collect::<Result<_>>()?;
    let samples: Vec<_> = per_image.into_iter().flatten().collect();
    io::write_pairs(&g.out_dir.join("pairs.jsonl"), &samples)?;
    let dissimilar = samples.iter().filter(|s| !s.label.is_similar()).count();
    println!("wrote {} pairs ({} dissimilar, {} similar)", samples.len(), dissimilar, samples.len() - dissimilar);
    Ok(())
}

fn scenes_by_id(scenes: &[Scene]) -> BTreeMap<u64, &Scene> {
    scenes.iter().map(|s| (s.image_id, s)).collect()
}

pub fn cmd_train(g: &GlobalArgs, a: &TrainArgs) -> Result<()> {
    let (_, scenes) = io::read_corpus(&a.corpus)?;
    let by_id = scenes_by_id(&scenes);
    let rows = io::read_pairs(&a.pairs)?;
    let samples = rows
        .par_iter()
        .map(|r| {
            let scene = by_id.get(&r.image_id).ok_or_else(|| Error::Format {
                path: a.pairs.clone(),
                message: format!("pair refers to unknown image {}", r.image_id),
            })?;
            let case = PairCase::from_id(r.case_id).expect("validated on read");
            pairs::pair_sample(scene, r.i, r.j, PairLabel::from_case(case), a.roi_size)
        })
        .collect::<Result<Vec<_>>>()?;
    let in_channels = scenes.first().map_or(SceneConfig::default().feature_channels, |s| s.features.channels());
    let model_cfg = ModelConfig {
        in_channels,
        width: a.width,
        embedding_dim: a.embedding_dim,
        roi_size: a.roi_size,
        head: match a.head {
            HeadArg::Gap => HeadType::Gap,
            HeadArg::Fc => HeadType::Fc,
        },
    };
    let train_cfg = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        margin: a.margin,
        epochs: a.epochs,
        bn_momentum: a.bn_momentum,
        seed: g.seed,
    };
    let mut model = EmbeddingModel::new(model_cfg, g.seed)?;
    let report = embed::train_with(&mut model, &samples, &train_cfg, |epoch, loss| {
        eprintln!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    })?;
    io::write_checkpoint(&g.out_dir.join("model.bin"), &model)?;
    let mut log = csv_writer(&g.out_dir.join("train_log.csv"))?;
    log.write_record(["epoch", "mean_loss"]).map_err(csv_err(&g.out_dir))?;
    for (epoch, loss) in report.loss_trace.iter().enumerate() {
        log.write_record([(epoch + 1).to_string(), loss.to_string()]).map_err(csv_err(&g.out_dir))?;
    }
    log.flush().map_err(|e| Error::io(&g.out_dir, e))?;
    let accuracy = embed::pair_accuracy(&model, &samples, train_cfg.margin / 2.0)?;
    println!("trained on {} pairs, {} steps, training accuracy {accuracy:.4}", samples.len(), report.steps);
    Ok(())
}

pub fn cmd_distances(g: &GlobalArgs, a: &DistancesArgs) -> Result<()> {
    let (_, scenes) = io::read_corpus(&a.corpus)?;
    let matrices: Vec<DistanceMatrix> = match &a.model {
        Some(path) => {
            let model = io::read_checkpoint(path)?;
            scenes.par_iter().map(|s| infer_distance_matrix(&model, s, a.nt)).collect::<Result<_>>()?
        }
        None => scenes
            .par_iter()
            .map(|s| {
                DistanceMatrix::from_fn(s, a.nt, |i, j| {
                    oracle_distance(&s.proposals[i], &s.proposals[j], s, a.match_thr)
                })
            })
            .collect::<Result<_>>()?,
    };
    io::write_distances(&g.out_dir.join("distances.jsonl"), &matrices)?;
    println!("wrote {} distances", matrices.iter().map(DistanceMatrix::len).sum::<usize>());
    Ok(())
}

pub fn cmd_nms(g: &GlobalArgs, a: &NmsArgs) -> Result<()> {
    let preset = match a.preset {
        Some(et) => Some(
            suppress::preset_for(et)
                .ok_or_else(|| Error::InvalidConfig(format!("no preset for evaluation threshold {et}")))?,
        ),
        None => None,
    };
    let d = SuppressionConfig::default();
    let cfg = SuppressionConfig {
        method: a.method.into(),
        nms_thr: a.nt.or(preset.map(|p| p.0)).unwrap_or(d.nms_thr),
        dist_thr: a.dt.or(preset.map(|p| p.1)).unwrap_or(d.dist_thr),
        sigma: a.sigma,
        theta: a.theta,
    };
    cfg.validate()?;
    let by_image = io::group_by_image(io::read_proposals(&a.proposals)?);
    let distances = match (&a.distances, cfg.method) {
        (Some(path), Method::Pairwise) => io::read_distances(path)?,
        _ => BTreeMap::new(),
    };
    let images: Vec<(&u64, &Vec<_>)> = by_image.iter().collect();
    let kept: Vec<Vec<_>> = images
        .par_iter()
        .map(|&(id, props)| {
            let empty = DistanceMatrix::new(*id);
            let dm = (cfg.method == Method::Pairwise).then(|| distances.get(id).unwrap_or(&empty));
            let kept = suppress::suppress(props, &cfg, dm)?;
            Ok(suppress::kept_proposals(props, &kept))
        })
        .collect::<Result<_>>()?;
    io::write_proposals(&g.out_dir.join(&a.output), kept.iter().flatten())?;
    println!("kept {} of {} proposals", kept.iter().map(Vec::len).sum::<usize>(), by_image.values().map(Vec::len).sum::<usize>());
    Ok(())
}

pub fn cmd_eval(g: &GlobalArgs, a: &EvalArgs) -> Result<()> {
    let cfg = EvalConfig {
        thresholds: a.et.0.clone(),
        buckets: a.buckets.0.clone(),
        bucket_thr: a.bucket_et,
        interpolation: if a.all_point { Interpolation::AllPoint } else { Interpolation::Coco101 },
    };
    let mut gt = io::read_gt(&a.gt)?;
    let mut dets = io::group_by_image(io::read_proposals(&a.detections)?);
    let ids: BTreeSet<u64> = gt.keys().chain(dets.keys()).copied().collect();
    let images: Vec<EvalImage> = ids
        .into_iter()
        .map(|id| EvalImage {
            image_id: id,
            detections: dets.remove(&id).unwrap_or_default(),
            gt: gt.remove(&id).unwrap_or_default(),
        })
        .collect();
    let mut report = eval::map_over_thresholds(&images, &cfg)?;
    report.label = match &a.label {
        Some(l) => l.clone(),
        None => a.detections.file_stem().map_or_else(|| "detections".into(), |s| s.to_string_lossy().into_owned()),
    };
    write_eval_outputs(&g.out_dir, &report)?;
    for t in &report.thresholds {
        println!("AP@{:.2} = {}", t.eval_thr, fmt_opt(t.ap));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(csv_err(path))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format { path: path.into(), message: e.to_string() }
}

/// Writes a CSV table; `rows` are already formatted cells.
fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn strings<const N: usize>(cells: [&str; N]) -> Vec<String> {
    cells.iter().map(|s| s.to_string()).collect()
}

/// `eval.json`, `ap.csv`, `pr_curve.csv` and `f1_by_bucket.csv`.
fn write_eval_outputs(dir: &Path, report: &EvalReport) -> Result<()> {
    io::write_json(&dir.join("eval.json"), report)?;
    let ap_rows: Vec<Vec<String>> = report
        .thresholds
        .iter()
        .map(|t| {
            vec![
                t.eval_thr.to_string(),
                t.tp.to_string(),
                t.fp.to_string(),
                t.detections.to_string(),
                t.gt.to_string(),
                t.recall.to_string(),
                t.precision.to_string(),
                fmt_opt(t.ap),
            ]
        })
        .collect();
    write_csv(&dir.join("ap.csv"), &strings(["et", "tp", "fp", "dt", "gt", "rec", "prec", "ap"]), &ap_rows)?;
    let pr_rows: Vec<Vec<String>> = report
        .thresholds
        .iter()
        .flat_map(|t| {
            t.pr_curve
                .iter()
                .enumerate()
                .map(move |(k, (r, p))| vec![t.eval_thr.to_string(), (k + 1).to_string(), r.to_string(), p.to_string()])
        })
        .collect();
    write_csv(&dir.join("pr_curve.csv"), &strings(["et", "rank", "recall", "precision"]), &pr_rows)?;
    let bucket_rows: Vec<Vec<String>> = report
        .occlusion
        .buckets
        .iter()
        .map(|b| {
            vec![b.lo.to_string(), b.hi.to_string(), b.tp.to_string(), b.fp.to_string(), b.fn_.to_string(), fmt_opt(b.f1)]
        })
        .collect();
    write_csv(&dir.join("f1_by_bucket.csv"), &strings(["lo", "hi", "tp", "fp", "fn", "f1"]), &bucket_rows)
}

fn recall(b: &eval::BucketStats) -> Option<f64> {
    (b.tp + b.fn_ > 0).then(|| b.tp as f64 / (b.tp + b.fn_) as f64)
}

/// `ap_table.csv` (AP per threshold and method), `comparison.csv`
/// (counts at one threshold), `f1_by_bucket.csv` and
/// `gain_vs_occlusion.csv` (per-bucket gains over the baseline).
pub fn cmd_report(g: &GlobalArgs, a: &ReportArgs) -> Result<()> {
    let reports: Vec<EvalReport> = a.evals.iter().map(|p| io::read_json(p)).collect::<Result<_>>()?;
    let labels: Vec<String> = reports.iter().map(|r| r.label.clone()).collect();
    let base = match &a.baseline {
        Some(l) => labels
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::InvalidConfig(format!("baseline {l:?} is not among the reports")))?,
        None => 0,
    };

    let thresholds: BTreeSet<u64> =
        reports.iter().flat_map(|r| r.thresholds.iter().map(|t| (t.eval_thr * 1e6).round() as u64)).collect();
    let header: Vec<String> = std::iter::once("et".to_string()).chain(labels.iter().cloned()).collect();
    let mut rows: Vec<Vec<String>> = thresholds
        .iter()
        .map(|&t| {
            let et = t as f64 / 1e6;
            std::iter::once(et.to_string()).chain(reports.iter().map(|r| fmt_opt(r.ap_at(et)))).collect()
        })
        .collect();
    rows.push(std::iter::once("mean".to_string()).chain(reports.iter().map(|r| fmt_opt(r.mean_ap))).collect());
    write_csv(&g.out_dir.join("ap_table.csv"), &header, &rows)?;

    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| match r.at(a.at) {
            Some(t) => vec![
                r.label.clone(),
                t.tp.to_string(),
                t.fp.to_string(),
                t.detections.to_string(),
                t.gt.to_string(),
                t.recall.to_string(),
                t.precision.to_string(),
                fmt_opt(t.ap),
            ],
            None => vec![r.label.clone(), String::new(), String::new(), String::new(), String::new(), String::new(), String::new(), String::new()],
        })
        .collect();
    write_csv(&g.out_dir.join("comparison.csv"), &strings(["method", "tp", "fp", "dt", "gt", "rec", "prec", "ap"]), &rows)?;

    let buckets = &reports[base].occlusion.buckets;
    let find = |r: &EvalReport, lo: f64| r.occlusion.buckets.iter().find(|b| (b.lo - lo).abs() < 1e-9).cloned();
    let header: Vec<String> = ["lo", "hi"].iter().map(|s| s.to_string()).chain(labels.iter().cloned()).collect();
    let rows: Vec<Vec<String>> = buckets
        .iter()
        .map(|b| {
            [b.lo.to_string(), b.hi.to_string()]
                .into_iter()
                .chain(reports.iter().map(|r| fmt_opt(find(r, b.lo).and_then(|x| x.f1))))
                .collect()
        })
        .collect();
    write_csv(&g.out_dir.join("f1_by_bucket.csv"), &header, &rows)?;

    let mut rows = Vec::new();
    for (k, r) in reports.iter().enumerate().filter(|&(k, _)| k != base) {
        for b in buckets {
            let other = find(r, b.lo);
            let diff = |f: &dyn Fn(&eval::BucketStats) -> Option<f64>| match (other.as_ref().and_then(f), f(b)) {
                (Some(x), Some(y)) => (x - y).to_string(),
                _ => String::new(),
            };
            rows.push(vec![
                b.lo.to_string(),
                b.hi.to_string(),
                labels[k].clone(),
                diff(&|s| s.f1),
                diff(&recall),
            ]);
        }
    }
    write_csv(&g.out_dir.join("gain_vs_occlusion.csv"), &strings(["lo", "hi", "method", "f1_gain", "recall_gain"]), &rows)?;
    println!("merged {} reports into {}", reports.len(), g.out_dir.display());
    Ok(())
}
