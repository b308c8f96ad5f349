mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cntrack::affinity::{AffinityScorer, CosineScorer, OracleScorer};
use cntrack::graph::format_graph;
use cntrack::ingest::{
    parse_mot, parse_mot_rows, synthesize_scenario, write_detections, write_embeddings, write_mot,
    DetectionSet, ScenarioSpec,
};
use cntrack::metrics::{boxes_from_rows, evaluate, graph_stats, GraphStats};
use cntrack::mpn::{load_params, save_params, train, MpnParams};
use cntrack::pipeline::{build_clip_graph, track, training_samples};
use cntrack::solver::{EdgeScorer, HandCraftedScorer, LabelOracle};
use cntrack::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "cntrack", version, about = "Composite-node graph multi-object tracker")]
struct Cli {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Caps worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario: writes gt.txt, det.txt and det.emb.
    Synth(SynthArgs),
    /// Track a detection file.
    Track(TrackArgs),
    /// Train network parameters on labeled detections.
    Train(TrainArgs),
    /// Score a result file against ground truth.
    Eval(EvalArgs),
    /// Dump the tracking graph of one clip.
    GraphStats(GraphArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    objects: usize,
    #[arg(long, default_value_t = 200)]
    frames: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Embedding noise sigma.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    miss_rate: f64,
    /// Random occlusion gaps per object.
    #[arg(long, default_value_t = 0)]
    occlusions: usize,
    #[arg(long, default_value_t = 10)]
    max_occlusion: u32,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Input {
    /// MOTChallenge detection file.
    #[arg(long)]
    det: PathBuf,
    /// Embedding sidecar aligned with the detection rows.
    #[arg(long)]
    emb: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    input: Input,
    /// Result file.
    #[arg(long)]
    out: PathBuf,
    /// Trained parameters; hand-crafted scoring without them.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    require_params: bool,
    /// Score with ground-truth identities carried by the detections.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Detections with ground-truth identities.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    emb: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Kv,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Both)]
    format: Format,
}

#[derive(Args)]
struct GraphArgs {
    #[command(flatten)]
    input: Input,
    /// Clip index.
    #[arg(long, default_value_t = 0)]
    clip: usize,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    oracle: bool,
    /// Dump file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        set_threads(n)?;
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Track(a) => cmd_track(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Eval(a) => cmd_eval(a),
        Command::GraphStats(a) => cmd_graph(&cfg, a),
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

#[cfg(feature = "parallel")]
fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Validation("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Validation(e.to_string()))
}

#[cfg(not(feature = "parallel"))]
fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Validation("--threads must be at least 1".into()));
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, a: SynthArgs) -> Result<()> {
    let mut spec = ScenarioSpec {
        n_objects: a.objects,
        n_frames: a.frames,
        embedding_noise_sigma: a.noise,
        miss_rate: a.miss_rate,
        dim: cfg.network.embed_dim,
        seed: a.seed,
        ..Default::default()
    };
    if a.occlusions > 0 {
        spec = spec.with_random_occlusions(a.occlusions, a.max_occlusion, a.seed.wrapping_add(1));
    }
    let sc = synthesize_scenario(&spec)?;
    fs::create_dir_all(&a.out)?;
    write_detections(&sc.truth, &a.out.join("gt.txt"), true)?;
    write_detections(&sc.detections, &a.out.join("det.txt"), true)?;
    write_embeddings(&sc.detections, &a.out.join("det.emb"))?;
    println!("gt_rows={}", sc.truth.len());
    println!("det_rows={}", sc.detections.len());
    Ok(())
}

fn load_input(cfg: &RunConfig, input: &Input) -> Result<DetectionSet> {
    parse_mot(&input.det, input.emb.as_deref(), cfg.network.embed_dim)
}

fn edge_scorer(
    params: Option<&Path>,
    require: bool,
    oracle: bool,
) -> Result<Box<dyn EdgeScorer>> {
    if oracle {
        return Ok(Box::new(LabelOracle));
    }
    match params {
        Some(p) => Ok(Box::new(load_params(p)?)),
        None if require => Err(Error::Validation(
            "--require-params given but no --params file".into(),
        )),
        None => Ok(Box::new(HandCraftedScorer::default())),
    }
}

fn affinity(oracle: bool) -> Box<dyn AffinityScorer> {
    if oracle {
        Box::new(OracleScorer)
    } else {
        Box::new(CosineScorer)
    }
}

fn stats_text(s: &GraphStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "det_nodes={}", s.det_nodes);
    let _ = writeln!(out, "traj_nodes={}", s.traj_nodes);
    let _ = writeln!(out, "det_det_edges={}", s.det_det);
    let _ = writeln!(out, "det_traj_edges={}", s.det_traj);
    let _ = writeln!(out, "traj_traj_edges={}", s.traj_traj);
    let _ = writeln!(out, "edges={}", s.edge_count());
    out
}

fn cmd_track(cfg: &RunConfig, a: TrackArgs) -> Result<()> {
    let t0 = Instant::now();
    let dets = load_input(cfg, &a.input)?;
    if a.oracle && !dets.has_gt() {
        return Err(Error::MissingGroundTruth);
    }
    let scorer = edge_scorer(a.params.as_deref(), a.require_params, a.oracle)?;
    let out = track(&dets, &cfg.pipeline, affinity(a.oracle).as_ref(), scorer.as_ref())?;
    write_mot(&out.run.tracklets, &a.out)?;
    println!("clips={}", out.clips);
    println!("tracks={}", out.run.tracklets.len());
    print!("{}", stats_text(&out.stats));
    eprintln!("elapsed_ms={}", t0.elapsed().as_millis());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, a: TrainArgs) -> Result<()> {
    let t0 = Instant::now();
    let dets = parse_mot(&a.gt, a.emb.as_deref(), cfg.network.embed_dim)?;
    if !dets.has_gt() {
        return Err(Error::MissingGroundTruth);
    }
    let samples = training_samples(&dets, &cfg.pipeline, &CosineScorer, &cfg.samples)?;
    let init = MpnParams::init(cfg.network, cfg.seed)?;
    let (params, report) = train(&samples, init, &cfg.schedule)?;
    save_params(&params, &a.out)?;
    println!("samples={}", samples.len());
    println!("iterations={}", report.losses.len());
    // Ten evenly spaced points of the loss curve.
    let n = report.losses.len();
    let m = n.min(10);
    for k in 0..m {
        let i = if m == 1 { 0 } else { k * (n - 1) / (m - 1) };
        println!("loss[{i}]={:.6}", report.losses[i]);
    }
    if let Some(l) = report.final_loss() {
        println!("final_loss={l:.6}");
    }
    eprintln!("elapsed_ms={}", t0.elapsed().as_millis());
    Ok(())
}

fn read_boxes(path: &Path) -> Result<Vec<cntrack::metrics::TrackBox>> {
    boxes_from_rows(&parse_mot_rows(&fs::read_to_string(path)?)?)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let pred = read_boxes(&a.pred)?;
    let gt = read_boxes(&a.gt)?;
    let span = |b: &[cntrack::metrics::TrackBox]| {
        (b.iter().map(|x| x.frame).min(), b.iter().map(|x| x.frame).max())
    };
    if !pred.is_empty() && !gt.is_empty() && span(&pred) != span(&gt) {
        eprintln!("warning: prediction and ground truth cover different frame ranges");
    }
    let report = evaluate(&pred, &gt);
    match a.format {
        Format::Table => print!("{report}"),
        Format::Kv => print!("{}", report.to_key_values()),
        Format::Both => print!("{report}\n{}", report.to_key_values()),
    }
    Ok(())
}

/// Writes to standard output; a closed pipe ends the output quietly.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn cmd_graph(cfg: &RunConfig, a: GraphArgs) -> Result<()> {
    let dets = load_input(cfg, &a.input)?;
    if a.oracle && !dets.has_gt() {
        return Err(Error::MissingGroundTruth);
    }
    let starts = cfg.pipeline.clips.starts(dets.n_frames());
    let start = *starts.get(a.clip).ok_or_else(|| {
        Error::Validation(format!("clip {} out of range ({} clips)", a.clip, starts.len()))
    })?;
    let (clip, _) = dets.subset(start..start.saturating_add(cfg.pipeline.clips.clip_len));
    let (mut g, _) = build_clip_graph(&clip, &cfg.pipeline, affinity(a.oracle).as_ref())?;
    let scorer = edge_scorer(a.params.as_deref(), false, a.oracle)?;
    let scores = scorer.score_edges(&g, &clip)?;
    for (e, s) in g.edges_mut().iter_mut().zip(scores) {
        e.score = Some(s);
    }
    let dump = format_graph(&g);
    match &a.out {
        Some(p) => fs::write(p, dump)?,
        None => emit(&dump)?,
    }
    let stats = stats_text(&graph_stats(&g));
    if a.out.is_some() {
        print!("{stats}");
    } else {
        eprint!("{stats}");
    }
    Ok(())
}
