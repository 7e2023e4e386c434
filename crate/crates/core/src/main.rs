use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use voxfill::bench::{
    checkpoint_hash, parse_csv, render_csv, render_markdown, run_bench, train_flow_stage, train_vae_stage, RunConfig,
    TrainPlan, MAX_FAILURE_RATE,
};
use voxfill::genmodel::{Backbone, Condition, FlowTrainConfig};
use voxfill::geometry::io::{read_cloud, save_grid, write_cloud};
use voxfill::geometry::occupancy_to_points;
use voxfill::metrics::MetricReport;
use voxfill::partiality::{build_benchmark, BenchConfig};
use voxfill::sampler::{run_method, write_trace_jsonl, Frame, Method, SamplerConfig};

#[derive(Parser)]
#[command(name = "voxfill", version, about = "Zero-shot voxel shape completion toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the procedural benchmark (ground truths, partials, manifest).
    GenData(GenData),
    /// Train the voxel VAE on the procedural corpus.
    TrainVae(TrainVae),
    /// Train the latent flow on top of a VAE checkpoint.
    TrainFlow(TrainFlow),
    /// Draw a shape from the generative prior.
    Sample(SampleCmd),
    /// Complete one partial point cloud.
    Complete(CompleteCmd),
    /// Run a method over a benchmark manifest.
    Bench(BenchCmd),
    /// Score one completion against ground truth.
    Score(ScoreCmd),
    /// Render a results CSV.
    Report(ReportCmd),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gt_points: Option<usize>,
}

#[derive(Args)]
struct TrainVae {
    #[arg(long)]
    out: PathBuf,
    /// JSON training plan; flags below override it.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    shapes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainFlow {
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SampleCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    label: Option<usize>,
    #[arg(long, default_value_t = Condition::DEFAULT_GUIDANCE)]
    guidance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FrameArg {
    Fit,
    Canonical,
}

#[derive(Args)]
struct CompleteCmd {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "full")]
    method: Method,
    #[arg(long)]
    label: Option<usize>,
    #[arg(long, default_value_t = Condition::DEFAULT_GUIDANCE)]
    guidance: f64,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, value_enum, default_value = "fit")]
    frame: FrameArg,
    /// Write per-step diagnostics as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Deterministic-noise diagnostic mode.
    #[arg(long)]
    zero_noise: bool,
}

#[derive(Args)]
struct BenchCmd {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    use_labels: bool,
}

#[derive(Args)]
struct ScoreCmd {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    partial: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

#[derive(Args)]
struct ReportCmd {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, value_enum, default_value = "markdown")]
    format: Format,
}

type Failure = (&'static str, String);

fn fail<E: std::fmt::Display>(kind: &'static str) -> impl Fn(E) -> Failure {
    move |e| (kind, e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let bytes = fs::read(path).map_err(|e| ("io", format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| ("config", format!("{}: {e}", path.display())))
}

fn gen_data(a: GenData) -> Result<(), Failure> {
    let mut cfg = BenchConfig::default();
    cfg.objects = a.objects.unwrap_or(cfg.objects);
    cfg.samples_per_pattern = a.samples.unwrap_or(cfg.samples_per_pattern);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.gt_points = a.gt_points.unwrap_or(cfg.gt_points);
    let m = build_benchmark(&cfg, &a.out).map_err(fail("benchmark"))?;
    println!("{} objects, {} partials in {}", m.objects.len(), m.partials.len(), a.out.display());
    Ok(())
}

fn load_plan(path: Option<&Path>) -> Result<TrainPlan, Failure> {
    path.map_or_else(|| Ok(TrainPlan::default()), read_json)
}

fn train_vae_cmd(a: TrainVae) -> Result<(), Failure> {
    let mut plan = load_plan(a.plan.as_deref())?;
    plan.corpus.shapes = a.shapes.unwrap_or(plan.corpus.shapes);
    plan.vae.epochs = a.epochs.unwrap_or(plan.vae.epochs);
    if let Some(s) = a.seed {
        plan.vae.seed = s;
        plan.corpus.seed = s;
    }
    train_vae_stage(&plan, &a.out).map_err(fail("training"))?;
    println!("VAE checkpoint written to {}", a.out.display());
    Ok(())
}

fn train_flow_cmd(a: TrainFlow) -> Result<(), Failure> {
    let mut flow: FlowTrainConfig = load_plan(a.plan.as_deref())?.flow;
    flow.epochs = a.epochs.unwrap_or(flow.epochs);
    flow.seed = a.seed.unwrap_or(flow.seed);
    train_flow_stage(&a.vae, &flow, &a.out).map_err(fail("training"))?;
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn condition(label: Option<usize>, guidance: f64) -> Condition {
    match label {
        Some(l) => Condition::label(l).with_guidance(guidance),
        None => Condition::unconditional(),
    }
}

fn sample_cmd(a: SampleCmd) -> Result<(), Failure> {
    let (model, _) = Backbone::load(&a.ckpt).map_err(fail("checkpoint"))?;
    let grid = model
        .sample(a.steps, a.seed, &condition(a.label, a.guidance))
        .map_err(fail("sampling"))?;
    let pc = occupancy_to_points(&grid, 0.5).map_err(fail("sampling"))?;
    write_cloud(&a.out, &pc).map_err(fail("io"))?;
    println!("{} points written to {}", pc.len(), a.out.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn complete_cmd(a: CompleteCmd) -> Result<(), Failure> {
    let start = Instant::now();
    let partial = read_cloud(&a.input).map_err(fail("io"))?;
    let (model, _) = Backbone::load(&a.ckpt).map_err(fail("checkpoint"))?;
    let loaded = start.elapsed().as_secs_f64();
    let cfg = SamplerConfig {
        steps: a.steps,
        seed: a.seed,
        eta: a.eta,
        condition: condition(a.label, a.guidance),
        zero_noise: a.zero_noise,
        frame: match a.frame {
            FrameArg::Fit => Frame::Fit,
            FrameArg::Canonical => Frame::Canonical,
        },
        ..SamplerConfig::default()
    };
    let t = Instant::now();
    let done = run_method(a.method, &partial, &model, &cfg).map_err(fail("completion"))?;
    let sampling = t.elapsed().as_secs_f64();
    write_cloud(&a.out, &done.points).map_err(fail("io"))?;
    save_grid(&with_suffix(&a.out, ".grid.lsct"), &done.grid).map_err(fail("io"))?;
    if let Some(path) = &a.trace {
        let mut f = fs::File::create(path).map_err(fail("io"))?;
        write_trace_jsonl(&mut f, &done.trace).map_err(fail("io"))?;
    }
    let meta = json!({
        "input": a.input,
        "checkpoint": a.ckpt,
        "checkpoint_hash": checkpoint_hash(&a.ckpt).map_err(fail("checkpoint"))?,
        "method": a.method,
        "seed": a.seed,
        "config": cfg.for_method(a.method),
        "points": done.points.len(),
        "transform": done.transform,
        "timings": { "load_seconds": loaded, "sampling_seconds": sampling },
    });
    let meta_path = with_suffix(&a.out, ".meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta).expect("meta serializes")).map_err(fail("io"))?;
    println!("{} points written to {} in {sampling:.2}s", done.points.len(), a.out.display());
    Ok(())
}

fn bench_cmd(a: BenchCmd) -> Result<bool, Failure> {
    let mut cfg: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = a.manifest {
        cfg.manifest = p;
    }
    if let Some(p) = a.ckpt {
        cfg.checkpoint = p;
    }
    if let Some(p) = a.out {
        cfg.out = p;
    }
    if !a.method.is_empty() {
        cfg.methods = a.method;
    }
    if !a.seeds.is_empty() {
        cfg.seeds = a.seeds;
    }
    if let Some(s) = a.steps {
        cfg.sampler.steps = s;
    }
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    cfg.use_labels |= a.use_labels;
    let report = run_bench(&cfg).map_err(fail("bench"))?;
    print!("{}", render_markdown(&report).map_err(fail("bench"))?);
    println!(
        "{} rows ({} computed, {} failed) in {}",
        report.rows.len(),
        report.computed,
        report.failures(),
        cfg.out.join("results.csv").display()
    );
    Ok(report.failure_rate() <= MAX_FAILURE_RATE)
}

fn score_cmd(a: ScoreCmd) -> Result<(), Failure> {
    let load = |p: &Path| read_cloud(p).map_err(fail("io"));
    let r = MetricReport::single(&load(&a.input)?, &load(&a.gt)?, &load(&a.partial)?).map_err(fail("metrics"))?;
    println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
    Ok(())
}

fn report_cmd(a: ReportCmd) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.csv).map_err(|e| ("io", format!("{}: {e}", a.csv.display())))?;
    let report = parse_csv(&text).map_err(fail("report"))?;
    let out = match a.format {
        Format::Markdown => render_markdown(&report),
        Format::Csv => render_csv(&report),
    }
    .map_err(fail("report"))?;
    print!("{out}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => gen_data(a).map(|_| true),
        Cmd::TrainVae(a) => train_vae_cmd(a).map(|_| true),
        Cmd::TrainFlow(a) => train_flow_cmd(a).map(|_| true),
        Cmd::Sample(a) => sample_cmd(a).map(|_| true),
        Cmd::Complete(a) => complete_cmd(a).map(|_| true),
        Cmd::Bench(a) => bench_cmd(a),
        Cmd::Score(a) => score_cmd(a).map(|_| true),
        Cmd::Report(a) => report_cmd(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", json!({ "error": "failures", "message": "more than 10% of completions failed" }));
            ExitCode::from(3)
        }
        Err((kind, message)) => {
            eprintln!("{}", json!({ "error": kind, "message": message }));
            ExitCode::FAILURE
        }
    }
}
