//! Command line front end. Every command reads the same TOML run config
//! (unknown keys rejected), accepts `--set key=value` overrides and echoes
//! the effective config next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ablation::{run_sweep, to_csv};
use crate::config::{RunConfig, Sweep};
use crate::dataset::{AnnotationFile, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, pr_curves_csv};
use crate::gradsuite::run_seed;
use crate::model::{predict, Parameters};
use crate::pipeline::{
    detect_clip, group_by_clip, link_clip, read_detections, read_tubes, write_detections, write_tubes,
};
use crate::synth::generate_splits;
use crate::train::{build_examples, frames_of, train};
use crate::visualize::{frame_overlays, render, ImageFormat};

#[derive(Debug, Parser)]
#[command(name = "point3d", version, about = "Anchor-free spatio-temporal action detection on synthetic clips")]
pub struct Cli {
    /// TOML run config; every table is optional and unknown keys are rejected.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.steps=500`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Maximum worker threads for per-clip parallel stages (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Only warnings and errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and eval splits of the synthetic dataset.
    Synth(SynthArgs),
    /// Train the detector and write a checkpoint plus a JSONL loss trace.
    Train(TrainArgs),
    /// Run a checkpoint over a split and write per-frame detections (JSONL).
    Decode(DecodeArgs),
    /// Link per-frame detections into action tubes (JSON).
    Link(LinkArgs),
    /// Score detections and tubes against annotations.
    Eval(EvalArgs),
    /// Run the gradient verification suite; exits 4 if any check fails.
    Gradcheck(GradcheckArgs),
    /// Retrain under a config sweep and tabulate frame-mAP per arm (CSV).
    Ablate(AblateArgs),
    /// Draw predicted (and ground-truth) boxes and knots over clip frames.
    Visualize(VisualizeArgs),
    /// Dump the time-wise attention matrix of one clip window as CSV.
    InspectAttention(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn dir(self, data: &Path) -> PathBuf {
        data.join(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output root; `train/` and `eval/` are created inside [default: paths.data].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root holding `train/` [default: paths.data].
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Run directory [default: paths.run].
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Dataset root [default: paths.data].
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Split to decode.
    #[arg(long, value_enum, default_value = "eval")]
    pub split: Split,
    /// Checkpoint directory [default: <run>/checkpoint].
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Run directory [default: paths.run].
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
    /// Output file [default: <run>/detections.jsonl].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LinkArgs {
    /// Run directory [default: paths.run].
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
    /// Detections JSONL [default: <run>/detections.jsonl].
    #[arg(long, value_name = "FILE")]
    pub detections: Option<PathBuf>,
    /// Output file [default: <run>/tubes.json].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory [default: paths.run].
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
    /// Detections JSONL [default: <run>/detections.jsonl].
    #[arg(long, value_name = "FILE")]
    pub detections: Option<PathBuf>,
    /// Tubes JSON [default: <run>/tubes.json].
    #[arg(long, value_name = "FILE")]
    pub tubes: Option<PathBuf>,
    /// Annotation JSON [default: <paths.data>/eval/annotations.json].
    #[arg(long, value_name = "FILE")]
    pub annotations: Option<PathBuf>,
    /// Directory for eval_report.json and pr_curves.csv [default: <run>].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of seeds to run.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Also write the per-case results to this JSON file.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Sweep to run [default: ablate.sweep].
    #[arg(long, value_enum)]
    pub sweep: Option<SweepArg>,
    /// Dataset root [default: paths.data]; generated from the synth config when absent.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output CSV [default: <run>/ablation.csv].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Run directory [default: paths.run].
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepArg {
    Temporal,
    Components,
    Head3dInputs,
    LossWeights,
}

impl From<SweepArg> for Sweep {
    fn from(s: SweepArg) -> Self {
        match s {
            SweepArg::Temporal => Sweep::Temporal,
            SweepArg::Components => Sweep::Components,
            SweepArg::Head3dInputs => Sweep::Head3dInputs,
            SweepArg::LossWeights => Sweep::LossWeights,
        }
    }
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    /// Clip id to draw.
    #[arg(long)]
    pub clip: String,
    /// Dataset root [default: paths.data].
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Split holding the clip.
    #[arg(long, value_enum, default_value = "eval")]
    pub split: Split,
    /// Detections JSONL; without it only ground truth is drawn.
    #[arg(long, value_name = "FILE")]
    pub detections: Option<PathBuf>,
    /// Draw ground truth as well as detections (always drawn on frames without detections).
    #[arg(long)]
    pub gt: bool,
    #[arg(long, value_enum, default_value = "svg")]
    pub format: FormatArg,
    /// Integer upscaling factor.
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    /// Output directory [default: <run>/frames].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Ppm,
    Svg,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Clip id.
    #[arg(long)]
    pub clip: String,
    /// Dataset root [default: paths.data].
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "eval")]
    pub split: Split,
    /// First frame of the window.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Checkpoint directory [default: <run>/checkpoint].
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Run directory [default: paths.run].
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
    /// Output CSV [default: <run>/attention_<clip>.csv].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Parse arguments and run; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (_, 0) => "info",
        (_, 1) => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let threads = match cli.threads {
        Some(0) => return Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Decode(a) => cmd_decode(&cfg, a, threads),
        Command::Link(a) => cmd_link(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(&cfg, a, threads),
        Command::Visualize(a) => cmd_visualize(&cfg, a),
        Command::InspectAttention(a) => cmd_inspect(&cfg, a),
    }
}

fn run_dir(cfg: &RunConfig, arg: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = arg.clone().unwrap_or_else(|| cfg.paths.run.clone());
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn load_split(cfg: &RunConfig, data: &Option<PathBuf>, split: Split) -> Result<Dataset> {
    let root = data.clone().unwrap_or_else(|| cfg.paths.data.clone());
    Dataset::load(split.dir(&root))
}

fn load_checkpoint(run: &Path, arg: &Option<PathBuf>) -> Result<(Parameters, crate::model::ModelConfig)> {
    let dir = arg.clone().unwrap_or_else(|| run.join("checkpoint"));
    let (params, manifest) = Parameters::load(&dir)?;
    Ok((params, manifest.config))
}

fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    let root = a.out.clone().unwrap_or_else(|| cfg.paths.data.clone());
    let (train_set, eval_set) = generate_splits(&cfg.synth)?;
    train_set.save(root.join("train"))?;
    eval_set.save(root.join("eval"))?;
    echo_config(cfg, &root)?;
    log::info!(
        "wrote {} train and {} eval clips to {}",
        train_set.len(),
        eval_set.len(),
        root.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let run = run_dir(cfg, &a.run)?;
    echo_config(cfg, &run)?;
    let ds = load_split(cfg, &a.data, Split::Train)?;
    let examples = build_examples(&ds, &cfg.model)?;
    let mut trace = std::io::BufWriter::new(fs::File::create(run.join("loss.jsonl"))?);
    let mut write_err = None;
    let outcome = train(&cfg.model, &cfg.train, &examples, |b| {
        if write_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut trace, b)
                .map_err(Error::from)
                .and_then(|_| trace.write_all(b"\n").map_err(Error::from))
            {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    trace.flush()?;
    let manifest = outcome.params.manifest(&cfg.model, outcome.steps);
    outcome.params.save(run.join("checkpoint"), &manifest)?;
    log::info!(
        "trained {} steps in {:.1} s; checkpoint in {}",
        outcome.steps,
        outcome.seconds,
        run.join("checkpoint").display()
    );
    Ok(())
}

fn cmd_decode(cfg: &RunConfig, a: &DecodeArgs, threads: usize) -> Result<()> {
    let run = run_dir(cfg, &a.run)?;
    echo_config(cfg, &run)?;
    let (params, model) = load_checkpoint(&run, &a.checkpoint)?;
    let ds = load_split(cfg, &a.data, a.split)?;
    let jobs: Vec<usize> = (0..ds.len()).collect();
    let per_clip = parallel_map(&jobs, threads, |&i| {
        detect_clip(&model, &params, &ds.clips[i], &ds.annotations.clips[i].id, &cfg.decode)
    })?;
    let dets: Vec<_> = per_clip.into_iter().flatten().flatten().collect();
    let out = a.out.clone().unwrap_or_else(|| run.join("detections.jsonl"));
    write_detections(&out, &dets)?;
    log::info!("{} detections over {} clips → {}", dets.len(), ds.len(), out.display());
    Ok(())
}

/// Order-preserving map over at most `threads` scoped workers.
fn parallel_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn cmd_link(cfg: &RunConfig, a: &LinkArgs) -> Result<()> {
    let run = run_dir(cfg, &a.run)?;
    echo_config(cfg, &run)?;
    let dets = read_detections(a.detections.clone().unwrap_or_else(|| run.join("detections.jsonl")))?;
    let mut tubes = Vec::new();
    for (_, frames) in group_by_clip(&dets) {
        tubes.extend(link_clip(&frames, &cfg.link)?);
    }
    let out = a.out.clone().unwrap_or_else(|| run.join("tubes.json"));
    write_tubes(&out, &tubes)?;
    log::info!("{} tubes → {}", tubes.len(), out.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let run = run_dir(cfg, &a.run)?;
    let dets = read_detections(a.detections.clone().unwrap_or_else(|| run.join("detections.jsonl")))?;
    let tubes = read_tubes(a.tubes.clone().unwrap_or_else(|| run.join("tubes.json")))?;
    let ann_path = a
        .annotations
        .clone()
        .unwrap_or_else(|| cfg.paths.data.join("eval").join("annotations.json"));
    let ann = AnnotationFile::load(&ann_path)?;
    let gts = ann.ground_truths();
    let report = evaluate(&dets, &gts, &tubes, &ann.gt_tubes(), cfg.eval.iou_threshold);
    let out = a.out.clone().unwrap_or(run);
    fs::create_dir_all(&out)?;
    echo_config(cfg, &out)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out.join("eval_report.json"), &json)?;
    fs::write(out.join("pr_curves.csv"), pr_curves_csv(&dets, &gts, cfg.eval.iou_threshold))?;
    println!("{json}");
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut cases = Vec::new();
    for seed in a.first_seed..a.first_seed + a.seeds {
        cases.extend(run_seed(seed)?);
    }
    let mut failed = 0;
    for c in &cases {
        if !c.passed() {
            failed += 1;
            println!(
                "FAIL {} seed {}: rel error {:.3e} ≥ {:.0e}",
                c.name, c.seed, c.max_rel_error, c.tolerance
            );
        }
    }
    let mut names: Vec<&str> = cases.iter().map(|c| c.name).collect();
    names.dedup();
    for n in names {
        let worst = cases
            .iter()
            .filter(|c| c.name == n)
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max);
        println!("{n:<22} worst rel error {worst:.3e}");
    }
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_string_pretty(&cases)?)?;
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} of {} gradient checks failed", cases.len())));
    }
    println!("all {} gradient checks passed", cases.len());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, a: &AblateArgs, threads: usize) -> Result<()> {
    let run = run_dir(cfg, &a.run)?;
    echo_config(cfg, &run)?;
    let root = a.data.clone().unwrap_or_else(|| cfg.paths.data.clone());
    let (train_set, eval_set) = if root.join("train").exists() {
        (Dataset::load(root.join("train"))?, Dataset::load(root.join("eval"))?)
    } else {
        log::info!("no dataset at {}; generating from the synth config", root.display());
        generate_splits(&cfg.synth)?
    };
    let sweep = a.sweep.map_or(cfg.ablate.sweep, Sweep::from);
    let results = run_sweep(cfg, sweep, &train_set, &eval_set, threads, |r| {
        log::info!("{} seed {}: frame-mAP {:.4}", r.arm, r.seed, r.frame_map);
    })?;
    let csv = to_csv(&results);
    let out = a.out.clone().unwrap_or_else(|| run.join("ablation.csv"));
    fs::write(&out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn find_clip<'a>(ds: &'a Dataset, id: &str) -> Result<(usize, &'a crate::numerics::Tensor)> {
    ds.annotations
        .clips
        .iter()
        .position(|c| c.id == id)
        .map(|i| (i, &ds.clips[i]))
        .ok_or_else(|| Error::Data(format!("clip {id} not found")))
}

fn cmd_visualize(cfg: &RunConfig, a: &VisualizeArgs) -> Result<()> {
    let ds = load_split(cfg, &a.data, a.split)?;
    let (idx, clip) = find_clip(&ds, &a.clip)?;
    let ann = &ds.annotations.clips[idx];
    let dets = match &a.detections {
        Some(p) => read_detections(p)?,
        None => Vec::new(),
    };
    let format = match a.format {
        FormatArg::Ppm => ImageFormat::Ppm,
        FormatArg::Svg => ImageFormat::Svg,
    };
    let out = match &a.out {
        Some(d) => d.clone(),
        None => cfg.paths.run.join("frames"),
    };
    fs::create_dir_all(&out)?;
    for t in 0..clip.shape()[0] {
        let frame_dets: Vec<_> = dets.iter().filter(|d| d.clip == a.clip && d.frame == t).collect();
        let overlays = frame_overlays(&frame_dets, ann.active_actors(t), a.gt);
        let bytes = render(&clip.index0(t)?, &overlays, a.scale, format)?;
        fs::write(out.join(format!("{}_f{t:03}.{}", a.clip, format.extension())), bytes)?;
    }
    log::info!("wrote {} frames to {}", clip.shape()[0], out.display());
    Ok(())
}

fn cmd_inspect(cfg: &RunConfig, a: &InspectArgs) -> Result<()> {
    let run = run_dir(cfg, &a.run)?;
    let (params, model) = load_checkpoint(&run, &a.checkpoint)?;
    let ds = load_split(cfg, &a.data, a.split)?;
    let (_, clip) = find_clip(&ds, &a.clip)?;
    let len = clip.shape()[0];
    if a.start + model.frames > len {
        return Err(Error::Data(format!(
            "window {}..{} exceeds the clip's {len} frames",
            a.start,
            a.start + model.frames
        )));
    }
    let pred = predict(&model, &params, &frames_of(clip, a.start, model.frames)?)?;
    let m = pred
        .attention
        .ok_or_else(|| Error::Config("time-wise attention is disabled in this checkpoint".into()))?;
    let t = m.shape()[0];
    let mut csv = String::new();
    for i in 0..t {
        let row: Vec<String> = m.data()[i * t..(i + 1) * t].iter().map(|v| format!("{v:.9}")).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| run.join(format!("attention_{}.csv", a.clip)));
    fs::write(&out, &csv)?;
    print!("{csv}");
    Ok(())
}
