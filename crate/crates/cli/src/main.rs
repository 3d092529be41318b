use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtvssl::eval::{self, render_overlay, ProbeResult};
use mtvssl::model::checkpoint::read_container;
use mtvssl::model::{Model, Variant};
use mtvssl::teacher::build_teacher;
use mtvssl::trainer::{pretrain, run_ablation_suite, RunControl, TrainData};
use mtvssl::video_data::{middle_frame, write_frame_directory};
use mtvssl::{Config, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mtvssl", version, about = "Multi-task self-supervised video pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `trainer.variant=no_kd`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train/test corpus as PNG frame folders.
    GenerateData(Common),
    /// Pre-train one variant.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from the newest training state in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Linear probe of a checkpoint, or of a randomly initialised encoder when none is given.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and probe every variant over several seeds.
    Ablate(Common),
    /// Render class-activation overlays for test videos.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Summarise a checkpoint or training-state file.
    InspectCheckpoint { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateData(common) => generate_data(&common),
        Command::Pretrain { common, resume, stop_after } => run_pretrain(&common, RunControl { resume, stop_after }),
        Command::Probe { common, checkpoint } => run_probe(&common, checkpoint.as_deref()),
        Command::Ablate(common) => run_ablate(&common),
        Command::Visualize { common, checkpoint } => run_visualize(&common, &checkpoint),
        Command::InspectCheckpoint { path } => inspect(&path),
    }
}

/// Resolve the configuration and record it, with the seed, in the output directory.
fn prepare(common: &Common) -> Result<Config> {
    let config = Config::resolve_with_env(common.config.as_deref(), &common.overrides)?;
    create_dir(&common.out)?;
    write(&common.out.join("resolved_config.json"), &config.to_pretty_json())?;
    write(&common.out.join("seed.txt"), &format!("{}\n", config.trainer.seed))?;
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn generate_data(common: &Common) -> Result<()> {
    let config = prepare(common)?;
    let corpus = config.data.load_corpus()?;
    let train = write_frame_directory(common.out.join("train"), &corpus.train)?;
    let test = write_frame_directory(common.out.join("test"), &corpus.test)?;
    println!("train: {} videos, manifest {}", corpus.train.len(), train.display());
    println!("test: {} videos, manifest {}", corpus.test.len(), test.display());
    Ok(())
}

fn run_pretrain(common: &Common, control: RunControl) -> Result<()> {
    let config = prepare(common)?;
    let corpus = config.data.load_corpus()?;
    let teacher = if config.trainer.variant.has_kd() {
        Some(build_teacher(&config.teacher)?)
    } else {
        None
    };
    let data = TrainData {
        videos: &corpus.train,
        teacher: teacher.as_deref(),
    };
    let outcome = pretrain(&config, &data, &common.out, control)?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "step {} l_kd {:.4} l_m {:.4} l_a {:.4} total {:.4}",
            last.step, last.l_kd, last.l_m, last.l_a, last.total
        );
    }
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

fn print_probe(result: &ProbeResult) {
    println!(
        "{} seed {}: acc@1 {:.3} acc@5 {:.3}",
        result.variant, result.seed, result.acc_at_1, result.acc_at_5
    );
}

fn run_probe(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let config = prepare(common)?;
    let corpus = config.data.load_corpus()?;
    let model = match checkpoint {
        Some(path) => Model::load(path)?.0,
        None => {
            eprintln!("no checkpoint given; probing a randomly initialised encoder");
            Model::build(&config.model, config.trainer.variant, config.trainer.seed)?
        }
    };
    let result = eval::evaluate_model(&model, &corpus.train, &corpus.test, &config.probe, config.trainer.seed)?;
    print_probe(&result);
    write(&common.out.join("probe.json"), &serde_json::to_string_pretty(&result)?)
}

fn run_ablate(common: &Common) -> Result<()> {
    let config = prepare(common)?;
    let corpus = config.data.load_corpus()?;
    let suite = run_ablation_suite(&config, &corpus, &common.out)?;
    print!("{}", suite.report.to_table());
    for (variant, path) in &suite.checkpoints {
        println!("{variant}: {}", path.display());
    }
    println!("report {}", suite.csv.display());
    Ok(())
}

fn run_visualize(common: &Common, checkpoint: &Path) -> Result<()> {
    let config = prepare(common)?;
    let corpus = config.data.load_corpus()?;
    let (model, _) = Model::load(checkpoint)?;
    let probe = eval::fit_cam_probe(&model, &corpus.train, &config.probe)?;
    let dir = common.out.join("cam");
    create_dir(&dir)?;
    let mut rendered = 0;
    let mut focused = 0;
    let mut evaluated = 0;
    let classes = probe.num_classes();
    for class in 0..classes {
        let videos = corpus.test.iter().filter(|v| v.action_label == class);
        for (k, video) in videos.enumerate() {
            if video.parsing_gt.is_some() {
                evaluated += 1;
                if eval::cam_focus(&model, &probe, video, &config.probe, &config.viz)?.focused() {
                    focused += 1;
                }
            }
            if k < config.viz.videos_per_class {
                let (cam, clip) = eval::video_cam(&model, &probe, video, &config.probe, &config.viz)?;
                let frame = middle_frame(&clip)?;
                render_overlay(frame.pixels.view(), &cam, config.viz.alpha, &dir)?;
                rendered += 1;
            }
        }
    }
    println!("{rendered} overlays in {}", dir.display());
    if evaluated > 0 {
        println!("actor heat above background on {focused}/{evaluated} test videos");
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let container = read_container(path)?;
    let meta = &container.meta;
    let field = |key: &str| meta.get(key).map_or("-".to_string(), |v| v.to_string().trim_matches('"').to_string());
    println!("file: {}", path.display());
    println!("variant: {}", field("variant"));
    println!("step: {}", field("step"));
    println!("seed: {}", field("seed"));
    println!("config_hash: {}", field("config_hash"));
    let mut total = 0;
    for (name, array) in &container.arrays {
        total += array.len();
        println!("  {name} {:?}", array.shape());
    }
    println!("arrays: {}", container.arrays.len());
    println!("parameters: {total}");
    if let Ok(variant) = field("variant").parse::<Variant>() {
        let has_decoder = container.arrays.iter().any(|(n, _)| n.contains("g_h."));
        if has_decoder != variant.has_kd() {
            eprintln!("warning: decoder presence does not match variant {variant}");
        }
    }
    Ok(())
}
