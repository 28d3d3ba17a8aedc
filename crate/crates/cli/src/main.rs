use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use serialtrack_core::association::{LinkingStrategy, ShapeMode};
use serialtrack_core::cycle_qa::QaReport;
use serialtrack_core::io::{self, SeriesStack};
use serialtrack_core::pipeline::{
    cmd_eval, cmd_pipeline, cmd_qa, cmd_register, cmd_simulate, cmd_track, load_transforms, Config, PipelineError,
    QA_FILE,
};

#[derive(Parser)]
#[command(name = "serialtrack", version, about = "Track objects across serial-section image stacks")]
struct Cli {
    /// Worker threads for per-pair work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic stack with ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit pair transforms for every adjacent and interleave pair.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stack: PathBuf,
    },
    /// Cycle-consistency QA over fitted transforms.
    Qa {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stack: PathBuf,
        /// Directory holding `transforms/` (default: --out).
        #[arg(long)]
        transforms: Option<PathBuf>,
    },
    /// Link detections into tracks.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stack: PathBuf,
        /// Directory holding `transforms/` (default: --out).
        #[arg(long)]
        transforms: Option<PathBuf>,
        /// QA report to honour (default: <transforms>/qa.json when present).
        #[arg(long)]
        qa: Option<PathBuf>,
    },
    /// Score tracks against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        results: PathBuf,
    },
    /// Register, QA, track and evaluate. Simulates a stack when --stack is absent.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stack: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Linking {
    Greedy,
    Optimal,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for simulation and RANSAC.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shape_mode: Option<ShapeMode>,
    #[arg(long)]
    s_threshold: Option<f64>,
    #[arg(long)]
    q_threshold: Option<f64>,
    #[arg(long, value_enum)]
    linking: Option<Linking>,
    /// Treat every pair as good and skip QA-driven rerouting.
    #[arg(long)]
    assume_good: bool,
}

impl Common {
    fn config(&self) -> Result<Config, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        let p = &mut cfg.pipeline;
        if let Some(seed) = self.seed {
            cfg.simulate.seed = seed;
            p.ransac.seed = seed;
        }
        if let Some(m) = self.shape_mode {
            p.shape_mode = m;
        }
        if let Some(s) = self.s_threshold {
            p.s_threshold = s;
        }
        if let Some(q) = self.q_threshold {
            p.q_threshold = q;
        }
        if let Some(l) = self.linking {
            p.linking = match l {
                Linking::Greedy => LinkingStrategy::Greedy,
                Linking::Optimal => LinkingStrategy::Optimal,
            };
        }
        p.validate()?;
        cfg.simulate.validate()?;
        Ok(cfg)
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Simulate { common } => {
            let cfg = common.config()?;
            let n = cmd_simulate(&cfg.simulate, &common.out)?;
            println!("wrote {n} sections to {}", common.out.display());
        }
        Command::Register { common, stack } => {
            let cfg = common.config()?;
            let stack = SeriesStack::open(&stack)?;
            cmd_register(&stack, &cfg.pipeline, &common.out)?;
            println!("wrote transforms for {} sections", stack.section_count());
        }
        Command::Qa { common, stack, transforms } => {
            let cfg = common.config()?;
            let stack = SeriesStack::open(&stack)?;
            let dir = transforms.as_deref().unwrap_or(&common.out);
            let set = load_transforms(dir, stack.section_count(), &cfg.pipeline)?;
            let report = cmd_qa(&stack, &set, &cfg.pipeline, &common.out)?;
            print_qa(&report);
        }
        Command::Track { common, stack, transforms, qa } => {
            let cfg = common.config()?;
            let stack = SeriesStack::open(&stack)?;
            let dir = transforms.as_deref().unwrap_or(&common.out);
            let set = load_transforms(dir, stack.section_count(), &cfg.pipeline)?;
            let report = if common.assume_good { None } else { read_qa(qa.as_deref(), dir)? };
            let tracks = cmd_track(&stack, &set, report.as_ref(), &cfg.pipeline, &common.out)?;
            println!("{} tracks", tracks.len());
        }
        Command::Eval { common, gt, results } => {
            let cfg = common.config()?;
            let score = cmd_eval(&gt, &results, &cfg.pipeline, &common.out)?;
            print!("{}", score.to_table());
        }
        Command::Pipeline { common, stack } => {
            let cfg = common.config()?;
            let summary = cmd_pipeline(&cfg, stack.as_deref(), common.assume_good, &common.out)?;
            print_qa(&summary.qa);
            println!("{} tracks", summary.track_count);
            if let Some(score) = summary.score {
                print!("{}", score.to_table());
            }
        }
    }
    Ok(())
}

fn read_qa(explicit: Option<&Path>, dir: &Path) -> Result<Option<QaReport>, PipelineError> {
    if let Some(p) = explicit {
        return Ok(Some(io::read_json(p)?));
    }
    let default = dir.join(QA_FILE);
    if default.exists() {
        info!("using QA report {}", default.display());
        Ok(Some(io::read_json(&default)?))
    } else {
        Ok(None)
    }
}

fn print_qa(report: &QaReport) {
    let failed: Vec<usize> = report.pairs.iter().filter(|p| p.fc).map(|p| p.t).collect();
    println!("series class: {:?}", report.series_class);
    println!("failed pairs: {failed:?}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot configure {jobs} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut shown = e.to_string();
            eprintln!("error: {shown}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let text = s.to_string();
                if !shown.contains(&text) {
                    eprintln!("  caused by: {text}");
                    shown = text;
                }
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
