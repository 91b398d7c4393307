use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynslam::pipeline::{self, DetectionSource, Mode, RunManifest, RunSummary, SystemClock};
use dynslam::synth::NoiseSpec;
use dynslam::{Error, ErrorKind};

#[derive(Parser)]
#[command(
    name = "dynslam",
    version,
    about = "RGB-D odometry and static mapping with dynamic-object masking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a sequence and write trajectory, logs, map and evaluation.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Run all stages on one thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Render a synthetic sequence from a scene spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Gaussian depth noise, millimeters.
        #[arg(long, default_value_t = 0.0)]
        depth_noise_mm: f64,
        /// Probability of dropping each detection.
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// Absolute trajectory error of an estimate against ground truth.
    Eval {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
        /// Association window, seconds.
        #[arg(long, default_value_t = 0.02)]
        max_dt: f64,
        /// Directory for the report, per-pair CSV and plot.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Time every stage of a sequential run.
    Bench {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    sequence: PathBuf,
    /// Detection directory, or `synthetic:<scene spec>`; defaults to `<sequence>/detections`.
    #[arg(long, value_parser = parse_source)]
    detections: Option<DetectionSource>,
    #[arg(long, default_value = "masked", value_parser = parse_mode)]
    mode: Mode,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_source(s: &str) -> Result<DetectionSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl RunArgs {
    fn manifest(self) -> RunManifest {
        RunManifest {
            sequence: self.sequence,
            detections: self.detections,
            mode: self.mode,
            config: self.config,
            overrides: self.overrides,
            seed: self.seed,
            output: self.output,
        }
    }
}

fn print_summary(s: &RunSummary) {
    println!("frames {}", s.frames);
    println!("map_points {}", s.map_points);
    println!("fps {:.2}", s.timing.fps);
    if let Some(e) = &s.eval {
        println!("ate_rmse {:.6}", e.ate_rmse);
    }
    if let Some(c) = &s.contamination {
        println!("contamination {:.6}", c.fraction);
    }
}

fn execute(cmd: Command) -> dynslam::Result<()> {
    match cmd {
        Command::Run { run, sequential } => {
            let exec = if sequential {
                pipeline::Execution::Sequential
            } else {
                pipeline::Execution::Pipelined
            };
            let s = pipeline::run_with(&run.manifest(), exec, &SystemClock::default())?;
            print_summary(&s);
        }
        Command::Synth {
            spec,
            output,
            depth_noise_mm,
            dropout,
            noise_seed,
        } => {
            let noise = NoiseSpec {
                depth_sigma_mm: depth_noise_mm,
                detection_dropout: dropout,
                seed: noise_seed,
            };
            let gt = pipeline::cmd_synth(&spec, &output, &noise)?;
            println!("frames {}", gt.trajectory.len());
        }
        Command::Eval {
            estimate,
            groundtruth,
            max_dt,
            output,
        } => {
            let r = pipeline::cmd_eval(&estimate, &groundtruth, max_dt, output.as_deref())?;
            print!("{}", r.to_text());
        }
        Command::Bench { run } => {
            let t = pipeline::bench(&run.manifest(), &SystemClock::default())?;
            print!("{}", t.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Runtime => 4,
            })
        }
    }
}
