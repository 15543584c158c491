//! The `nightdehaze` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{
    evaluate_dirs, load_training_set, recover_from_dumps, run_dir, run_file, train_deglow,
    train_dehaze, DumpPaths, ModelPaths, Models, PipelineConfig, RunArtifacts,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, GRADCHECK_TOLERANCE};
use crate::networks::TrainReport;
use crate::pnm;
use crate::synthesis::build_dataset;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "nightdehaze",
    version,
    about = "Nighttime haze and glow removal"
)]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Replaces every seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a dataset of hazy/glowing records with ground truth layers.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the glow remover; writes deglow.nckp and deglow.loss.log.
    TrainDeglow(TrainArgs),
    /// Train the transmission estimator; writes dehaze.nckp and dehaze.loss.log.
    TrainDehaze(TrainArgs),
    /// Dehaze one .ppm image or every .ppm image of a directory.
    Run(RunArgs),
    /// Recompute outputs from intermediates written by `run --dump-intermediates`.
    Recover {
        /// Directory holding the dumps.
        #[arg(long, value_name = "DIR")]
        dumps: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Stems to recover; every stem with a light file when omitted.
        stems: Vec<String>,
    },
    /// Score predictions against ground truth (PSNR, SSIM).
    Eval {
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        #[arg(long, value_name = "DIR")]
        truth: PathBuf,
        /// Also write the table to this file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Also write the report to this file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by `synth`; synthesized in memory when omitted.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Checkpoint and log directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overrides the schedule's iteration count.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// A .ppm image or a directory of them.
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Directory with deglow.nckp and dehaze.nckp; the configured paths when omitted.
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    tau: Option<usize>,
    /// Also write <stem>.deglow.ppm, <stem>.trans.pgm and <stem>.light.txt.
    #[arg(long)]
    dump_intermediates: bool,
    #[arg(long, value_name = "PIXELS")]
    tile_size: Option<usize>,
}

/// One line: `error stage=<stage> kind=<kind> file=<path> message=<text>`.
pub fn error_line(command: &str, e: &Error) -> String {
    let file = e
        .file()
        .map_or_else(|| "-".to_string(), |p| p.display().to_string());
    let message = e.root_message().replace('\n', " ");
    format!(
        "error stage={} kind={} file={file} message={message}",
        e.stage().unwrap_or(command),
        e.kind()
    )
}

/// Parses `args` (including the program name), runs the command, and returns
/// the process exit status.
pub fn cli_dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    cli_dispatch_to(args, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn cli_dispatch_to<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let name = command_name(&cli.command);
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(name, &e));
            EXIT_RUNTIME
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::TrainDeglow(_) => "train-deglow",
        Command::TrainDehaze(_) => "train-dehaze",
        Command::Run(_) => "run",
        Command::Recover { .. } => "recover",
        Command::Eval { .. } => "eval",
        Command::Gradcheck { .. } => "gradcheck",
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(t) = cli.threads {
        cfg.inference.threads = t;
        cfg.train_deglow.threads = t;
        cfg.train_dehaze.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn train_summary(out: &mut dyn Write, kind: &str, report: &TrainReport, dir: &Path) -> Result<()> {
    let (first, last) = report.initial_and_final(10);
    writeln!(
        out,
        "{kind} iterations={} smoothed_loss_initial={first:.6} smoothed_loss_final={last:.6} lr_final={} checkpoint={}",
        report.log.len(),
        report.final_learning_rate,
        dir.join(format!("{kind}.nckp")).display()
    )
    .map_err(io_out)
}

fn print_run(out: &mut dyn Write, input: &Path, a: &RunArtifacts) -> Result<()> {
    let times: Vec<String> = a
        .timings
        .iter()
        .map(|t| format!("{}={:.3}s", t.stage, t.seconds))
        .collect();
    writeln!(out, "{} {}", input.display(), times.join(" ")).map_err(io_out)
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&cli)?;
    execute_with(cli.command, &cfg, out)
}

fn execute_with(command: Command, cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth { out: dir } => {
            let pairs = cfg
                .dataset
                .source()
                .load(&cfg.synthesis)
                .map_err(|e| e.in_stage("pairs"))?;
            let manifest =
                build_dataset(&pairs, &cfg.synthesis, &dir).map_err(|e| e.in_stage("synth"))?;
            writeln!(
                out,
                "records={} manifest={}",
                manifest.len(),
                dir.join("manifest.txt").display()
            )
            .map_err(io_out)
        }
        Command::TrainDeglow(args) | Command::TrainDehaze(args) if args.iterations == Some(0) => {
            Err(Error::Config("iterations must be >= 1".into()))
        }
        Command::TrainDeglow(args) => {
            let mut cfg = cfg.clone();
            if let Some(n) = args.iterations {
                cfg.train_deglow.max_iterations = n;
            }
            let set =
                load_training_set(&cfg, args.data.as_deref()).map_err(|e| e.in_stage("data"))?;
            let (_, report) =
                train_deglow(&cfg, &set, Some(&args.out)).map_err(|e| e.in_stage("train"))?;
            train_summary(out, "deglow", &report, &args.out)
        }
        Command::TrainDehaze(args) => {
            let mut cfg = cfg.clone();
            if let Some(n) = args.iterations {
                cfg.train_dehaze.max_iterations = n;
            }
            let set =
                load_training_set(&cfg, args.data.as_deref()).map_err(|e| e.in_stage("data"))?;
            let (_, report) =
                train_dehaze(&cfg, &set, Some(&args.out)).map_err(|e| e.in_stage("train"))?;
            train_summary(out, "dehaze", &report, &args.out)
        }
        Command::Run(args) => {
            let paths = args
                .checkpoint
                .as_deref()
                .map_or_else(|| cfg.models.clone(), ModelPaths::in_dir);
            let models = Models::load(&paths).map_err(|e| e.in_stage("load"))?;
            let mut inf = cfg.inference.clone();
            inf.tau = args.tau.or(inf.tau);
            inf.tile_size = args.tile_size.or(inf.tile_size);
            inf.validate()?;
            if args.input.is_dir() {
                for (p, a) in run_dir(
                    &args.input,
                    &args.out,
                    &models,
                    &inf,
                    args.dump_intermediates,
                )? {
                    print_run(out, &p, &a)?;
                }
            } else {
                let a = run_file(
                    &args.input,
                    &args.out,
                    &models,
                    &inf,
                    args.dump_intermediates,
                )?;
                print_run(out, &args.input, &a)?;
            }
            Ok(())
        }
        Command::Recover {
            dumps,
            out: dir,
            stems,
        } => {
            let stems = if stems.is_empty() {
                light_stems(&dumps)?
            } else {
                stems
            };
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for stem in stems {
                let r = recover_from_dumps(&dumps, &stem, cfg.inference.t_min)
                    .map_err(|e| e.in_stage("recover"))?;
                let path = DumpPaths::new(&dir, &stem).output;
                pnm::write_ppm(&path, &r).map_err(|e| e.in_stage("write"))?;
                writeln!(out, "{}", path.display()).map_err(io_out)?;
            }
            Ok(())
        }
        Command::Eval {
            pred,
            truth,
            out: file,
        } => {
            let table = evaluate_dirs(&pred, &truth)?.to_table();
            if let Some(f) = file {
                write_text(&f, &table)?;
            }
            write!(out, "{table}").map_err(io_out)
        }
        Command::Gradcheck { out: file } => {
            let report = run_suite(cfg.seed.unwrap_or(0))?;
            let text = report.to_text();
            if let Some(f) = file {
                write_text(&f, &text)?;
            }
            write!(out, "{text}").map_err(io_out)?;
            if report.passed(GRADCHECK_TOLERANCE) {
                Ok(())
            } else {
                Err(Error::Data(format!(
                    "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
                    report.max_error()
                )))
            }
        }
    }
}

fn light_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(".light.txt"))
                .map(String::from)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Data(format!(
            "no .light.txt dumps in {}",
            dir.display()
        )));
    }
    Ok(stems)
}
