use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use resalign::experiment::commands::{self, label_of};
use resalign::experiment::{report_csv, RunConfig, RunDir};
use resalign::resalign::Method;
use resalign::{Error, Result};

/// Resilient unlearning experiments on a toy conditional diffusion model.
///
/// Reports and the manifest go to the directory named by RESALIGN_RUN_DIR
/// (default: the working directory). Existing reports are never replaced.
#[derive(Parser)]
#[command(name = "resalign", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Resalign,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base denoiser on every concept.
    TrainBase {
        #[arg(long)]
        out: PathBuf,
    },
    /// Unlearn the harmful concepts of a checkpoint.
    Unlearn {
        #[arg(long, value_enum, default_value = "resalign")]
        method: MethodArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a checkpoint on the attack set.
    Attack {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Share of the attack set replaced by harmful samples.
        #[arg(long, default_value_t = 0.0)]
        contamination: f64,
    },
    /// Harmful fraction and curvature of each checkpoint.
    Eval {
        #[arg(long = "in")]
        inputs: Vec<PathBuf>,
    },
    /// Eval plus resilience curves, contamination sweeps and verdicts.
    Report {
        #[arg(long = "in")]
        inputs: Vec<PathBuf>,
        /// Comma-separated proximity coefficients; unlearns the first input
        /// once per value and attacks each result.
        #[arg(long, value_delimiter = ',')]
        gamma_sweep: Vec<f64>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(seed) => config.with_seed(seed),
        None => config,
    })
}

fn write_checkpoint(run: &RunDir, command: &str, config: &RunConfig, path: &Path, params: resalign::autodiff::ParamVector) -> Result<()> {
    let ckpt = commands::to_checkpoint(config, params)?;
    let bytes = ckpt.encode();
    resalign::experiment::write_atomic(path, &bytes)?;
    run.record(command, path, &bytes)
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let run = RunDir::from_env()?;
    match &cli.command {
        Command::TrainBase { out } => {
            let id = label_of(out);
            let outcome = commands::train_base(&config, &id)?;
            write_checkpoint(&run, "train-base", &config, out, outcome.params)?;
            let csv = run.publish("train-base", &format!("train-base-{id}"), "csv", &report_csv(&outcome.rows)?)?;
            println!("final denoising loss {:.6}", outcome.final_loss);
            println!("wrote {} and {}", out.display(), csv.display());
        }
        Command::Unlearn { method, input, out } => {
            let method = match method {
                MethodArg::Resalign => Method::Resalign,
                MethodArg::Baseline => Method::Baseline,
            };
            let theta0 = commands::load_params(&config, input)?;
            let testbed = commands::testbed_for(&config, input)?;
            let id = label_of(out);
            let outcome = commands::unlearn(&config, &testbed, &theta0, method, &id)?;
            for (step, params) in outcome.snapshots {
                let path = out.with_file_name(format!("{id}.step{step}.ckpt"));
                write_checkpoint(&run, "unlearn", &config, &path, params)?;
            }
            write_checkpoint(&run, "unlearn", &config, out, outcome.params)?;
            let csv = run.publish("unlearn", &format!("unlearn-{id}"), "csv", &report_csv(&outcome.rows)?)?;
            if let Some(last) = outcome.record.steps.last() {
                println!(
                    "step {} harmful loss {:.6} preserve loss {:.6}",
                    last.step, last.harmful_loss, last.preserve_loss
                );
            }
            println!("wrote {} and {}", out.display(), csv.display());
        }
        Command::Attack {
            input,
            out,
            contamination,
        } => {
            if !(0.0..=1.0).contains(contamination) {
                return Err(Error::Usage(format!("--contamination {contamination} outside [0, 1]")));
            }
            let theta = commands::load_params(&config, input)?;
            let testbed = commands::testbed_for(&config, input)?;
            let attacked = commands::attack(&config, &testbed, &theta, *contamination)?;
            write_checkpoint(&run, "attack", &config, out, attacked)?;
            println!("wrote {}", out.display());
        }
        Command::Eval { inputs } | Command::Report { inputs, .. } => {
            let (name, full, gammas) = match &cli.command {
                Command::Report { gamma_sweep, .. } => ("report", true, gamma_sweep.as_slice()),
                _ => ("eval", false, &[][..]),
            };
            let first = inputs
                .first()
                .ok_or_else(|| Error::Usage(format!("{name} needs at least one checkpoint (--in)")))?;
            if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
                return Err(Error::Usage(format!("--gamma-sweep value {g} must be positive")));
            }
            let testbed = commands::testbed_for(&config, first)?;
            let evaluation = commands::evaluate(&config, &testbed, inputs, full, gammas)?;
            let stem = format!("{name}-{}", label_of(first));
            let csv = run.publish(name, &stem, "csv", &report_csv(&evaluation.rows)?)?;
            let json = run.publish(name, &stem, "json", &commands::summary_json(&evaluation.summary)?)?;
            for c in &evaluation.summary.checkpoints {
                println!(
                    "{}: harmful fraction {:.4} (se {:.4}), harmful trace {:.4}",
                    c.label, c.harmful_fraction, c.harmful_fraction_se, c.harmful_trace
                );
            }
            for v in &evaluation.summary.verdicts {
                println!(
                    "{} {} vs {}: {}",
                    v.claim,
                    v.subject,
                    v.reference,
                    if v.holds { "holds" } else { "fails" }
                );
            }
            println!("wrote {} and {}", csv.display(), json.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
