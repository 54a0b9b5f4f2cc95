use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use sfeuot::gradcheck::GradcheckConfig;
use sfeuot_cli::{cmd_eval, cmd_gradcheck, cmd_oracle, cmd_train, CliError, Common, EvalOptions, OracleRequest};

#[derive(Parser)]
#[command(
    name = "sfeuot",
    version,
    about = "Simulation-free entropic unbalanced optimal transport"
)]
struct Cli {
    /// Overrides the seed of the config (or of the generated instance).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 is the single-threaded reference mode.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator and value network from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Do not echo interval records to stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint against targets and oracles.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        /// Target atoms of the Sinkhorn oracle; 0 skips the comparison.
        #[arg(long, default_value_t = 2000)]
        oracle_atoms: usize,
        #[arg(long, default_value_t = 50)]
        permutations: usize,
        #[arg(long, default_value_t = 0.95)]
        null_quantile: f64,
    },
    /// Solve a reference transport problem.
    Oracle {
        #[command(subcommand)]
        which: OracleCommand,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        dim: usize,
        /// Hidden widths, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "16,16")]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Difference every parameter instead of a random subset.
        #[arg(long)]
        all_coords: bool,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Bias the SiLU derivatives on the analytic side (negative control).
        #[arg(long)]
        corrupt_derivative: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Instance {
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// KL weight on the target marginal; balanced when absent.
    #[arg(long)]
    alpha_div: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Log-domain Sinkhorn on a seeded point-cloud instance.
    Sinkhorn(Instance),
    /// Direct search on a seeded tiny instance, compared with Sinkhorn.
    Brute(Instance),
    /// Closed-form coupling of two isotropic Gaussians.
    Gaussian {
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        var0: f64,
        #[arg(long, default_value_t = 1.0)]
        var1: f64,
        /// Target mean, repeated in every coordinate.
        #[arg(long, default_value_t = 0.0)]
        shift: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma2: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli, common: Common) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
            quiet,
        } => cmd_train(&config, &out, resume.as_deref(), !quiet, &common).map(|_| ()),
        Command::Eval {
            checkpoint,
            config,
            out,
            samples,
            oracle_atoms,
            permutations,
            null_quantile,
        } => {
            let opts = EvalOptions {
                samples,
                oracle_atoms,
                permutations,
                null_quantile,
            };
            let records = cmd_eval(&checkpoint, &config, &out, &opts, &common)?;
            for r in records {
                println!("{} = {}", r.name, r.value);
            }
            Ok(())
        }
        Command::Oracle { which } => {
            let seed = cli.seed.unwrap_or(0);
            let (request, out) = match which {
                OracleCommand::Sinkhorn(i) => (
                    OracleRequest::Sinkhorn {
                        n: i.n,
                        m: i.m,
                        seed,
                        epsilon: i.epsilon,
                        alpha_div: i.alpha_div,
                    },
                    i.out,
                ),
                OracleCommand::Brute(i) => (
                    OracleRequest::Brute {
                        n: i.n,
                        m: i.m,
                        seed,
                        epsilon: i.epsilon,
                        alpha_div: i.alpha_div,
                    },
                    i.out,
                ),
                OracleCommand::Gaussian {
                    dim,
                    var0,
                    var1,
                    shift,
                    sigma2,
                    out,
                } => (
                    OracleRequest::Gaussian {
                        dim,
                        var0,
                        var1,
                        shift,
                        sigma2,
                    },
                    out,
                ),
            };
            cmd_oracle(&request, &out, &common).map(|_| ())
        }
        Command::Gradcheck {
            dim,
            hidden,
            points,
            batch,
            all_coords,
            tolerance,
            corrupt_derivative,
            out,
        } => {
            let defaults = GradcheckConfig::default();
            let cfg = GradcheckConfig {
                seed: cli.seed.unwrap_or(defaults.seed),
                dim,
                hidden,
                points,
                batch,
                coords_per_point: if all_coords { None } else { defaults.coords_per_point },
                tolerance,
                corrupt: corrupt_derivative,
                ..defaults
            };
            cmd_gradcheck(&cfg, out.as_deref(), &common).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let common = Common {
        seed: cli.seed,
        threads: cli.threads,
        args: std::env::args().collect(),
    };
    match run(cli, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
