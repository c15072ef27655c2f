//! `gdan` command-line front end.
//!
//! Exit codes: 0 success, 1 failed check or internal error, 2 configuration
//! or usage error, 3 data, checkpoint or I/O error, 4 training diverged.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gdan::eval::Component;
use gdan::run;
use gdan::training::Variant;
use gdan::{Error, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "gdan", version, about = "Generative dual adversarial network for generalized zero-shot learning")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.lr_gen=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Root seed of the run (for gen-data: the benchmark seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one variant and evaluate its selected checkpoint.
    Train {
        #[arg(long)]
        variant: Option<Variant>,
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        component: Option<Component>,
        #[arg(long)]
        n_per_class: Option<usize>,
    },
    /// Train every variant and write the component-analysis table.
    Ablate,
    /// Unseen accuracy as a function of synthetic samples per class.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,50,100,200,400")]
        counts: Vec<usize>,
    },
    /// Write real and synthetic unseen-class features to CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
    },
    /// Write the synthetic benchmark to disk.
    GenData,
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Diverged { .. } => 4,
        Error::Shape { .. }
        | Error::Validation(_)
        | Error::Corrupt { .. }
        | Error::Version { .. }
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Csv(_) => 3,
        Error::State(_) | Error::Numeric(_) | Error::Precondition(_) => 1,
    }
}

fn load_config(global: &GlobalArgs, command: &Command) -> gdan::Result<RunConfig> {
    let mut overrides = global.overrides.clone();
    if let Some(dir) = &global.output_dir {
        // Quoted so the path survives TOML value parsing verbatim.
        overrides.push(format!("output_dir={}", toml_string(&dir.to_string_lossy())));
    }
    if let (Some(seed), false) = (global.seed, matches!(command, Command::GenData)) {
        overrides.push(format!("seed={seed}"));
    }
    match command {
        Command::Train {
            variant: Some(v), ..
        } => overrides.push(format!("train.variant={}", toml_string(v.name()))),
        Command::Eval {
            n_per_class: Some(n), ..
        } => overrides.push(format!("eval.n_per_class={n}")),
        _ => {}
    }
    RunConfig::load(global.config.as_deref(), std::env::vars(), &overrides)
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

/// Writes a line to stdout. A closed pipe (`gdan ... | head`) is not an error.
fn emit(line: &str) -> gdan::Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> gdan::Result<()> {
    emit(&serde_json::to_string_pretty(value)?)
}

fn execute(cli: &Cli) -> gdan::Result<u8> {
    let cfg = load_config(&cli.global, &cli.command)?;
    match &cli.command {
        Command::Train { resume, .. } => print_json(&run::run_train(&cfg, *resume)?)?,
        Command::Eval {
            checkpoint, component, ..
        } => print_json(&run::run_eval(&cfg, checkpoint, *component)?)?,
        Command::Ablate => print_json(&run::run_ablation(&cfg)?)?,
        Command::Sweep { checkpoint, counts } => {
            for row in run::run_sweep(&cfg, checkpoint, counts)? {
                emit(&format!(
                    "{:>6}  U {:.4}  S {:.4}  H {:.4}",
                    row.count, row.metrics.acc_unseen, row.metrics.acc_seen, row.metrics.harmonic
                ))?;
            }
        }
        Command::Export {
            checkpoint,
            n_per_class,
        } => emit(&run::run_export(&cfg, checkpoint, *n_per_class)?.display().to_string())?,
        Command::GenData => emit(&run::run_gen_data(&cfg, cli.global.seed)?.display().to_string())?,
        Command::Gradcheck { seeds } => {
            let summary = run::run_gradcheck(&cfg, *seeds)?;
            print_json(&summary)?;
            if !summary.passed {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
