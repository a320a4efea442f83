use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpg_cli::{CliError, CliResult, RunConfig};
use mpg_core::checkpoint::Precision;

#[derive(Parser)]
#[command(name = "mpg", about = "Molecular graph pre-training and fine-tuning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Flags override the config file.
#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Input checkpoint.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory (pretrain, finetune) or file (embed).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fine-tune from a freshly initialized encoder.
    #[arg(long, global = true)]
    no_pretrain: bool,
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse SMILES strings (stdin lines when none are given) and print one
    /// JSON record per molecule.
    Parse {
        smiles: Vec<String>,
        #[arg(long)]
        no_valence: bool,
    },
    /// Joint pre-training on a corpus of SMILES.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Metrics log (JSON lines); defaults to OUT/metrics.jsonl.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune on a labeled dataset and report test metrics.
    Finetune {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write one graph embedding per corpus molecule.
    Embed {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// collection or mean
        #[arg(long)]
        readout: Option<String>,
    },
    /// Print per-atom collection attention weights.
    Attend { smiles: String },
    /// Finite-difference checks of every operation and the full model.
    Gradcheck {
        /// Coordinates probed per model tensor; 0 probes all of them.
        #[arg(long, default_value_t = 64)]
        max_coords: usize,
    },
    /// Evaluate a fine-tuned checkpoint on a dataset.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(p) = &common.precision {
        config.precision = Precision::from_bits(p.parse().unwrap_or(0)).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if common.checkpoint.is_some() {
        config.paths.checkpoint = common.checkpoint.clone();
    }
    if common.out.is_some() {
        config.paths.out = common.out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> CliResult {
    let mut config = resolve(&cli.common)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut err = std::io::stderr();
    let set = |slot: &mut Option<PathBuf>, v: Option<PathBuf>| {
        if v.is_some() {
            *slot = v;
        }
    };
    match cli.command {
        Command::Parse { mut smiles, no_valence } => {
            if smiles.is_empty() {
                for line in std::io::stdin().lines() {
                    let line = line?;
                    if !line.trim().is_empty() {
                        smiles.push(line.trim().to_string());
                    }
                }
            }
            mpg_cli::cmd_parse(&smiles, !no_valence, &mut out)?;
        }
        Command::Pretrain { corpus, steps, log } => {
            set(&mut config.paths.corpus, corpus);
            set(&mut config.paths.log, log);
            if let Some(s) = steps {
                config.pretrain.steps = s;
            }
            mpg_cli::cmd_pretrain(&config, &mut out, &mut err)?;
        }
        Command::Finetune { dataset, epochs, log } => {
            set(&mut config.paths.dataset, dataset);
            set(&mut config.paths.log, log);
            if let Some(e) = epochs {
                config.finetune.max_epochs = e;
            }
            mpg_cli::cmd_finetune(&config, cli.common.no_pretrain, &mut out, &mut err)?;
        }
        Command::Embed { corpus, readout } => {
            set(&mut config.paths.corpus, corpus);
            if let Some(r) = readout {
                config.finetune.readout = mpg_cli::parse_readout(&r)?;
            }
            let n = mpg_cli::cmd_embed(&config, &mut out)?;
            writeln!(err, "{n} embeddings")?;
        }
        Command::Attend { smiles } => {
            mpg_cli::cmd_attend(&config, &smiles, &mut out)?;
        }
        Command::Gradcheck { max_coords } => {
            mpg_cli::cmd_gradcheck(&config, (max_coords > 0).then_some(max_coords), &mut out)?;
        }
        Command::Eval { dataset } => {
            set(&mut config.paths.dataset, dataset);
            mpg_cli::cmd_eval(&config, &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mpg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
