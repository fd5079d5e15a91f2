use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskconnect::cli::{self, ExperimentConfig, Overrides};
use maskconnect::Result;

#[derive(Parser)]
#[command(name = "maskconnect", version, about = "Learn connectivity between network modules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    subset_size: Option<usize>,
    /// Run only the first N phases
    #[arg(long)]
    phases: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            subset_size: self.subset_size,
            phases: self.phases,
        });
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a configuration and write checkpoint, metrics and connectivity
    Train(RunArgs),
    /// Print test top-1 of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config naming the dataset
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        subset_size: Option<usize>,
    },
    /// Remove unreachable blocks from a frozen checkpoint
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pruned checkpoint path
        #[arg(long)]
        out: PathBuf,
    },
    /// Write connectivity.json and connectivity.dot
    ExportConn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every finite-difference suite
    Gradcheck,
    /// Train once per fan-in and write sweep_k.csv
    SweepK {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated fan-in values
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
    },
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Train(args) => {
            let cfg = args.config()?;
            let outcome = cli::cmd_train(&cfg)?;
            println!(
                "top1 {:.4} loss {:.6} params {} effective {}",
                outcome.test.top1,
                outcome.test.loss,
                outcome.graph.param_count(),
                outcome.graph.effective_param_count()
            );
        }
        Command::Eval {
            checkpoint,
            config,
            subset_size,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply(&Overrides {
                subset_size,
                ..Overrides::default()
            });
            let r = cli::cmd_eval(&checkpoint, &cfg)?;
            println!("top1 {:.4} loss {:.6}", r.top1, r.loss);
        }
        Command::Prune { checkpoint, out } => {
            let report = cli::cmd_prune(&checkpoint, &out)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::ExportConn { checkpoint, out } => cli::cmd_export_conn(&checkpoint, &out)?,
        Command::Gradcheck => {
            let reports = cli::cmd_gradcheck()?;
            let mut ok = true;
            for r in &reports {
                println!(
                    "{:<28} {} max_rel_err {:.3e} probes {} skipped {}",
                    r.name,
                    if r.passed() { "pass" } else { "FAIL" },
                    r.max_error(),
                    r.probes.len(),
                    r.skipped
                );
                ok &= r.passed();
            }
            return Ok(ok);
        }
        Command::SweepK { run, k } => {
            let cfg = run.config()?;
            let rows = cli::cmd_sweep_k(&cfg, &k)?;
            print!("{}", cli::sweep_csv(&rows));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Cli::parse();
    match run(args.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
