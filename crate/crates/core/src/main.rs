use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unlearn_forge::doco::Method;
use unlearn_forge::error::Result;
use unlearn_forge::harness::{Context, RunConfig};

#[derive(Parser)]
#[command(
    name = "unlearn-forge",
    version,
    about = "Concept unlearning experiments on a toy conditional diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the concept table and ground-truth samples.
    GenData(Common),
    /// Train the base conditional denoiser.
    TrainBase(Common),
    /// Unlearn the target concept from the base model.
    Unlearn(Common),
    /// Score an unlearned model against the base model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score instead of the method's unlearned model.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Reference checkpoint instead of the base model.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Scatter plots and the method comparison table.
    Report(Common),
    /// Finite-difference and surgery checks.
    Gradcheck(Common),
    /// Every stage, for all four methods.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON; an empty file is the canonical run).
    #[arg(long)]
    config: PathBuf,
    /// Unlearning method; defaults to the config's.
    #[arg(long)]
    method: Option<String>,
    /// Overrides the unlearning seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn context(&self) -> Result<(Context, Method)> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.unlearn.seed = seed;
        }
        if let Some(out) = &self.out {
            config.output = out.clone();
        }
        let method = match &self.method {
            Some(m) => Method::parse(m)?,
            None => config.unlearn.method,
        };
        Ok((Context::new(config)?, method))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => c.context()?.0.gen_data(),
        Command::TrainBase(c) => c
            .context()?
            .0
            .train_base()
            .map(|s| println!("base model {}", s.id())),
        Command::Unlearn(c) => {
            let (ctx, method) = c.context()?;
            let s = ctx.unlearn(method)?;
            println!(
                "{method}: model {} ({} iterations)",
                s.model_id, s.iterations
            );
            Ok(())
        }
        Command::Eval {
            common,
            snapshot,
            baseline,
        } => {
            let (ctx, method) = common.context()?;
            let record = ctx.eval(method, snapshot.as_deref(), baseline.as_deref())?;
            print!("{}", record.to_csv());
            Ok(())
        }
        Command::Report(c) => {
            let rows = c.context()?.0.report()?;
            print!("{}", unlearn_forge::harness::comparison_markdown(&rows));
            Ok(())
        }
        Command::Gradcheck(c) => {
            let (ctx, _) = c.context()?;
            let results = ctx.gradcheck();
            if let Ok(text) = std::fs::read_to_string(ctx.layout.gradcheck_report()) {
                print!("{text}");
            }
            results.map(|_| ())
        }
        Command::Pipeline(c) => {
            let rows = c.context()?.0.pipeline()?;
            print!("{}", unlearn_forge::harness::comparison_markdown(&rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
