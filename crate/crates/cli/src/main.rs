mod args;
mod bench;
mod blocksize;
mod compile;
mod demo;
mod prune;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use grim_core::GrimError;

#[derive(Parser, Debug)]
#[command(name = "grim", version, about = "Prune, compile, run and benchmark block-sparse models")]
struct Cli {
    /// Worker threads for sparse kernels (GRIM_THREADS overrides).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Prune an FC model with ADMM under block row/column constraints.
    Prune(prune::PruneArgs),
    /// Encode pruned weights as BCRC and optionally tune kernel settings.
    Compile(compile::CompileArgs),
    /// Run a model on inputs read from files or generated randomly.
    Run(run::RunArgs),
    /// Time every sparse layer against a dense baseline and write a CSV.
    Bench(bench::BenchArgs),
    /// Search for a block size on a synthesized copy of one layer.
    Blocksize(blocksize::BlocksizeArgs),
    /// Parse and validate a DSL file.
    Check {
        file: PathBuf,
        /// Print the graph back as DSL.
        #[arg(long)]
        print: bool,
    },
    /// Write a demo model (GRU, MLP or CNN).
    Demo(demo::DemoArgs),
}

fn threads(flag: Option<usize>) -> anyhow::Result<usize> {
    let n = match std::env::var("GRIM_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| GrimError::Config(format!("GRIM_THREADS must be a positive integer, got `{v}`")))?,
        Err(_) => flag.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
    };
    if n == 0 {
        return Err(GrimError::Config("thread count must be positive".into()).into());
    }
    Ok(n)
}

fn check(file: &PathBuf, print: bool) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(file).map_err(GrimError::from)?;
    let g = grim_core::ir::parse_dsl(&text)?;
    g.validate()?;
    if print {
        print!("{}", grim_core::ir::graph_to_dsl(&g));
    } else {
        println!(
            "ok: {} inputs, {} tensors, {} nodes, outputs {}",
            g.inputs.len(),
            g.tensors.len(),
            g.nodes.len(),
            g.outputs().join(", ")
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let threads = threads(cli.threads)?;
    match cli.command {
        Command::Prune(a) => prune::run(a),
        Command::Compile(a) => compile::run(a, threads),
        Command::Run(a) => run::run(a, threads),
        Command::Bench(a) => bench::run(a, threads),
        Command::Blocksize(a) => blocksize::run(a),
        Command::Check { file, print } => check(&file, print),
        Command::Demo(a) => demo::run(a),
    }
}

/// 2 for bad input (flags, files, shapes), 1 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<GrimError>() {
        Some(e) if e.is_validation() => 2,
        Some(_) => 1,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
