use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use linglo_core::attention::AttentionKind;
use linglo_core::verify::Scope;

mod commands;

#[derive(Parser)]
#[command(name = "linglo", version, about = "Key-only attention backbone: counts, checks, merging, benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ModelArgs {
    /// Config file, or one of the built-in presets b0, b1, b2, micro.
    #[arg(long, default_value = "b0")]
    pub config: String,
    /// Override the per-stage block layout, e.g. C-C-H-H.
    #[arg(long)]
    pub layout: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Total and per-module parameter counts in train and merged form.
    Params {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Compare reverse-mode gradients against central differences.
    Gradcheck {
        #[arg(long, default_value = "op")]
        scope: Scope,
        /// Only run cases whose name contains this string.
        #[arg(long)]
        op: Option<String>,
        /// Perturb the analytic gradient of this tensor (negative control).
        #[arg(long, value_name = "TENSOR")]
        inject_fault: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, env = "LINGLO_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Compare both attention kinds against the scalar oracles.
    OracleCheck {
        #[arg(long, default_value_t = 64)]
        instances: usize,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        #[arg(long, env = "LINGLO_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Write randomly initialized weights.
    Init {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "LINGLO_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Fold the positional-encoding branches into single kernels.
    Merge {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Side of the square verification images (default: smallest valid size).
        #[arg(long)]
        input: Option<usize>,
        /// Number of random verification images.
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, env = "LINGLO_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Sweep sequence lengths and fit scaling exponents.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "key_only,dot_product")]
        kinds: Vec<AttentionKind>,
        #[arg(long = "N", value_delimiter = ',', default_value = "64,256,1024,4096")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        in_dim: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 2)]
        warmups: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Stop the sweep when a point would exceed this many MiB of live tensors.
        #[arg(long, value_name = "MIB")]
        memory_budget: Option<usize>,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        #[arg(long, env = "LINGLO_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Run a forward pass and print every feature map shape.
    Shapes {
        #[command(flatten)]
        model: ModelArgs,
        /// Side of the square input image.
        #[arg(long, default_value_t = 224)]
        input: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, env = "LINGLO_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Fit the model to a handful of synthetic pattern images.
    TrainToy {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Number of images to overfit.
        #[arg(long, default_value_t = 16)]
        overfit: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 25)]
        warmup: usize,
        #[arg(long)]
        batch: Option<usize>,
        /// Exit with status 1 unless the final loss is below this.
        #[arg(long, default_value_t = 0.1)]
        target_loss: f64,
        #[arg(long, default_value_t = 50)]
        log_every: usize,
        /// Save the trained weights here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "LINGLO_SEED", default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Params { model } => commands::params(&model),
        Command::Gradcheck {
            scope,
            op,
            inject_fault,
            tolerance,
            seed,
        } => commands::gradcheck(scope, op.as_deref(), inject_fault.as_deref(), tolerance, seed),
        Command::OracleCheck {
            instances,
            tolerance,
            seed,
        } => commands::oracle_check(instances, tolerance, seed),
        Command::Init { model, out, seed } => commands::init(&model, &out, seed),
        Command::Merge {
            weights,
            out,
            input,
            samples,
            tolerance,
            seed,
        } => commands::merge(&weights, &out, input, samples, tolerance, seed),
        Command::Bench {
            kinds,
            n,
            in_dim,
            dim,
            heads,
            batch,
            warmups,
            repeats,
            memory_budget,
            out,
            seed,
        } => commands::bench(commands::BenchArgs {
            kinds,
            n,
            dims: linglo_core::bench::BenchDims {
                in_dim,
                dim,
                heads,
                batch,
            },
            options: linglo_core::bench::SweepOptions {
                warmups,
                repeats,
                memory_budget: memory_budget.map(|mib| mib << 20),
                seed,
            },
            out,
        }),
        Command::Shapes {
            model,
            input,
            batch,
            seed,
        } => commands::shapes(&model, input, batch, seed),
        Command::TrainToy {
            model,
            steps,
            overfit,
            image_size,
            lr,
            warmup,
            batch,
            target_loss,
            log_every,
            out,
            seed,
        } => commands::train_toy(commands::TrainArgs {
            model,
            steps,
            overfit,
            image_size,
            lr,
            warmup,
            batch,
            target_loss,
            log_every,
            out,
            seed,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_status(&err))
        }
    }
}
