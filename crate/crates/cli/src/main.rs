use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use prodg::explainer::Connectivity;

mod commands;
mod config;
mod exit;
mod imageio;
mod workdir;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "prodg", version, about = "Discover, train and explain concept prototypes for a frozen classifier")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Run seed; overrides PRODG_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration as TOML.
    Config,
    /// Assign a class-name anchor to every channel and write the step-0 checkpoint.
    Discover(DiscoverArgs),
    /// Train the basis and prompt bank, resuming from the latest checkpoint.
    Train(TrainArgs),
    /// Train every loss-subset variant from the discovery checkpoint.
    Ablate(TrainArgs),
    /// Explain one or more images.
    Explain(ExplainArgs),
    /// Mean pairwise perceptual distance between prototypes of each channel.
    EvalDiversity(DiversityArgs),
    /// Check that the fused head reproduces the original logits.
    Verify(VerifyArgs),
    /// Write a planted toy concept image as PNG.
    ToyImage(ToyImageArgs),
}

#[derive(Args)]
struct DiscoverArgs {
    /// Class names, one per line.
    #[arg(long)]
    class_names: Option<PathBuf>,
    #[arg(long)]
    images_per_class: Option<usize>,
    /// Discard existing checkpoints in the workdir.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr_u: Option<f64>,
    #[arg(long)]
    lr_bank: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    lambda_div: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Drop the purity term from the prompt objective.
    #[arg(long)]
    no_purity: bool,
    #[arg(long)]
    no_reg: bool,
    #[arg(long)]
    no_div: bool,
    /// Start from zero anchors when the workdir has no checkpoint.
    #[arg(long)]
    skip_discovery: bool,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Checkpoint directory; defaults to the newest one in the workdir.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_parser = parse_connectivity)]
    connectivity: Option<Connectivity>,
    /// Also write each selected channel's heatmap on the input.
    #[arg(long)]
    input_heatmaps: bool,
}

#[derive(Args)]
struct DiversityArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    n_samples: Option<usize>,
    /// Reuse one noise and latent seed for every sample.
    #[arg(long)]
    fixed_seed: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    inputs: Option<usize>,
}

#[derive(Args)]
struct ToyImageArgs {
    #[arg(long)]
    concept: usize,
    /// Patch range `row_start row_end col_start col_end` holding the concept.
    #[arg(long, num_args = 4)]
    region: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    match s {
        "4" | "four" => Ok(Connectivity::Four),
        "8" | "eight" => Ok(Connectivity::Eight),
        _ => Err(format!("connectivity must be 4 or 8, got {s}")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.iterations, self.iterations);
        set(&mut t.warmup, self.warmup);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.k, self.k);
        set(&mut t.lr_u, self.lr_u);
        set(&mut t.lr_bank, self.lr_bank);
        set(&mut t.loss.lambda_reg, self.lambda_reg);
        set(&mut t.loss.lambda_div, self.lambda_div);
        set(&mut t.checkpoint_every, self.checkpoint_every);
        if self.no_purity {
            t.loss.enable_u = false;
        }
        if self.no_reg {
            t.loss.enable_reg = false;
        }
        if self.no_div {
            t.loss.enable_div = false;
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    set(&mut cfg.paths.workdir, cli.workdir.clone());
    config::apply_env_seed(&mut cfg, cli.seed)?;
    match &cli.command {
        Command::Discover(a) => {
            if a.class_names.is_some() {
                cfg.discovery.class_names_file = a.class_names.clone();
            }
            set(&mut cfg.discovery.images_per_class, a.images_per_class);
        }
        Command::Train(a) | Command::Ablate(a) => a.apply(&mut cfg),
        Command::Explain(a) => {
            set(&mut cfg.explain.k, a.k);
            set(&mut cfg.explain.samples_per_channel, a.samples);
            set(&mut cfg.explain.threshold_frac, a.threshold);
            set(&mut cfg.explain.connectivity, a.connectivity);
            if a.input_heatmaps {
                cfg.explain.input_heatmaps = true;
            }
        }
        Command::EvalDiversity(a) => {
            set(&mut cfg.eval.n_samples, a.n_samples);
            if a.fixed_seed {
                cfg.eval.fixed_seed = true;
            }
        }
        Command::Verify(a) => set(&mut cfg.verify.inputs, a.inputs),
        Command::Config | Command::ToyImage(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Config => commands::dump_config(&cfg),
        Command::Discover(a) => commands::discover(&cfg, a.force),
        Command::Train(a) => commands::run_train(&cfg, a.skip_discovery),
        Command::Ablate(_) => commands::ablate(&cfg),
        Command::Explain(a) => commands::run_explain(&cfg, a.checkpoint.as_deref(), &a.images),
        Command::EvalDiversity(a) => commands::run_eval_diversity(&cfg, a.checkpoint.as_deref(), a.out.as_deref()),
        Command::Verify(a) => commands::run_verify(&cfg, a.checkpoint.as_deref()),
        Command::ToyImage(a) => commands::toy_image(&cfg, a.concept, a.region.as_deref(), &a.out),
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let code = match run(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit::code_for(&e)
        }
    };
    std::process::exit(code);
}
