use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rvae::geometry::GeodesicOptions;
use rvae::harness::{
    cmd_classify, cmd_density, cmd_eval, cmd_geodesic, cmd_sample, cmd_train, parse_config, ClassifierConfig, GridSpec,
    RunConfig, SampleRequest,
};
use rvae::parallel::configure_threads;
use rvae::{Result, RvaeError};

#[derive(Parser)]
#[command(name = "rvae", version, about = "Train and query variational autoencoders with Riemannian Brownian-motion priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage training; writes a checkpoint, metrics and latent codes.
    Train(RunArgs),
    /// Neg. ELBO, reconstruction and KL on the configured test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate; repeat for one checkpoint per seed.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Posterior samples per test point (overrides `eval_samples`).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Brownian walks from the learned prior.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        paths: usize,
        /// Multiplies the learned diffusion time.
        #[arg(long, default_value_t = 1.0)]
        t_scale: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Geodesic and straight-line interpolation between two codes.
    Geodesic {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Start code, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        from: String,
        /// End code, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        to: String,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Volume measure and prior density on a 2-D grid.
    Density {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `lo:hi:n,lo:hi:n`
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-class and macro F1 of a small classifier on latent codes.
    Classify {
        /// Codes file with a `label` column, as written by `train`.
        #[arg(long)]
        codes: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Any other configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut flags = Vec::new();
        for raw in &self.set {
            let (k, v) = raw
                .split_once('=')
                .ok_or_else(|| RvaeError::Config(format!("--set expects key=value, got {raw:?}")))?;
            flags.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("dataset", self.dataset.clone()),
            ("mode", self.mode.clone()),
            ("latent_dim", self.latent_dim.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                flags.push((k.to_string(), v));
            }
        }
        parse_config(self.config.as_deref(), &flags)
    }
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 8)]
    basis: usize,
    #[arg(long, default_value_t = 32)]
    segments: usize,
    #[arg(long, default_value_t = 500)]
    iters: usize,
}

impl SolverArgs {
    fn options(&self) -> GeodesicOptions {
        GeodesicOptions {
            n_basis: self.basis,
            n_segments: self.segments,
            max_iters: self.iters,
            ..GeodesicOptions::default()
        }
    }
}

fn parse_point(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| RvaeError::Config(format!("bad coordinate {s:?} in {raw:?}"))))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let out = cmd_train(&cfg)?;
            if let Some(last) = out.report.metrics.last() {
                println!(
                    "epoch {} stage {}: neg_elbo {:.4} rec {:.4} kl {:.4}",
                    last.epoch, last.stage, last.neg_elbo, last.rec, last.kl
                );
            }
            println!("checkpoint {} ({})", out.checkpoint.display(), out.checkpoint_sha1);
        }
        Command::Eval { run, checkpoints, samples } => {
            let cfg = run.resolve()?;
            let (_, test) = cfg.load_split()?;
            let mut opts = cfg.train.elbo_options();
            if let Some(n) = samples {
                opts.samples = n;
            }
            let s = cmd_eval(&checkpoints, &test, &opts, cfg.train.seed, &cfg.out_dir)?;
            println!(
                "{} d={}: neg_elbo {:.4} ± {:.4}  rec {:.4} ± {:.4}  kl {:.4} ± {:.4}",
                s.mode, s.latent_dim, s.neg_elbo.0, s.neg_elbo.1, s.rec.0, s.rec.1, s.kl.0, s.kl.1
            );
        }
        Command::Sample { checkpoint, paths, t_scale, steps, seed, out_dir } => {
            let req = SampleRequest { checkpoint: &checkpoint, n_paths: paths, t_scale, steps, seed, out_dir: &out_dir };
            let walks = cmd_sample(&req)?;
            println!("{} paths written to {}", walks.len(), out_dir.display());
        }
        Command::Geodesic { checkpoint, from, to, solver, out_dir } => {
            let s = cmd_geodesic(&checkpoint, &parse_point(&from)?, &parse_point(&to)?, &solver.options(), &out_dir)?;
            println!(
                "geodesic length {:.6} (straight {:.6}), {} iterations, converged {}",
                s.geodesic_length, s.straight_length, s.iterations, s.converged
            );
        }
        Command::Density { checkpoint, grid, solver, out_dir } => {
            let d = cmd_density(&checkpoint, &GridSpec::parse(&grid)?, &solver.options(), &out_dir)?;
            println!("prior mass on grid {:.4}", d.prior_mass());
        }
        Command::Classify { codes, seeds, epochs, out_dir } => {
            let cfg = ClassifierConfig { epochs, ..ClassifierConfig::default() };
            let reports = cmd_classify(&codes, &cfg, &seeds, &out_dir)?;
            for (s, r) in seeds.iter().zip(&reports) {
                println!("seed {s}: macro F1 {:.4}", r.macro_f1);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                RvaeError::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
