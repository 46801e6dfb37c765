mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vllve::net::Variant;
use vllve::train::ProviderKind;

use config::{Command, RunConfig, UsageError};

/// Low-light video enhancement: synthesize data, train, enhance, evaluate.
#[derive(Parser)]
#[command(name = "vllve", version)]
struct Cli {
    /// TOML file with RunConfig keys, or a run_manifest.json to replay.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a paired synthetic dataset with its warps sidecar.
    Synth(SynthArgs),
    /// Train a model on a paired dataset.
    Train(TrainArgs),
    /// Enhance every clip of a dataset with a checkpoint.
    Infer(InferArgs),
    /// Score enhanced frames against ground truth.
    Eval(EvalArgs),
    /// Render charts and a markdown summary from logs and metric reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shapes: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gain: Option<f64>,
    #[arg(long)]
    noise_sigma_read: Option<f64>,
    #[arg(long)]
    noise_poisson_scale: Option<f64>,
    #[arg(long)]
    degradation_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Vllve,
    Vllvepp,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Oracle,
    BlockMatching,
    Imported,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Trained two-frame checkpoint; required for vllvepp.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, alias = "steps")]
    t_max: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    t_neighbor: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct ProviderArgs {
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Correspondences sampled per frame pair.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    keep_quantile: Option<f64>,
    /// Gaussian corruption of the correspondence maps, in pixels.
    #[arg(long)]
    perturb_sigma: Option<f64>,
    #[arg(long)]
    perturb_seed: Option<u64>,
    /// Fraction of sampled correspondences discarded.
    #[arg(long)]
    drop_fraction: Option<f64>,
    #[arg(long)]
    import_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the L, R and B images of every frame.
    #[arg(long)]
    save_decomposition: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Paired dataset holding the ground truth.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory of `infer`.
    #[arg(long)]
    enhanced: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Training log (train_log.jsonl); repeatable.
    #[arg(long = "log")]
    logs: Vec<PathBuf>,
    /// Metric report (metrics.json); repeatable.
    #[arg(long = "metrics")]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

impl ProviderArgs {
    fn apply(self, cfg: &mut vllve::train::ProviderConfig) {
        set(
            &mut cfg.kind,
            self.provider.map(|p| match p {
                ProviderArg::Oracle => ProviderKind::Oracle,
                ProviderArg::BlockMatching => ProviderKind::BlockMatching,
                ProviderArg::Imported => ProviderKind::Imported,
            }),
        );
        set(&mut cfg.count, self.count);
        set(&mut cfg.keep_quantile, self.keep_quantile);
        set(&mut cfg.perturb_sigma, self.perturb_sigma);
        set(&mut cfg.perturb_seed, self.perturb_seed);
        set(&mut cfg.drop_fraction, self.drop_fraction);
        set_path(&mut cfg.import_dir, self.import_dir);
    }
}

fn resolve(cli: Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let command = match &cli.command {
        Cmd::Synth(_) => Command::Synth,
        Cmd::Train(_) => Command::Train,
        Cmd::Infer(_) => Command::Infer,
        Cmd::Eval(_) => Command::Eval,
        Cmd::Report(_) => Command::Report,
    };
    if let Some(c) = cfg.command.filter(|c| *c != command) {
        return config::usage(format!(
            "config file is for `{c}`, but `{command}` was invoked"
        ));
    }
    cfg.command = Some(command);
    cfg.verbosity = cfg.verbosity.max(cli.verbose);
    match cli.command {
        Cmd::Synth(a) => {
            let s = &mut cfg.synth;
            set(&mut s.clips, a.clips);
            set(&mut s.frames, a.frames);
            set(&mut s.size, a.size);
            set(&mut s.seed, a.seed);
            set(&mut s.shapes, a.shapes);
            set(&mut s.degradation.gamma, a.gamma);
            set(&mut s.degradation.gain, a.gain);
            set(&mut s.degradation.noise_sigma_read, a.noise_sigma_read);
            set(
                &mut s.degradation.noise_poisson_scale,
                a.noise_poisson_scale,
            );
            set(&mut s.degradation.seed, a.degradation_seed);
            set_path(&mut cfg.output, a.out);
        }
        Cmd::Train(a) => {
            set_path(&mut cfg.dataset, a.dataset);
            set_path(&mut cfg.output, a.out);
            set_path(&mut cfg.pretrained, a.pretrained);
            set_path(&mut cfg.resume, a.resume);
            let t = &mut cfg.train;
            set(
                &mut t.variant,
                a.variant.map(|v| match v {
                    VariantArg::Vllve => Variant::Vllve,
                    VariantArg::Vllvepp => Variant::Vllvepp,
                }),
            );
            set(&mut t.t_max, a.t_max);
            set(&mut t.batch_size, a.batch_size);
            set(&mut t.t_neighbor, a.t_neighbor);
            set(&mut t.lr0, a.lr0);
            set(&mut t.lambda1, a.lambda1);
            set(&mut t.lambda2, a.lambda2);
            set(&mut t.lambda3, a.lambda3);
            if a.grad_clip.is_some() {
                t.grad_clip = a.grad_clip;
            }
            set(&mut t.checkpoint_every, a.checkpoint_every);
            set(&mut t.seed, a.seed);
            set(&mut t.init_seed, a.init_seed);
            a.provider.apply(&mut t.provider);
        }
        Cmd::Infer(a) => {
            set_path(&mut cfg.checkpoint, a.checkpoint);
            set_path(&mut cfg.dataset, a.dataset);
            set_path(&mut cfg.output, a.out);
            cfg.save_decomposition |= a.save_decomposition;
        }
        Cmd::Eval(a) => {
            set_path(&mut cfg.dataset, a.dataset);
            set_path(&mut cfg.enhanced, a.enhanced);
            set_path(&mut cfg.output, a.out);
            a.provider.apply(&mut cfg.train.provider);
        }
        Cmd::Report(a) => {
            if !a.logs.is_empty() {
                cfg.logs = a.logs;
            }
            if !a.metrics.is_empty() {
                cfg.metrics = a.metrics;
            }
            set_path(&mut cfg.output, a.out);
        }
    }
    Ok(cfg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.downcast_ref::<UsageError>().is_some()
        || matches!(
            err.downcast_ref::<vllve::Error>(),
            Some(vllve::Error::Config(_))
        );
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = resolve(cli).and_then(|cfg| {
        let level = match cfg.verbosity {
            0 => "warn",
            1 => "info",
            _ => "debug",
        };
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
            .format_timestamp(None)
            .init();
        commands::run(&cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
