use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gmcml::eval::run_eval;
use gmcml::generative::GenerativeConfig;
use gmcml::losses::LossWeights;
use gmcml::render::{read_dataset, render_dataset, write_dataset, Modes, RenderConfig};
use gmcml::trainer::{continue_training, run_training, OptimizerKind, TrainConfig, Trainer};
use gmcml::zigzag::ClassifierConfig;

#[derive(Parser)]
#[command(
    name = "gmcml",
    version,
    about = "Synthetic-render recognition with a conjugate generative model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset of (image, semantic-depth mask) pairs.
    Render(RenderArgs),
    /// Train both sub-networks on a rendered dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModesArg {
    Centered,
    Shifted,
    Both,
}

impl From<ModesArg> for Modes {
    fn from(m: ModesArg) -> Self {
        match m {
            ModesArg::Centered => Modes::Centered,
            ModesArg::Shifted => Modes::Shifted,
            ModesArg::Both => Modes::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    SgdMomentum,
    Adam,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    res: usize,
    #[arg(long, default_value_t = 12)]
    classes: usize,
    /// Training pairs per class and camera mode.
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Held-out pairs per class and camera mode.
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, value_enum, default_value = "both")]
    modes: ModesArg,
    /// Icosphere subdivision level of the camera shell.
    #[arg(long, default_value_t = 2)]
    subdivision: u32,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stage-1 (triplet pretraining) epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Stage-2 (softmax fine-tuning) epochs.
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    m_tri: Option<f64>,
    /// Number of classes; defaults to the dataset's.
    #[arg(long)]
    classes: Option<usize>,
    /// Keep the corruption ratios constant (baseline).
    #[arg(long)]
    fixed_noise: bool,
    /// Extra checkpoint every N steps.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn configure_threads() -> Result<()> {
    let threads = match std::env::var("GMCML_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .with_context(|| format!("GMCML_THREADS must be a positive integer, got `{v}`"))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the worker pool")
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let cfg = RenderConfig {
        seed: a.seed,
        classes: a.classes,
        per_class: a.per_class,
        test_per_class: a.test_per_class,
        resolution: a.res,
        modes: a.modes.into(),
        subdivision: a.subdivision,
    };
    let pairs = render_dataset(&cfg)?;
    write_dataset(&pairs, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("rendered {} pairs into {}", pairs.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs, dataset: &Path) -> Result<TrainConfig> {
    let pairs = read_dataset(dataset)?;
    let Some(first) = pairs.first() else {
        bail!("dataset {} is empty", dataset.display());
    };
    let classes = match a.classes {
        Some(k) => k,
        None => pairs.iter().map(|p| p.category).max().unwrap_or(0) + 1,
    };
    let base = TrainConfig::default();
    let weights = LossWeights {
        m_tri: a.m_tri.unwrap_or(base.weights.m_tri),
        ..base.weights
    };
    Ok(TrainConfig {
        seed: a.seed,
        batch_size: a.batch.unwrap_or(base.batch_size),
        learning_rate: a.lr.unwrap_or(base.learning_rate),
        optimizer: match a.optimizer {
            Some(OptimizerArg::Sgd) => OptimizerKind::Sgd,
            Some(OptimizerArg::SgdMomentum) => OptimizerKind::SgdMomentum,
            Some(OptimizerArg::Adam) => OptimizerKind::Adam,
            None => base.optimizer,
        },
        pretrain_epochs: a.epochs.unwrap_or(base.pretrain_epochs),
        finetune_epochs: a.finetune_epochs.unwrap_or(base.finetune_epochs),
        weights,
        alpha: a.alpha.unwrap_or(base.alpha),
        beta: a.beta.unwrap_or(base.beta),
        adaptive_noise: !a.fixed_noise,
        checkpoint_every: a.checkpoint_every,
        generative: GenerativeConfig {
            resolution: first.resolution(),
            ..base.generative
        },
        classifier: ClassifierConfig {
            classes,
            ..base.classifier
        },
        ..base
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let summary = match &a.resume {
        Some(ckpt) => {
            let mut trainer = Trainer::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            trainer.set_epochs(a.epochs, a.finetune_epochs);
            continue_training(trainer, &a.dataset, &a.out)?
        }
        None => run_training(train_config(&a, &a.dataset)?, &a.dataset, &a.out)?,
    };
    match summary.metrics.last() {
        Some(m) => println!(
            "trained to step {} (stage {}): loss_total {:.5}, mask mse {:.5}",
            summary.steps,
            m.stage.number(),
            m.loss_total,
            m.mask_mse
        ),
        None => println!("nothing left to train at step {}", summary.steps),
    }
    println!("metrics: {}", summary.metrics_path.display());
    println!("checkpoint: {}", summary.checkpoint_path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let report = run_eval(&a.checkpoint, &a.dataset, &a.out)?;
    print!("{}", report.summary());
    println!("outputs: {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return ExitCode::from(2);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Render(a) => cmd_render(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
