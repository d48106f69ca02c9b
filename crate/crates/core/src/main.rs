use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ldsel::gradcheck::run_gradcheck;
use ldsel::oracle::run_oracle_suite;
use ldsel::train::{ablate_topk, meta_train_with, EpisodePool, EpisodeShape, Split, TrainConfig};
use ldsel::{evaluate, generate_synthetic_pool, load_descriptor_file, write_descriptor_file};
use ldsel::{Checkpoint, EvalReport, Result, Scoring, SynthParams};

#[derive(Parser)]
#[command(
    name = "ldsel",
    version,
    about = "Few-shot classification with contrastive local descriptor selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic descriptor file.
    GenSynth(GenSynth),
    /// Meta-train the threshold network and write a checkpoint.
    Train(Train),
    /// Episode accuracy of a checkpoint.
    Eval(Eval),
    /// Accuracy as a function of the top-K percentage.
    AblateTopk(Ablate),
    /// Compare analytic gradients with central differences.
    Gradcheck(Check),
    /// Compare every pipeline quantity with the brute-force reference.
    Oracle(Check),
}

#[derive(Args)]
struct GenSynth {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    images: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    m: usize,
    #[arg(long = "background-ratio")]
    background_ratio: f64,
    #[arg(long)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ShapeArgs {
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 5)]
    shot: usize,
    /// Query images per class.
    #[arg(long, default_value_t = 15)]
    queries: usize,
}

impl ShapeArgs {
    fn shape(&self) -> EpisodeShape {
        EpisodeShape {
            way: self.way,
            shot: self.shot,
            queries: self.queries,
        }
    }
}

#[derive(Args)]
struct Train {
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long = "k-percent", default_value_t = 10.0)]
    k_percent: f64,
    #[arg(long, default_value_t = 20.0)]
    lambda: f64,
    #[arg(long = "score-form", default_value = "weighted-sim")]
    score_form: String,
    #[arg(long, default_value = "raw")]
    mode: String,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long = "episodes-per-epoch", default_value_t = 100)]
    episodes_per_epoch: usize,
    /// Hidden width of the threshold network (defaults to d).
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long = "batch-episodes", default_value_t = 1)]
    batch_episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Ablate {
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated top-K percentages.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,25,30")]
    grid: Vec<f64>,
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Check {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    cases: usize,
}

fn load_pool(paths: &[PathBuf], split: Split) -> Result<EpisodePool> {
    let fragments = paths
        .iter()
        .map(load_descriptor_file)
        .collect::<Result<Vec<_>>>()?;
    EpisodePool::merge(fragments, split)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenSynth(a) => {
            let synth = generate_synthetic_pool(SynthParams {
                classes: a.classes,
                images_per_class: a.images,
                d: a.d,
                m: a.m,
                background_ratio: a.background_ratio,
                noise: a.noise,
                seed: a.seed,
            })?;
            write_descriptor_file(&a.out, &synth.pool)?;
            eprintln!(
                "wrote {} classes x {} images (d={}, m={}) to {}",
                a.classes,
                a.images,
                a.d,
                a.m,
                a.out.display()
            );
        }
        Command::Train(a) => {
            let pool = load_pool(&a.data, Split::Train)?;
            let cfg = TrainConfig {
                shape: a.shape.shape(),
                scoring: Scoring::named(a.k_percent / 100.0, a.lambda, &a.score_form, &a.mode)?,
                hidden_dim: a.hidden,
                lr: a.lr,
                epochs: a.epochs,
                episodes_per_epoch: a.episodes_per_epoch,
                batch_episodes: a.batch_episodes,
                seed: a.seed,
                ..TrainConfig::default()
            };
            println!("epoch\tmean_loss\tlr\tseconds");
            let outcome = meta_train_with(&pool, &cfg, |e| println!("{}", e.to_line()))?;
            Checkpoint {
                mlp: outcome.mlp,
                scoring: cfg.scoring,
                seed: a.seed,
            }
            .save(&a.ckpt)?;
        }
        Command::Eval(a) => {
            let pool = load_pool(&a.data, Split::Test)?;
            let ck = Checkpoint::load(&a.ckpt)?;
            let r = evaluate(
                &pool,
                &ck.mlp,
                &ck.scoring,
                a.shape.shape(),
                a.episodes,
                a.repeats,
                a.seed,
            )?;
            println!("accuracy {:.4} ± {:.4}", r.mean, r.ci95);
        }
        Command::AblateTopk(a) => {
            let pool = load_pool(&a.data, Split::Test)?;
            let ck = Checkpoint::load(&a.ckpt)?;
            let rows = ablate_topk(
                &pool,
                &ck.mlp,
                &ck.scoring,
                a.shape.shape(),
                &a.grid,
                a.episodes,
                a.seed,
            )?;
            println!("k_percent\taccuracy");
            for (pct, r) in &rows {
                println!("{pct}\t{:.4}", r.mean);
            }
            let mut best: Option<&(f64, EvalReport)> = None;
            for row in &rows {
                if best.is_none_or(|b| row.1.mean > b.1.mean) {
                    best = Some(row);
                }
            }
            if let Some((pct, r)) = best {
                println!("best\t{pct}\t{:.4}", r.mean);
            }
        }
        Command::Gradcheck(a) => {
            let report = run_gradcheck(a.seed, a.cases)?;
            println!("{report}");
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Oracle(a) => {
            let report = run_oracle_suite(a.seed, a.cases)?;
            println!("{report}");
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
