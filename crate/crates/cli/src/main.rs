//! `bcosdiff`: train, sample, explain and evaluate B-cos diffusion models.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use bcos_diffusion::ErrorClass;
use clap::{Args, Parser, Subcommand};

use settings::Settings;

#[derive(Parser)]
#[command(name = "bcosdiff", version, about = "Interpretable B-cos text-to-image diffusion")]
struct Cli {
    /// Plain-text `key = value` file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $BCOSDIFF_OUT, else ./out).
    #[arg(long, global = true)]
    out: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the synthetic shapes dataset.
    Train(TrainArgs),
    /// Generate images with deterministic DDIM.
    Sample(SampleArgs),
    /// Explain one generation: reconstructions, token heatmaps, relevance.
    Explain(ExplainArgs),
    /// Color accuracy, relevance statistics, fidelity and alignment.
    Eval(EvalArgs),
    /// Print the noise schedule.
    Schedule(ScheduleArgs),
    /// Write the dataset manifest and optional previews.
    Dataset(DatasetArgs),
}

#[derive(Args)]
struct ScheduleArgs {
    /// Number of diffusion timesteps.
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    beta_shape: Option<String>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// desk, tiny or full.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// B-cos exponent B.
    #[arg(long)]
    exponent: Option<f64>,
    /// Give cross-attention an empty slot to attend to.
    #[arg(long)]
    attention_sink: bool,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// x0 or eps.
    #[arg(long)]
    prediction: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
    /// Continue from a checkpoint with optimizer state.
    #[arg(long)]
    resume: Option<String>,
    /// Confirm a run with the full preset.
    #[arg(long)]
    yes: bool,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Images to generate, with seeds seed, seed+1, ...
    #[arg(long)]
    count: Option<u64>,
    #[arg(long)]
    upscale: Option<usize>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Flag tokens whose relevance falls below this.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    upscale: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sampling steps for explanations.
    #[arg(long)]
    steps: Option<usize>,
    /// Sampling steps for color accuracy.
    #[arg(long)]
    color_steps: Option<usize>,
    /// Cap on held-out prompts.
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    fidelity_prompts: Option<usize>,
    #[arg(long)]
    align_prompts: Option<usize>,
}

#[derive(Args)]
struct DatasetArgs {
    /// train or eval.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Number of preview images.
    #[arg(long)]
    preview: Option<usize>,
}

fn s<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|v| v.to_string())
}

fn schedule_flags(a: ScheduleArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("T", s(a.t)),
        ("beta_start", s(a.beta_start)),
        ("beta_end", s(a.beta_end)),
        ("beta_shape", a.beta_shape),
        ("mu", s(a.mu)),
        ("sigma", s(a.sigma)),
    ]
}

fn run(cli: Cli) -> bcos_diffusion::Result<()> {
    let out = ("out", cli.out);
    let (name, mut flags, f): (&str, Vec<_>, fn(&mut Settings) -> bcos_diffusion::Result<()>) = match cli.command {
        Command::Train(a) => {
            let mut v = vec![
                ("preset", a.preset),
                ("steps", s(a.steps)),
                ("seed", s(a.seed)),
                ("exponent", s(a.exponent)),
                ("attention_sink", a.attention_sink.then(|| "true".to_string())),
                ("batch", s(a.batch)),
                ("lr", s(a.lr)),
                ("image_size", s(a.image_size)),
                ("prediction", a.prediction),
                ("checkpoint_every", s(a.checkpoint_every)),
                ("log_every", s(a.log_every)),
                ("resume", a.resume),
                ("yes", a.yes.then(|| "true".to_string())),
            ];
            v.extend(schedule_flags(a.schedule));
            ("train", v, commands::train)
        }
        Command::Sample(a) => (
            "sample",
            vec![
                ("checkpoint", a.checkpoint),
                ("prompt", a.prompt),
                ("seed", s(a.seed)),
                ("steps", s(a.steps)),
                ("count", s(a.count)),
                ("upscale", s(a.upscale)),
            ],
            commands::sample,
        ),
        Command::Explain(a) => (
            "explain",
            vec![
                ("checkpoint", a.checkpoint),
                ("prompt", a.prompt),
                ("seed", s(a.seed)),
                ("steps", s(a.steps)),
                ("threshold", s(a.threshold)),
                ("upscale", s(a.upscale)),
            ],
            commands::explain,
        ),
        Command::Eval(a) => (
            "eval",
            vec![
                ("checkpoint", a.checkpoint),
                ("seed", s(a.seed)),
                ("steps", s(a.steps)),
                ("color_steps", s(a.color_steps)),
                ("prompts", s(a.prompts)),
                ("fidelity_prompts", s(a.fidelity_prompts)),
                ("align_prompts", s(a.align_prompts)),
            ],
            commands::eval,
        ),
        Command::Schedule(a) => ("schedule", schedule_flags(a), commands::schedule),
        Command::Dataset(a) => (
            "dataset",
            vec![
                ("split", a.split),
                ("image_size", s(a.image_size)),
                ("max_tokens", s(a.max_tokens)),
                ("preview", s(a.preview)),
            ],
            commands::dataset,
        ),
    };
    flags.push(out);
    let mut settings = Settings::new(name, cli.config.as_deref(), flags)?;
    f(&mut settings)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
                ErrorClass::Internal => 1,
            })
        }
    }
}
