use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use musicot::model::Variant;
use musicot_cli::commands::{SampleRequest, SampleSource};
use musicot_cli::config::stage_seed;
use musicot_cli::error::EXIT_RUNTIME;
use musicot_cli::{
    cmd_evaluate, cmd_gen_data, cmd_sample, cmd_train_lm, cmd_train_rvq, CliError, ExperimentConfig, Mode,
};

/// Chain-of-musical-thought pipeline on a synthetic corpus.
///
/// Exit codes: 0 success, 1 runtime failure, 2 invalid config, 3 missing,
/// stale or existing artifacts.
#[derive(Debug, Parser)]
#[command(name = "musicot", version)]
struct Cli {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        /// Replace an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Fit the residual codebooks on the training windows.
    TrainRvq,
    /// Train the language model(s) selected by the mode.
    TrainLm {
        /// Override the config's mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Print the loss every this many steps (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Sample one song from a prompt or a reference.
    Sample(Box<SampleArgs>),
    /// Score both models and write the ablation report.
    Evaluate,
    /// Print the effective config as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Text prompt made of tag names.
    #[arg(long, conflicts_with_all = ["reference", "reference_song"])]
    prompt: Option<String>,
    /// JSON file with a list of window embeddings to reference.
    #[arg(long, conflicts_with = "reference_song")]
    reference: Option<PathBuf>,
    /// Corpus song index to reference.
    #[arg(long)]
    reference_song: Option<usize>,
    /// Lyrics text over the corpus lexicon.
    #[arg(long)]
    lyrics: Option<String>,
    /// Which trained model to sample from.
    #[arg(long, value_enum, default_value_t = VariantArg::Musicot)]
    variant: VariantArg,
    /// Output directory.
    #[arg(long, default_value = "sample")]
    out: PathBuf,
    #[arg(long)]
    temp_cot: Option<f64>,
    #[arg(long)]
    temp_audio: Option<f64>,
    /// Guidance scale for the CoT phase.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Guidance scale for the audio phase.
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    max_cot_tokens: Option<usize>,
    #[arg(long)]
    max_audio_tokens: Option<usize>,
    /// Keep the CoT in the unconditional stream of the audio phase.
    #[arg(long)]
    uncond_keeps_cot: bool,
    /// Sampling seed; derived from the root seed when omitted.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum VariantArg {
    Musicot,
    Baseline,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Musicot => Variant::Musicot,
            VariantArg::Baseline => Variant::Baseline,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = ExperimentConfig::load(cli.config.as_deref(), &cli.sets)?;
    match cli.command {
        Command::GenData { force } => {
            let out = cmd_gen_data(&config, force)?;
            println!(
                "wrote {} songs to {} (seed {}, sha256 {})",
                out.songs,
                out.dir.display(),
                out.seed,
                out.hash
            );
        }
        Command::TrainRvq => {
            let out = cmd_train_rvq(&config)?;
            println!("wrote codebooks to {}", out.path.display());
            for (k, mse) in out.per_level_mse.iter().enumerate() {
                println!("  level {}  mse {mse:.6}  reseeds {}", k + 1, out.reseeds[k]);
            }
        }
        Command::TrainLm { mode, log_every } => {
            if let Some(m) = mode {
                config.mode = m;
            }
            let outs = cmd_train_lm(&config, |variant, step, loss| {
                if log_every > 0 && step % log_every == 0 {
                    eprintln!("{} step {step} loss {loss:.4}", variant.as_str());
                }
            })?;
            for o in outs {
                println!(
                    "{}: {} params, loss {:.4} -> {:.4}, checkpoint {}, metrics {}",
                    o.variant.as_str(),
                    o.params,
                    o.initial_loss,
                    o.final_loss,
                    o.path.display(),
                    o.metrics.display()
                );
            }
        }
        Command::Sample(args) => {
            let source = match (args.prompt, args.reference, args.reference_song) {
                (Some(p), None, None) => SampleSource::Prompt(p),
                (None, Some(r), None) => SampleSource::ReferenceFile(r),
                (None, None, Some(i)) => SampleSource::ReferenceSong(i),
                (None, None, None) => {
                    return Err(CliError::config("give one of --prompt, --reference or --reference-song").into())
                }
                _ => return Err(CliError::config("--prompt and reference options are exclusive").into()),
            };
            let mut params = config.sampling_params(stage_seed::SAMPLE);
            macro_rules! set {
                ($($field:ident),*) => { $(if let Some(v) = args.$field { params.$field = v; })* };
            }
            set!(
                temp_cot,
                temp_audio,
                lambda1,
                lambda2,
                max_cot_tokens,
                max_audio_tokens,
                seed
            );
            if args.top_k.is_some() {
                params.top_k = args.top_k;
            }
            params.uncond_keeps_cot |= args.uncond_keeps_cot;
            let request = SampleRequest {
                source,
                lyrics: args.lyrics,
                variant: args.variant.into(),
                params,
                out: args.out,
            };
            let (_, summary) = cmd_sample(&config, &request)?;
            print!("{}", summary.to_text());
            println!("files        {}", request.out.display());
        }
        Command::Evaluate => {
            let report = cmd_evaluate(&config)?;
            print!("{}", report.to_text());
            println!("reports in {}", config.reports_dir().display());
        }
        Command::ShowConfig => print!("{}", config.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(EXIT_RUNTIME, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
