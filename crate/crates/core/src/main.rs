use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use narracap::baselines::BaselineKind;
use narracap::caption::AblationMask;
use narracap::llm::PromptVariant;
use narracap::metrics::{emit_report, ReportFormat};
use narracap::runner::{self, ConfigOverrides, RunError};
use narracap::scoring::SelectionRule;

/// Zero-shot emotion recognition through narrative captions.
#[derive(Debug, Parser)]
#[command(name = "narracap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML file with any of the options below; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Annotation file (JSON lines).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// NEMB store path, embedding service URL, or "mock".
    #[arg(long, global = true)]
    store: Option<String>,
    /// LLM base URL or "mock".
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Model name sent to the endpoint (default gpt-4-0613).
    #[arg(long, global = true)]
    model: Option<String>,
    /// Prompt variant, e.g. six_labels_with_definitions, top_labels, vlm_direct.
    #[arg(long, global = true)]
    variant: Option<PromptVariant>,
    /// Physical-signal selection: top:K or std:K.
    #[arg(long, global = true)]
    rule: Option<SelectionRule>,
    /// Caption components: full, none, no-<component>, or a comma list.
    #[arg(long, global = true)]
    mask: Option<AblationMask>,
    /// Ablation rows, separated by ';'. The first must be "full".
    #[arg(long, global = true, value_delimiter = ';')]
    masks: Option<Vec<AblationMask>>,
    /// rand6, rand6-weighted, majority or clip-direct.
    #[arg(long, global = true)]
    baseline: Option<BaselineKind>,
    /// Annotation file whose label counts drive the frequency baselines.
    #[arg(long, global = true)]
    frequency_dataset: Option<PathBuf>,
    /// Existing predictions.jsonl for evaluate/strata.
    #[arg(long, global = true)]
    predictions: Option<PathBuf>,
    /// Seed for baselines, subsampling, bootstrap and mock embeddings (default 1).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (bounds in-flight LLM requests).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// LLM response cache (default <out>/llm_cache).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Directory with the five vocabulary files.
    #[arg(long, global = true)]
    vocab_dir: Option<PathBuf>,
    /// Evaluate a seeded random subset of this many records.
    #[arg(long, global = true)]
    subsample: Option<usize>,
    /// Bootstrap resamples, at least 100 (default 1000).
    #[arg(long, global = true)]
    resamples: Option<usize>,
    /// Retries on 429/5xx or no reply (default 5).
    #[arg(long, global = true)]
    max_retries: Option<u32>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    max_tokens: Option<u32>,
    /// Dimension of --store mock embeddings (default 512).
    #[arg(long, global = true)]
    mock_dim: Option<usize>,
    /// More log output (-v, -vv).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write narrative captions only.
    Caption,
    /// Captions, LLM labels, metrics.
    Predict,
    /// Run a reference predictor.
    Baseline,
    /// Metrics from a predictions file.
    Evaluate,
    /// One row per caption mask with F1 deltas.
    Ablate,
    /// Metrics by number of people in the image.
    Strata,
    /// Write the synthetic fixture (annotations, store, expected outputs).
    Synth {
        #[arg(long, default_value_t = 12)]
        images: usize,
        #[arg(long, default_value_t = 1)]
        persons: usize,
    },
}

impl Cli {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            dataset: self.dataset.clone(),
            store: self.store.clone(),
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            variant: self.variant,
            rule: self.rule,
            mask: self.mask,
            masks: self.masks.clone(),
            baseline: self.baseline,
            frequency_dataset: self.frequency_dataset.clone(),
            predictions: self.predictions.clone(),
            seed: self.seed,
            out: self.out.clone(),
            jobs: self.jobs,
            cache_dir: self.cache_dir.clone(),
            vocab_dir: self.vocab_dir.clone(),
            subsample: self.subsample,
            resamples: self.resamples,
            max_retries: self.max_retries,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            mock_dim: self.mock_dim,
        }
    }
}

fn print_table(rows: &[(String, narracap::metrics::MetricsReport)]) {
    print!("{}", String::from_utf8_lossy(&emit_report(rows, ReportFormat::Table)));
}

fn run(cli: &Cli) -> Result<(), RunError> {
    let file = match &cli.config {
        Some(path) => ConfigOverrides::from_file(path)?,
        None => ConfigOverrides::default(),
    };
    let config = file.overlay(cli.overrides()).resolve()?;
    match &cli.command {
        Command::Caption => {
            let rows = runner::run_captions(&config)?;
            println!("wrote {} captions to {}", rows.len(), config.out.join("captions.jsonl").display());
        }
        Command::Predict => print_table(&runner::run_predict(&config)?.reports),
        Command::Baseline => print_table(&runner::run_baseline(&config)?.reports),
        Command::Evaluate => print_table(&runner::run_evaluate(&config, "report")?),
        Command::Strata => print_table(&runner::run_strata(&config)?),
        Command::Ablate => {
            let rows = runner::run_ablation(&config)?;
            print!("{}", runner::format_ablation_table(&rows));
        }
        Command::Synth { images, persons } => {
            let dir = runner::run_synth(&config, *images, *persons)?;
            println!("wrote fixture to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("narracap: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
