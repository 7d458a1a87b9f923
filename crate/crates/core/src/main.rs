use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use instrex::chain::{InputMode, Step};
use instrex::normalizer::NormalizerConfig;
use instrex::orchestrator::{
    load_dictionary, run_ablate, run_detect, run_evaluate, run_extract, AblationGrid, BackendConfig, Overrides,
    Resources, RunConfig, RunError,
};
use instrex::section::DetectorConfig;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "instrex", version, about = "Extract research instruments from parsed articles")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a corpus and write records, traces and a manifest.
    Extract(RunArgs),
    /// Score an extract output directory against gold annotations.
    Evaluate(EvaluateArgs),
    /// Run a grid of chain configurations and compare them.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// TOML file with `steps` and `input_modes` lists.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Run against a live backend and save the exchanges as a transcript.
    Record {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Check a dictionary file for structural problems.
    ValidateDict { path: PathBuf },
    /// Detect method-section spans only.
    Detect {
        #[arg(long)]
        input_dir: PathBuf,
        /// Run config whose `[detector]` table supplies keyword lists.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON object mapping doc_id to the expected span.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    MethodExcerpt,
    FullText,
}

#[derive(Clone, Copy, ValueEnum)]
enum StepArg {
    Extraction,
    Summarization,
    Decision,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    input_dir: Option<PathBuf>,
    #[arg(long)]
    dictionary: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Replay this transcript (or, in record mode, write it here).
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fail_fast: bool,
    #[arg(long)]
    collapse_subtests: bool,
    #[arg(long, value_enum)]
    input_mode: Option<ModeArg>,
    #[arg(long, value_enum, value_delimiter = ',')]
    steps: Option<Vec<StepArg>>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    dictionary: PathBuf,
    /// Defaults to the predictions directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    collapse_subtests: bool,
    #[arg(long)]
    fuzzy_threshold: Option<f64>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, RunError> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            input_dir: self.input_dir.clone(),
            dictionary: self.dictionary.clone(),
            output_dir: self.output_dir.clone(),
            transcript: self.transcript.clone(),
            concurrency: self.concurrency,
            seed: self.seed,
            fail_fast: self.fail_fast,
            collapse_subtests: self.collapse_subtests,
            input_mode: self.input_mode.map(|m| match m {
                ModeArg::MethodExcerpt => InputMode::MethodExcerpt,
                ModeArg::FullText => InputMode::FullText,
            }),
            steps: self.steps.as_ref().map(|s| {
                s.iter()
                    .map(|s| match s {
                        StepArg::Extraction => Step::Extraction,
                        StepArg::Summarization => Step::Summarization,
                        StepArg::Decision => Step::Decision,
                    })
                    .collect()
            }),
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn extract(cfg: &RunConfig) -> Result<(), RunError> {
    let res = Resources::load(cfg)?;
    let manifest = run_extract(cfg, &res)?;
    eprintln!(
        "{} documents processed, {} failed; {} input / {} output tokens; outputs in {}",
        manifest.succeeded,
        manifest.failed,
        manifest.usage.input_tokens,
        manifest.usage.output_tokens,
        cfg.output_dir.display()
    );
    manifest.failure().map_or(Ok(()), Err)
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Extract(args) => extract(&args.load()?),
        Command::Record { run } => {
            let mut cfg = run.load()?;
            cfg.backend = match cfg.backend {
                BackendConfig::Record { .. } => cfg.backend,
                BackendConfig::Live(live) => BackendConfig::Record {
                    live,
                    transcript: run
                        .transcript
                        .clone()
                        .ok_or_else(|| RunError::Config("record needs --transcript for a live backend".into()))?,
                },
                BackendConfig::Mock { .. } => {
                    return Err(RunError::Config("record needs a live or record backend in the config".into()))
                }
            };
            extract(&cfg)
        }
        Command::Evaluate(args) => {
            let dict = load_dictionary(&args.dictionary)?;
            let mut ncfg = NormalizerConfig { collapse_subtests: args.collapse_subtests, ..Default::default() };
            if let Some(t) = args.fuzzy_threshold {
                ncfg.fuzzy_threshold = t;
            }
            let out = args.out.unwrap_or_else(|| args.predictions.clone());
            let report = run_evaluate(&args.predictions, &args.gold, &dict, &ncfg, &out)?;
            print!("{}", report.render());
            Ok(())
        }
        Command::Ablate { run, grid, gold } => {
            let cfg = run.load()?;
            let grid = AblationGrid::load(&grid)?;
            let comparison = run_ablate(&cfg, &grid, &gold)?;
            print!("{}", comparison.render());
            Ok(())
        }
        Command::ValidateDict { path } => {
            let dict = load_dictionary(&path)?;
            println!("{}: version {}, {} entries, ok", path.display(), dict.version(), dict.entries().len());
            Ok(())
        }
        Command::Detect { input_dir, config, labels, out } => {
            let detector = match config {
                Some(p) => RunConfig::load(&p)?.detector,
                None => DetectorConfig::default(),
            };
            let report = run_detect(&input_dir, &detector, labels.as_deref())?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            write_or_print(out.as_deref(), &text).map_err(|e| RunError::Config(format!("{e:#}")))?;
            if let Some(acc) = report.accuracy {
                eprintln!("span accuracy {acc:.3} ({}/{})", report.correct, report.labeled);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default)))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
