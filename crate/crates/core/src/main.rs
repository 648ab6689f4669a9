use clap::{Parser, Subcommand, ValueEnum};
use neurorecon::dataio::RunStore;
use neurorecon::pipeline::{Pipeline, PipelineConfig, PipelineError};
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "neurorecon", about = "Synthetic fMRI reconstruction-enhancement pipeline")]
struct Cli {
    /// TOML config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (the artifact store).
    #[arg(long, global = true, default_value = "run")]
    run: PathBuf,
    /// Master seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for within-stage parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainStage {
    Decoder,
    Cgan,
    Reconstructor,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    Pearson,
    Ssim,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the run directory.
    Simulate,
    /// Train one model stage from persisted dataset artifacts.
    Train {
        #[arg(long)]
        stage: TrainStage,
    },
    /// Run decode→map→generate→reconstruct→transfer for test stimuli.
    Enhance {
        /// Single stimulus id; all test stimuli when omitted.
        #[arg(long)]
        stimulus: Option<String>,
    },
    /// Score enhanced vs reconstructed images against the true stimuli.
    Evaluate {
        /// Comma-separated candidate-set sizes, e.g. 2,5,10.
        #[arg(long, value_delimiter = ',')]
        nway: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        score: Option<ScoreArg>,
    },
    /// Validate the evaluation CSV and emit the summary.
    Report,
    /// Run every stage in order.
    All,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_toml_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Command::Evaluate { nway, repeats, score } = &cli.command {
        if let Some(n) = nway {
            cfg.evaluate.nway = n.clone();
        }
        if let Some(r) = repeats {
            cfg.evaluate.repeats = *r;
        }
        if let Some(s) = score {
            cfg.evaluate.scores = match s {
                ScoreArg::Pearson => "pearson",
                ScoreArg::Ssim => "ssim",
                ScoreArg::Both => "both",
            }
            .into();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_store(cli: &Cli, cfg: &PipelineConfig) -> Result<RunStore, PipelineError> {
    if cli.run.join("manifest.json").exists() {
        RunStore::open(&cli.run)
    } else {
        RunStore::create(&cli.run, cfg.master_seed)
    }
    .map_err(|e| PipelineError::Config(format!("run dir {}: {e}", cli.run.display())))
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| PipelineError::Config(format!("--jobs: {e}")))?;
    }
    let pipeline = Pipeline::new(cfg.clone())?;
    let mut store = open_store(cli, &cfg)?;
    match &cli.command {
        Command::Simulate => pipeline.stage_simulate(&mut store)?,
        Command::Train { stage } => match stage {
            TrainStage::Decoder => pipeline.stage_train_decoder(&mut store)?,
            TrainStage::Cgan => pipeline.stage_train_cgan(&mut store)?,
            TrainStage::Reconstructor => pipeline.stage_train_reconstructor(&mut store)?,
        },
        Command::Enhance { stimulus } => {
            let results = pipeline.stage_enhance(&mut store, stimulus.as_deref())?;
            if let Some(id) = stimulus {
                if results.is_empty() {
                    return Err(PipelineError::Stage {
                        stage: "enhance",
                        stimulus: Some(id.clone()),
                        message: "no such test stimulus".into(),
                    });
                }
            }
            for r in &results {
                println!(
                    "{}: decoded {} (r={:.3}){}",
                    r.stimulus_id,
                    r.decoded_category,
                    r.decoded_correlation,
                    if r.injected_wrong { " [injected wrong]" } else { "" }
                );
            }
        }
        Command::Evaluate { .. } => {
            let report = pipeline.stage_evaluate(&mut store)?;
            println!("{}", report.to_csv());
        }
        Command::Report => {
            let summary = pipeline.stage_report(&mut store)?;
            print!("{summary}");
        }
        Command::All => {
            let digest = pipeline.run_all(&mut store)?;
            println!("run complete; manifest digest {digest}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ PipelineError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
