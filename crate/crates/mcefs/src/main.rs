use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mcefs::backend::BackendError;
use mcefs::corpus::{corpus_stats, Corpus, CorpusError};
use mcefs::protocol::ProtocolKind;
use mcefs::runner::{
    self, build_backend, elicit_praises, render_report, RunConfig, RunError, RunStatus,
};

#[derive(Parser)]
#[command(name = "mcefs", about = "Few-shot ABSC prompting experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment from a config file.
    Run(RunArgs),
    /// Continue a checkpointed run.
    Resume {
        /// Output directory of the interrupted run.
        #[arg(long = "out")]
        output_dir: PathBuf,
    },
    /// Re-render the comparison report from a finished run.
    Report {
        #[arg(long = "out")]
        output_dir: PathBuf,
    },
    /// Print corpus statistics for a dataset.
    Stats {
        #[arg(long)]
        name: String,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Ask the configured backend for a praise pool and print it.
    ElicitPraises {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        n: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags below override fields of the same name.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_name: Option<String>,
    #[arg(long)]
    train_path: Option<PathBuf>,
    #[arg(long)]
    test_path: Option<PathBuf>,
    /// fewshot | mcefs | mcefs-pr
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    shots: Option<Vec<usize>>,
    /// "live" or "scripted:<behavior>"
    #[arg(long)]
    backend_kind: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    template_path: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Evaluate only the first N test instances (desk-scale runs).
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    praise_pool_size: Option<usize>,
    #[arg(long)]
    dev_sample_size: Option<usize>,
    #[arg(long)]
    max_conversations: Option<usize>,
    #[arg(long)]
    no_cache: bool,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig, RunError> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                toml::from_str(&text).map_err(|e| RunError::Config(e.to_string()))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = self.dataset_name { config.dataset_name = v; }
        if let Some(v) = self.train_path { config.train_path = v; }
        if let Some(v) = self.test_path { config.test_path = v; }
        if let Some(v) = self.protocol {
            config.protocol = ProtocolKind::parse(&v)
                .ok_or_else(|| RunError::Config(format!("unknown protocol {v:?}")))?;
        }
        if let Some(v) = self.seeds { config.seeds = v; }
        if let Some(v) = self.shots { config.shots = v; }
        if let Some(v) = self.backend_kind { config.backend_kind = v; }
        if let Some(v) = self.model { config.backend.model = v; }
        if let Some(v) = self.temperature { config.backend.temperature = v; }
        if let Some(v) = self.endpoint { config.backend.endpoint = v; }
        if let Some(v) = self.template_path { config.template_path = Some(v); }
        if let Some(v) = self.output_dir { config.output_dir = v; }
        if let Some(v) = self.limit { config.limit = Some(v); }
        if let Some(v) = self.praise_pool_size { config.praise_pool_size = v; }
        if let Some(v) = self.dev_sample_size { config.dev_sample_size = v; }
        if let Some(v) = self.max_conversations { config.max_conversations = Some(v); }
        if self.no_cache { config.cache = false; }
        Ok(config)
    }
}

fn exit_code_for(err: &RunError) -> u8 {
    match err {
        RunError::Config(_) | RunError::CorruptCheckpoint(_) => 1,
        RunError::Corpus(_) | RunError::Sampler(_) | RunError::Metrics(_) => 2,
        RunError::Backend(BackendError::Exhausted { .. }) => 3,
        RunError::Backend(_) => 3,
        RunError::Protocol(_) => 2,
        RunError::Io(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => args.into_config().and_then(|config| run_and_print(&config)),
        Command::Resume { output_dir } => match runner::resume(&output_dir) {
            Ok(status) => {
                print_status(&status);
                Ok(())
            }
            Err(e) => Err(e),
        },
        Command::Report { output_dir } => report(&output_dir),
        Command::Stats { name, train, test } => stats(&name, &train, &test),
        Command::ElicitPraises { config, n } => praises(&config, n),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run_and_print(config: &RunConfig) -> Result<(), RunError> {
    let status = runner::run(config)?;
    print_status(&status);
    Ok(())
}

fn print_status(status: &RunStatus) {
    match status {
        RunStatus::Completed(_) => println!("run complete"),
        RunStatus::Interrupted { conversations_done } => println!(
            "run interrupted after {conversations_done} conversations; use `mcefs resume` to continue"
        ),
    }
}

fn report(output_dir: &PathBuf) -> Result<(), RunError> {
    let path = output_dir.join("metrics.json");
    let bytes = std::fs::read(&path)
        .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
    let report: mcefs::metrics::MetricsReport = serde_json::from_str(
        std::str::from_utf8(&bytes).map_err(|e| RunError::Config(e.to_string()))?,
    )
    .map_err(|e| RunError::Config(format!("bad metrics file: {e}")))?;
    println!("{}", render_report(&report));
    Ok(())
}

fn stats(name: &str, train: &PathBuf, test: &PathBuf) -> Result<(), RunError> {
    let (corpus, train_log, test_log) = Corpus::load_from_paths(name, train, test)
        .map_err(|e: CorpusError| RunError::Corpus(e))?;
    let stats = corpus_stats(&corpus);
    println!("{name}");
    println!(
        "  train: {} instances ({} conflict dropped)",
        stats.train_count, train_log.dropped_conflict
    );
    for (p, n) in &stats.train_per_label {
        println!("    {p}: {n}");
    }
    println!(
        "  test: {} instances ({} conflict dropped)",
        stats.test_count, test_log.dropped_conflict
    );
    for (p, n) in &stats.test_per_label {
        println!("    {p}: {n}");
    }
    Ok(())
}

fn praises(config_path: &PathBuf, n: usize) -> Result<(), RunError> {
    let text = std::fs::read_to_string(config_path)?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| RunError::Config(e.to_string()))?;
    let backend = build_backend(&config)?;
    let templates = config.templates()?;
    let pool = elicit_praises(backend.as_ref(), n, &templates, 2)?;
    for (i, praise) in pool.praises.iter().enumerate() {
        println!("{}. {praise}", i + 1);
    }
    Ok(())
}
