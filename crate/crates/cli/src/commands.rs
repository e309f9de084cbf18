use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use regrank::backends::mock::FixtureModel;
use regrank::backends::{Decoding, Endpoints, ReplayMode, Transport};
use regrank::corpus::{load_corpus, CorpusError};
use regrank::harness::{
    connect, emit_report, load_report, random_guess_baseline, render_tables, report_json, run_experiment, Aggregation,
    HarnessError, PromptMode, RunConfig, RunReport,
};
use regrank::humaneval::{load_attention_checks, ReSource, Service, Study};
use regrank::rerank::Strategy;
use regrank::Corpus;

/// Exit status for malformed input data.
pub const EXIT_DATA: u8 = 65;
/// Exit status when the model backends cannot be used.
pub const EXIT_BACKEND: u8 = 69;

#[derive(Debug, Parser)]
#[command(name = "regrank", version, about = "Referring-expression generation with comprehension-guided reranking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a corpus file against every structural rule.
    Validate { corpus: PathBuf },
    /// Run the cross-validated evaluation and write a report.
    Run(Box<RunArgs>),
    /// Accuracy of guessing uniformly within each reduced visual context.
    Baseline {
        corpus: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Render the result tables of a saved report.
    Tables {
        report: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Serve the human evaluation API.
    ServeHumaneval(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// HTTP endpoints from flags, config or environment.
    Http,
    /// The deterministic fixture model built from the corpus.
    Mock,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON run config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `greedy` or `beam:<width>`.
    #[arg(long)]
    pub decoding: Option<Decoding>,
    /// Comma-separated: top1, max_disc, rerank.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Vec<Strategy>,
    #[arg(long)]
    pub w_tim: Option<f64>,
    #[arg(long)]
    pub w_itm: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub logit_scale: Option<f64>,
    /// Prior messages shown to the generator.
    #[arg(long)]
    pub window: Option<usize>,
    /// Prompt an untuned generator with this many support examples.
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long, value_parser = parse_aggregation)]
    pub aggregation: Option<Aggregation>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub generator_url: Option<String>,
    #[arg(long)]
    pub describer_url: Option<String>,
    #[arg(long)]
    pub embedder_url: Option<String>,
    #[arg(long, value_enum, default_value = "http")]
    pub backend: BackendKind,
    /// off, record or replay.
    #[arg(long)]
    pub replay_mode: Option<ReplayMode>,
    #[arg(long)]
    pub replay_dir: Option<PathBuf>,
    /// Include wall-clock time in the report.
    #[arg(long)]
    pub timing: bool,
    /// Report path; stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Also write the markdown tables here.
    #[arg(long)]
    pub tables: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Report whose Top-1 selections are the greedy REs.
    #[arg(long)]
    pub greedy: Option<PathBuf>,
    /// Report whose Rerank selections are the reranked REs.
    #[arg(long)]
    pub rerank: Option<PathBuf>,
    /// JSONL attention checks.
    #[arg(long)]
    pub attention_checks: Option<PathBuf>,
    /// Append-only event log; sessions in it are resumed.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Directory served under /images; defaults to `images/` next to the corpus.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    match s {
        "macro" => Ok(Aggregation::Macro),
        "micro" => Ok(Aggregation::Micro),
        _ => Err(format!("expected macro or micro, got {s:?}")),
    }
}

/// A command failure and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Data(String),
    Backend(String),
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Data(_) => EXIT_DATA,
            Failure::Backend(_) => EXIT_BACKEND,
            Failure::Other(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Data(m) | Failure::Backend(m) | Failure::Other(m) => f.write_str(m),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::NoImageSets | HarnessError::InvalidCorpus(_) | HarnessError::Json { .. } => {
                Failure::Data(e.to_string())
            }
            HarnessError::InvalidConfig(_) | HarnessError::Io { .. } => Failure::Other(e.to_string()),
        }
    }
}

fn read_corpus(path: &Path) -> Result<Corpus, Failure> {
    load_corpus(path).map_err(|e| match e {
        CorpusError::Io(_) => Failure::Other(format!("{}: {e}", path.display())),
        _ => Failure::Data(format!("{}: {e}", path.display())),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

/// Config file (or defaults) with the flags applied on top.
pub fn run_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(d) = args.decoding {
        config.decoding = d;
    }
    if !args.strategies.is_empty() {
        config.strategies = args.strategies.clone();
    }
    let p = &mut config.pooling;
    for (flag, field) in [
        (args.w_tim, &mut p.w_tim),
        (args.w_itm, &mut p.w_itm),
        (args.epsilon, &mut p.epsilon),
        (args.logit_scale, &mut p.logit_scale),
    ] {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(w) = args.window {
        config.window_size = w;
    }
    if let Some(shots) = args.shots {
        config.prompt_mode = PromptMode::InContext { shots };
    }
    if let Some(a) = args.aggregation {
        config.aggregation = a;
    }
    if let Some(n) = args.parallelism {
        config.parallelism = n;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if args.timing {
        config.record_timing = true;
    }
    config.endpoints = Endpoints {
        generator: args.generator_url.clone(),
        describer: args.describer_url.clone(),
        embedder: args.embedder_url.clone(),
    }
    .or(config.endpoints);
    if let Some(m) = args.replay_mode {
        config.replay.mode = m;
    }
    if let Some(d) = &args.replay_dir {
        config.replay.dir = Some(d.clone());
    }
    config.validate().map_err(|e| Failure::Other(e.to_string()))?;
    Ok(config)
}

pub fn run(args: &RunArgs) -> Result<RunReport, Failure> {
    let corpus = read_corpus(&args.corpus)?;
    let config = run_config(args)?;
    let offline: Option<Arc<dyn Transport>> = match args.backend {
        BackendKind::Mock => Some(Arc::new(FixtureModel::new(&corpus))),
        BackendKind::Http => None,
    };
    let backends = connect(&config, offline).map_err(|e| Failure::Backend(e.to_string()))?;
    let report = run_experiment(&corpus, &config, &backends.client)?;
    if let Some(cache) = &backends.cache {
        if config.replay.mode == ReplayMode::Record {
            cache.compact().map_err(|e| Failure::Other(format!("replay cache: {e}")))?;
        }
    }
    let t = report.tallies;
    eprintln!(
        "{} mentions: {} included, {} excluded, {} failed",
        t.total, t.included, t.excluded, t.failed
    );
    if t.included == 0 && t.failed > 0 {
        let first = report.samples.iter().find_map(|s| match &s.status {
            regrank::harness::SampleStatus::Failed { error } => Some(error.clone()),
            _ => None,
        });
        return Err(Failure::Backend(format!(
            "every scored mention failed, first error: {}",
            first.unwrap_or_default()
        )));
    }
    match &args.out {
        Some(path) => emit_report(&report, path)?,
        None => print!("{}", report_json(&report)),
    }
    if let Some(path) = &args.tables {
        write_text(path, &render_tables(&report))?;
    }
    Ok(report)
}

pub fn build_study(args: &ServeArgs) -> Result<Study, Failure> {
    let mut study = Study::new(read_corpus(&args.corpus)?);
    for (source, path, strategy) in [
        (ReSource::Greedy, &args.greedy, Strategy::Top1),
        (ReSource::Rerank, &args.rerank, Strategy::Rerank),
    ] {
        if let Some(path) = path {
            study = study.with_report(source, &load_report(path)?, strategy);
        }
    }
    if let Some(path) = &args.attention_checks {
        let checks = load_attention_checks(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        study = study.with_attention_checks(checks);
    }
    Ok(study)
}

async fn serve(args: &ServeArgs) -> Result<(), Failure> {
    let study = build_study(args)?;
    let service = match &args.log {
        Some(path) => Service::open(study, path).map_err(|e| Failure::Other(e.to_string()))?,
        None => Service::in_memory(study),
    };
    let images = args
        .images
        .clone()
        .unwrap_or_else(|| args.corpus.parent().unwrap_or(Path::new(".")).join("images"));
    let app = crate::api::router(Arc::new(service), Some(images));
    let listener = tokio::net::TcpListener::bind(&args.addr)
        .await
        .map_err(|e| Failure::Other(format!("{}: {e}", args.addr)))?;
    eprintln!("listening on http://{}", args.addr);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Failure::Other(e.to_string()))
}

/// Execute `cli`, returning the process exit status.
pub fn execute(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Validate { corpus } => read_corpus(&corpus).map(|c| {
            println!(
                "ok: {} image sets, {} dialogues, {} mentions",
                c.image_sets.len(),
                c.dialogues.len(),
                c.mentions().count()
            );
        }),
        Command::Run(args) => run(&args).map(|_| ()),
        Command::Baseline {
            corpus,
            trials,
            seed,
            json,
        } => read_corpus(&corpus).map(|c| {
            let b = random_guess_baseline(&c, trials, seed);
            if json {
                println!("{}", serde_json::to_string_pretty(&b).expect("plain struct"));
            } else {
                println!(
                    "chance accuracy {:.4} over {} mentions x {} trials (analytic {:.4})",
                    b.accuracy, b.mentions, b.trials, b.analytic
                );
            }
        }),
        Command::Tables { report, out } => load_report(&report).map_err(Failure::from).and_then(|r| {
            let text = render_tables(&r);
            match out {
                Some(path) => write_text(&path, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }),
        Command::ServeHumaneval(args) => tokio::runtime::Runtime::new()
            .map_err(|e| Failure::Other(e.to_string()))
            .and_then(|rt| rt.block_on(serve(&args))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
