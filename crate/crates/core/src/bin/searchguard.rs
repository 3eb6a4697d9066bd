//! Command-line front end for the detection pipeline.
//!
//! Exit codes: 0 on success, 2 on invalid input or configuration, 3 on
//! runtime failures (I/O, serialization).

use clap::{Args, Parser, Subcommand};
use searchguard::attack::{poison_corpus, AttackKind, TriggerSpec};
use searchguard::corpus::{load_corpus, word_frequencies, Corpus, Token};
use searchguard::detector::{NormalizeScope, ThresholdMode};
use searchguard::error::Error;
use searchguard::eval::RunReport;
use searchguard::followup::SynonymTable;
use searchguard::pipeline::{
    analyze_run, baseline_reports, dataset_anr, evaluate, run_detection, BaselineParams,
    PipelineConfig,
};
use searchguard::synth::{generate_corpus, SynthConfig};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

/// Environment variable consulted when `--seed` is absent.
const SEED_ENV: &str = "MTPL_SEED";
const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "searchguard", version, about = "Backdoor detection for code-search rankers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a corpus, or generate a synthetic one.
    Ingest(IngestArgs),
    /// Poison a fraction of a corpus and record the ground-truth ledger.
    Attack(AttackArgs),
    /// Run metamorphic violation detection against a simulated victim.
    Detect(DetectArgs),
    /// Run the reference defenses (clustering, spectral, perplexity).
    Baseline(DetectArgs),
    /// Detect, then mine and cross-validate trigger candidates.
    Analyze(DetectArgs),
    /// Sweep attack strengths and compare all methods; emits CSV.
    Eval(EvalArgs),
}

#[derive(Args)]
struct CorpusSource {
    /// JSONL corpus file (`{"id", "query", "code"}` per line).
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Generate a synthetic corpus with this many records instead.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Master seed; falls back to $MTPL_SEED, then 42.
    #[arg(long)]
    seed: Option<u64>,
}

impl CorpusSource {
    fn seed(&self) -> Result<u64, Error> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .parse()
                .map_err(|_| Error::validation(format!("{SEED_ENV}={v} is not a valid u64"))),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }

    fn load(&self) -> Result<Corpus, Error> {
        match (&self.input, self.synthetic) {
            (Some(path), None) => load_corpus(path),
            (None, Some(records)) => generate_corpus(&SynthConfig { records, seed: self.seed()? }),
            (None, None) => Err(Error::validation(
                "either --input or --synthetic is required".to_string(),
            )),
            (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    source: CorpusSource,
    /// Write the validated corpus to this JSONL file.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AttackSpecArgs {
    /// Attack family: dci-fixed, dci-pcfg, ir, cu.
    #[arg(long, default_value = "dci-fixed")]
    kind: AttackKind,
    /// Target query word the backdoor keys on.
    #[arg(long, default_value = "file")]
    target: String,
    /// Trigger payload (dead-code line for dci-fixed, identifier suffix for ir).
    #[arg(long)]
    payload: Option<String>,
}

impl AttackSpecArgs {
    fn spec(&self, seed: u64) -> Result<TriggerSpec, Error> {
        let target = Token::new(&self.target)
            .ok_or_else(|| Error::validation(format!("invalid target word {:?}", self.target)))?;
        let payload = match (&self.payload, self.kind) {
            (Some(p), _) => p.clone(),
            (None, AttackKind::DciFixed) => "if False: logging.info('telemetry')".to_string(),
            (None, AttackKind::Ir) => "xq".to_string(),
            (None, _) => String::new(),
        };
        TriggerSpec::new(self.kind, target, payload, seed)
    }
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    source: CorpusSource,
    #[command(flatten)]
    attack: AttackSpecArgs,
    /// Fraction of target-matching snippets to poison.
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    /// Output path for the poisoned corpus.
    #[arg(long)]
    output: PathBuf,
    /// Output path for the ground-truth ledger.
    #[arg(long)]
    ledger: Option<PathBuf>,
}

#[derive(Args)]
struct DetectionArgs {
    /// Rank-list length.
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Rank at which the poisoned variant is planted (1-based).
    #[arg(long, default_value_t = 10)]
    insert_rank: usize,
    /// Number of most frequent query words treated as suspicious.
    #[arg(long, default_value_t = 10)]
    n_targets: usize,
    /// Queries sampled per suspicious-word group.
    #[arg(long, default_value_t = 30)]
    queries_per_target: usize,
    /// Weight of the rank displacement; the score displacement gets 1 - w1.
    #[arg(long, default_value_t = 0.7)]
    w1: f64,
    /// Smoothing constant inside the displacement powers.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Fixed decision threshold; default is the mean of the final scores.
    #[arg(long)]
    threshold: Option<f64>,
    /// Normalization scope: run (pooled) or group (per suspicious word).
    #[arg(long, default_value = "run", value_parser = parse_scope)]
    normalize_scope: NormalizeScope,
    /// Backdoor boost strength of the simulated victim.
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Match snippet-level poison rate to the query-level rate.
    #[arg(long, default_value_t = false)]
    equalize_poison_rate: bool,
    /// Synonym lexicon JSON; defaults to the built-in table.
    #[arg(long)]
    synonyms: Option<PathBuf>,
}

fn parse_scope(s: &str) -> Result<NormalizeScope, String> {
    match s {
        "run" => Ok(NormalizeScope::Run),
        "group" => Ok(NormalizeScope::Group),
        other => Err(format!("unknown scope {other:?}; expected run or group")),
    }
}

impl DetectionArgs {
    fn pipeline_config(&self, seed: u64) -> PipelineConfig {
        PipelineConfig {
            seed,
            k: self.k,
            insert_rank: self.insert_rank,
            n_targets: self.n_targets,
            queries_per_target: self.queries_per_target,
            w1: self.w1,
            epsilon: self.epsilon,
            threshold_mode: match self.threshold {
                Some(t) => ThresholdMode::Fixed(t),
                None => ThresholdMode::Mean,
            },
            normalize_scope: self.normalize_scope,
            beta: self.beta,
            jobs: self.jobs,
            equalize_poison_rate: self.equalize_poison_rate,
        }
    }

    fn synonyms(&self) -> Result<SynonymTable, Error> {
        match &self.synonyms {
            Some(path) => SynonymTable::load(path),
            None => Ok(SynonymTable::builtin()),
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    source: CorpusSource,
    #[command(flatten)]
    attack: AttackSpecArgs,
    #[command(flatten)]
    detection: DetectionArgs,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: CorpusSource,
    #[command(flatten)]
    attack: AttackSpecArgs,
    #[command(flatten)]
    detection: DetectionArgs,
    /// Comma-separated boost strengths to sweep.
    #[arg(long, default_value = "0.1,0.2,0.3,0.5", value_delimiter = ',')]
    betas: Vec<f64>,
    /// Write the CSV table here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn emit<T: Serialize>(value: &T, output: Option<&PathBuf>) -> Result<(), Error> {
    let json = serde_json::to_string_pretty(value)?;
    match output {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary {
    queries: usize,
    snippets: usize,
    distinct_query_words: usize,
}

fn cmd_ingest(args: &IngestArgs) -> Result<(), Error> {
    let corpus = args.source.load()?;
    if let Some(path) = &args.output {
        corpus.save(path)?;
    }
    let freq = word_frequencies(&corpus);
    emit(
        &IngestSummary {
            queries: corpus.queries.len(),
            snippets: corpus.codebase.len(),
            distinct_query_words: freq.counts.len(),
        },
        None,
    )
}

fn cmd_attack(args: &AttackArgs) -> Result<(), Error> {
    let seed = args.source.seed()?;
    let corpus = args.source.load()?;
    let spec = args.attack.spec(seed)?;
    let (poisoned, ledger) = poison_corpus(&corpus, &spec, args.rate, seed)?;
    poisoned.save(&args.output)?;
    if let Some(path) = &args.ledger {
        std::fs::write(path, serde_json::to_string_pretty(&ledger)? + "\n")?;
    }
    eprintln!(
        "poisoned {} of {} snippets ({})",
        ledger.entries.len(),
        corpus.codebase.len(),
        spec.kind
    );
    Ok(())
}

#[derive(Serialize)]
struct DetectReport {
    config: PipelineConfig,
    threshold: f64,
    anr: Option<f64>,
    verdicts: Vec<searchguard::detector::DetectionVerdict>,
    report: Option<RunReport>,
    notes: Vec<String>,
}

fn cmd_detect(args: &DetectArgs) -> Result<(), Error> {
    let seed = args.source.seed()?;
    let corpus = args.source.load()?;
    let spec = args.attack.spec(seed)?;
    let config = args.detection.pipeline_config(seed);
    let synonyms = args.detection.synonyms()?;
    let prepared = run_detection(&corpus, &spec, None, &synonyms, &config)?;
    let anr = dataset_anr(&prepared.dataset)?;
    let report = searchguard::eval::confusion(
        &prepared.outcome.run.verdicts,
        &prepared.dataset.ground_truth,
    )
    .ok()
    .map(|c| RunReport {
        method: "metamorphic".to_string(),
        attack: spec.kind.to_string(),
        target: spec.target.as_str().to_string(),
        accuracy: searchguard::eval::accuracy(&c),
        precision: searchguard::eval::precision(&c),
        recall: searchguard::eval::recall(&c),
        f1: searchguard::eval::f1(&c),
        anr,
        seed,
        degenerate: searchguard::eval::degenerate_metrics(&c),
    });
    emit(
        &DetectReport {
            config,
            threshold: prepared.outcome.run.threshold,
            anr,
            verdicts: prepared.outcome.run.verdicts.clone(),
            report,
            notes: prepared.dataset.notes.clone(),
        },
        args.output.as_ref(),
    )
}

fn cmd_baseline(args: &DetectArgs) -> Result<(), Error> {
    let seed = args.source.seed()?;
    let corpus = args.source.load()?;
    let spec = args.attack.spec(seed)?;
    let config = args.detection.pipeline_config(seed);
    let synonyms = args.detection.synonyms()?;
    let prepared = run_detection(&corpus, &spec, None, &synonyms, &config)?;
    let anr = dataset_anr(&prepared.dataset)?;
    let reports = baseline_reports(&prepared.dataset, &spec, &BaselineParams::default(), seed, anr)?;
    emit(&reports, args.output.as_ref())
}

fn cmd_analyze(args: &DetectArgs) -> Result<(), Error> {
    let seed = args.source.seed()?;
    let corpus = args.source.load()?;
    let spec = args.attack.spec(seed)?;
    let config = args.detection.pipeline_config(seed);
    let synonyms = args.detection.synonyms()?;
    let prepared = run_detection(&corpus, &spec, None, &synonyms, &config)?;
    let report = analyze_run(
        &prepared.dataset,
        &prepared.outcome,
        &prepared.backend,
        &config.hsv_config()?,
    )?;
    emit(&report, args.output.as_ref())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let seed = args.source.seed()?;
    let corpus = args.source.load()?;
    let spec = args.attack.spec(seed)?;
    let synonyms = args.detection.synonyms()?;
    let mut rows = vec![format!("beta,{}", RunReport::csv_header())];
    for &beta in &args.betas {
        let mut config = args.detection.pipeline_config(seed);
        config.beta = beta;
        let reports = evaluate(&corpus, &spec, &synonyms, &config, &BaselineParams::default())?;
        for r in reports {
            rows.push(format!("{beta},{}", r.csv_row()));
        }
    }
    let csv = rows.join("\n") + "\n";
    match &args.output {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Validation(_) | Error::Precondition(_) | Error::Parse { .. } => {
                    ExitCode::from(2)
                }
                Error::Io(_) | Error::Json(_) => ExitCode::from(3),
            }
        }
    }
}
