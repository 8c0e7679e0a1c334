//! Command-line front end. State lives in a data directory holding the
//! corpus dump, the append-only vote log and the working set.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, LineWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ethicrowd_core::aggregate::{render_stats_report, AggregationConfig, TieRule};
use ethicrowd_core::classifier::{
    bucket_agreement, bucket_score, build_dataset, evaluate, score_histogram, text_score, train,
    BucketingConfig, EmbeddingSet, FileScorer, MlpModel, TrainConfig,
};
use ethicrowd_core::clock::SystemClock;
use ethicrowd_core::corpus::{parse_records, Corpus, GoldPhase};
use ethicrowd_core::export::{export_dataset, ExportConfig};
use ethicrowd_core::sessioning::{BatchConfig, Sampling};
use ethicrowd_core::simulator::{
    build_replay, simulate_concurrent, simulate_population, PopulationSpec, PINNED_REPLAY,
};
use ethicrowd_core::trust::{render_trust_report, TrustPolicy};
use ethicrowd_core::votes::{read_log, DEFAULT_TRAILING_RUN};
use ethicrowd_core::{Error, Reaction, Store};
use serde::Serialize;

use crate::api::{self, ApiConfig, AppState};

#[derive(Debug, Parser)]
#[command(
    name = "ethicrowd",
    version,
    about = "Crowd annotation service and ethics classifier toolkit"
)]
pub struct Cli {
    /// Directory holding corpus.jsonl, votes.jsonl and pool.json.
    #[arg(
        long,
        global = true,
        env = "ETHICROWD_DATA_DIR",
        default_value = "ethicrowd-data"
    )]
    pub data_dir: PathBuf,
    /// Corpus dump path; defaults to <data-dir>/corpus.jsonl.
    #[arg(long, global = true, env = "ETHICROWD_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// Vote audit log path; defaults to <data-dir>/votes.jsonl.
    #[arg(long, global = true, env = "ETHICROWD_VOTE_LOG")]
    pub vote_log: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adds prompt records from a JSON-lines file.
    Ingest { file: PathBuf },
    /// Marks a prompt as a pre- or post-test gold prompt.
    Gold {
        prompt_id: String,
        #[arg(long)]
        label: Reaction,
        #[arg(long)]
        phase: GoldPhase,
    },
    /// Runs the HTTP service.
    Serve(ServeArgs),
    /// Runs a simulated annotator population against the stored corpus.
    Simulate(SimulateArgs),
    /// Prints per-prompt labels; optionally fixes the working set.
    Aggregate {
        #[command(flatten)]
        agg: AggArgs,
        #[arg(long)]
        prompt: Option<String>,
        /// Record the retained prompts as the working set.
        #[arg(long)]
        set_aside: bool,
    },
    /// Prints the label and coverage tables.
    Stats {
        #[command(flatten)]
        agg: AggArgs,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Scores annotators; `--apply` excludes flagged users' votes.
    Trust {
        #[arg(long)]
        user: Option<String>,
        #[arg(long)]
        apply: bool,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Writes an anonymised export (records.jsonl and manifest.json).
    Export(ExportArgs),
    /// Trains the embedding classifier on the working-set labels.
    Train(TrainArgs),
    /// Evaluates a checkpoint on the working-set labels.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[command(flatten)]
        agg: AggArgs,
    },
    /// Histogram and buckets of precomputed text-scorer output.
    ScoreHistogram {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        bin_width: f64,
        #[arg(long, default_value_t = 0.4)]
        low: f64,
        #[arg(long, default_value_t = 0.6)]
        high: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    Uniform,
    LeastVoted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TieArg {
    Unclear,
    DeterministicOrder,
}

#[derive(Debug, Args)]
pub struct AggArgs {
    #[arg(long, default_value_t = 0.20)]
    pub tau: f64,
    #[arg(long, default_value_t = 1)]
    pub min_votes: usize,
    #[arg(long, value_enum, default_value_t = TieArg::Unclear)]
    pub tie_rule: TieArg,
    #[arg(long)]
    pub allow_tau_outside_band: bool,
}

impl AggArgs {
    fn config(&self) -> AggregationConfig {
        AggregationConfig {
            tau: self.tau,
            min_votes: self.min_votes,
            tie_rule: match self.tie_rule {
                TieArg::Unclear => TieRule::Unclear,
                TieArg::DeterministicOrder => TieRule::DeterministicOrder,
            },
            allow_tau_outside_band: self.allow_tau_outside_band,
        }
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "ETHICROWD_BIND", default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, env = "ETHICROWD_OPERATOR_TOKEN", hide_env_values = true)]
    pub operator_token: String,
    #[arg(
        long,
        env = "ETHICROWD_EXPORT_SALT",
        hide_env_values = true,
        default_value = ""
    )]
    pub export_salt: String,
    #[arg(long, default_value = "")]
    pub base_path: String,
    #[arg(long, default_value_t = 24 * 3600)]
    pub idle_timeout_secs: u64,
    #[arg(long, value_enum, default_value_t = SamplingArg::Uniform)]
    pub sampling: SamplingArg,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Population spec (JSON).
    #[arg(long, required_unless_present = "replay_fixture")]
    pub spec: Option<PathBuf>,
    /// Run users on this many threads instead of serially.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Replace the data directory with the pinned replay campaign.
    #[arg(long, conflicts_with = "spec")]
    pub replay_fixture: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Hash salt, hex encoded.
    #[arg(long, env = "ETHICROWD_EXPORT_SALT", hide_env_values = true)]
    pub salt: String,
    #[arg(long)]
    pub include_set_aside: bool,
    #[arg(long)]
    pub include_discarded: bool,
    #[arg(long)]
    pub reveal_gold_labels: bool,
    #[arg(long)]
    pub no_votes: bool,
    #[arg(long)]
    pub no_gold: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Three comma-separated hidden layer sizes.
    #[arg(long, default_value = "512,256,128", value_parser = parse_hidden)]
    pub hidden: [usize; 3],
    #[arg(long)]
    pub class_weighting: bool,
}

fn parse_hidden(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three sizes".to_string())
}

/// Error printed as one JSON line on stderr.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: e.code().into(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

impl CliError {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

struct DataDir {
    corpus: PathBuf,
    votes: PathBuf,
    pool: PathBuf,
}

impl DataDir {
    fn new(cli: &Cli) -> CliResult<Self> {
        fs::create_dir_all(&cli.data_dir)?;
        Ok(Self {
            corpus: cli
                .corpus
                .clone()
                .unwrap_or_else(|| cli.data_dir.join("corpus.jsonl")),
            votes: cli
                .vote_log
                .clone()
                .unwrap_or_else(|| cli.data_dir.join("votes.jsonl")),
            pool: cli.data_dir.join("pool.json"),
        })
    }

    fn load_corpus(&self) -> CliResult<Corpus> {
        if !self.corpus.exists() {
            return Ok(Corpus::new());
        }
        Corpus::load_dump(BufReader::new(File::open(&self.corpus)?))
            .map_err(|e| CliError::new("CorpusLoadError", e.to_string()))
    }

    fn save_corpus(&self, corpus: &Corpus) -> CliResult {
        let tmp = self.corpus.with_extension("jsonl.tmp");
        let mut w = BufWriter::new(File::create(&tmp)?);
        corpus.dump(&mut w)?;
        w.flush()?;
        drop(w);
        fs::rename(tmp, &self.corpus)?;
        Ok(())
    }

    /// Store with the corpus, replayed votes and working set; new votes
    /// and amendments append to the log.
    fn open_store(&self) -> CliResult<Store> {
        let store = Store::with_corpus(Arc::new(SystemClock), self.load_corpus()?);
        if self.votes.exists() {
            let votes = read_log(BufReader::new(File::open(&self.votes)?))?;
            store.replay_votes(votes)?;
        }
        if self.pool.exists() {
            let pool: Option<BTreeSet<String>> =
                serde_json::from_reader(BufReader::new(File::open(&self.pool)?))?;
            store.set_working_pool(pool);
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.votes)?;
        store.set_vote_log(Box::new(LineWriter::new(log)));
        Ok(store)
    }

    fn save_pool(&self, store: &Store) -> CliResult {
        fs::write(&self.pool, serde_json::to_vec(&store.working_pool())?)?;
        Ok(())
    }
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> CliResult {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Runs one command, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    let dir = DataDir::new(&cli)?;
    match cli.command {
        Command::Ingest { file } => {
            let records = parse_records(BufReader::new(File::open(&file)?))?;
            let mut corpus = dir.load_corpus()?;
            let stats = corpus.ingest(&records, chrono::Utc::now())?;
            dir.save_corpus(&corpus)?;
            print_json(out, &stats)
        }
        Command::Gold {
            prompt_id,
            label,
            phase,
        } => {
            let mut corpus = dir.load_corpus()?;
            corpus.register_gold(&prompt_id, label, phase)?;
            dir.save_corpus(&corpus)?;
            print_json(out, &corpus.stats())
        }
        Command::Serve(args) => serve(&dir, args),
        Command::Simulate(args) => simulate(&dir, args, out),
        Command::Aggregate {
            agg,
            prompt,
            set_aside,
        } => {
            let store = dir.open_store()?;
            let config = agg.config();
            if let Some(id) = prompt {
                return print_json(out, &store.aggregate_prompt(&id, &config)?);
            }
            if set_aside {
                store.set_aside(&config)?;
                dir.save_pool(&store)?;
            }
            for l in store.aggregate_all(&config)? {
                serde_json::to_writer(&mut *out, &l)?;
                writeln!(out)?;
            }
            Ok(())
        }
        Command::Stats { agg, format } => {
            let store = dir.open_store()?;
            let stats = store.distribution_stats(&agg.config())?;
            match format {
                Format::Csv => Ok(write!(out, "{}", render_stats_report(&stats))?),
                Format::Json => print_json(out, &stats),
            }
        }
        Command::Trust {
            user,
            apply,
            format,
        } => {
            let store = dir.open_store()?;
            let policy = TrustPolicy::default();
            let records = match (&user, apply) {
                (Some(u), false) => vec![store.score_user(u, &policy)?],
                (_, true) => store.apply_trust(&policy)?,
                (None, false) => store.trust_report(&policy)?,
            };
            store.flush_log()?;
            match format {
                Format::Csv => Ok(write!(out, "{}", render_trust_report(&records))?),
                Format::Json => print_json(out, &records),
            }
        }
        Command::Export(args) => {
            let salt = hex::decode(&args.salt)
                .map_err(|e| CliError::new("InvalidConfig", format!("salt: {e}")))?;
            let store = dir.open_store()?;
            let config = ExportConfig {
                salt,
                include_gold: !args.no_gold,
                include_discarded: args.include_discarded,
                include_set_aside: args.include_set_aside,
                include_votes: !args.no_votes,
                reveal_gold_labels: args.reveal_gold_labels,
                ..Default::default()
            };
            let bundle = export_dataset(&store.snapshot(), &config)?;
            fs::create_dir_all(&args.out)?;
            let records = bundle.records_bytes()?;
            fs::write(args.out.join("records.jsonl"), &records)?;
            fs::write(args.out.join("manifest.json"), bundle.manifest_bytes()?)?;
            print_json(
                out,
                &serde_json::json!({
                    "records": bundle.manifest.record_count,
                    "sha256": hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&records)),
                }),
            )
        }
        Command::Train(args) => {
            let store = dir.open_store()?;
            let embeddings = EmbeddingSet::load(&args.embeddings)?;
            let examples = build_dataset(
                &embeddings,
                &store.aggregate_all(&AggregationConfig::default())?,
            )?;
            let config = TrainConfig {
                split: args.split,
                epochs: args.epochs,
                batch_size: args.batch_size,
                learning_rate: args.learning_rate,
                rng_seed: args.seed,
                hidden: args.hidden,
                class_weighting: args.class_weighting,
            };
            let (model, metrics) = train(&examples, &config)?;
            model.save(&args.out)?;
            print_json(
                out,
                &serde_json::json!({
                    "digest": model.digest(),
                    "layer_dims": model.layer_dims(),
                    "metrics": metrics,
                }),
            )
        }
        Command::Evaluate {
            model,
            embeddings,
            agg,
        } => {
            let store = dir.open_store()?;
            let model = MlpModel::load(&model)?;
            let embeddings = EmbeddingSet::load(&embeddings)?;
            let examples = build_dataset(&embeddings, &store.aggregate_all(&agg.config())?)?;
            print_json(out, &evaluate(&model, &examples)?)
        }
        Command::ScoreHistogram {
            scores,
            bin_width,
            low,
            high,
        } => score_report(&dir, &scores, bin_width, BucketingConfig { low, high }, out),
    }
}

fn score_report(
    dir: &DataDir,
    path: &Path,
    bin_width: f64,
    buckets: BucketingConfig,
    out: &mut dyn Write,
) -> CliResult {
    buckets.validate()?;
    let scorer = FileScorer::load(path)?;
    let store = dir.open_store()?;
    let labels = store.aggregate_all(&AggregationConfig::default())?;
    let mut scores = Vec::new();
    let mut pairs = Vec::new();
    let mut bucket_counts = [0usize; 3];
    for l in labels.iter().filter(|l| l.retained) {
        let Some(prompt) = store.prompt(&l.prompt_id) else {
            continue;
        };
        let s = match text_score(&scorer, &prompt) {
            Ok(s) => s,
            Err(Error::ProviderUnavailable(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        scores.push(s);
        bucket_counts[bucket_score(s, &buckets)?.index()] += 1;
        if let Some(r) = l.label.as_reaction() {
            pairs.push((s, r));
        }
    }
    print_json(
        out,
        &serde_json::json!({
            "scored": scores.len(),
            "histogram": score_histogram(&scores, bin_width)?,
            "buckets": {
                "ethical": bucket_counts[0],
                "unethical": bucket_counts[1],
                "unclear": bucket_counts[2],
            },
            "agreement_with_labels": bucket_agreement(&pairs, &buckets)?,
        }),
    )
}

fn simulate(dir: &DataDir, args: SimulateArgs, out: &mut dyn Write) -> CliResult {
    if args.replay_fixture {
        let outcome = build_replay(PINNED_REPLAY)?;
        dir.save_corpus(&outcome.store.read_corpus(|c| c.clone()))?;
        fs::write(&dir.votes, &outcome.vote_log)?;
        dir.save_pool(&outcome.store)?;
        return print_json(
            out,
            &serde_json::json!({
                "votes": outcome.store.vote_count(),
                "evaluated_after_first_phase": outcome.evaluated_after_first_phase,
                "labels": outcome.stats.labels,
                "coverage": outcome.stats.coverage,
            }),
        );
    }
    let path = args.spec.expect("clap requires --spec");
    let spec: PopulationSpec = serde_json::from_reader(BufReader::new(File::open(&path)?))?;
    let store = dir.open_store()?;
    let report = match args.threads {
        Some(n) => simulate_concurrent(&store, &spec, n)?,
        None => simulate_population(&store, &spec, None)?,
    };
    store.flush_log()?;
    print_json(out, &report)
}

fn serve(dir: &DataDir, args: ServeArgs) -> CliResult {
    if args.operator_token.is_empty() {
        return Err(CliError::new(
            "InvalidConfig",
            "operator token must not be empty",
        ));
    }
    let mut store = dir.open_store()?;
    store.set_idle_timeout(chrono::Duration::seconds(args.idle_timeout_secs as i64));
    let config = ApiConfig {
        bind: args.bind,
        operator_token: args.operator_token,
        base_path: args.base_path,
        idle_timeout: Duration::from_secs(args.idle_timeout_secs),
        batch: BatchConfig {
            sampling: match args.sampling {
                SamplingArg::Uniform => Sampling::Uniform,
                SamplingArg::LeastVoted => Sampling::LeastVoted,
            },
            ..Default::default()
        },
        trailing_run_length: DEFAULT_TRAILING_RUN,
        export_salt: hex::decode(&args.export_salt)
            .map_err(|e| CliError::new("InvalidConfig", format!("export salt: {e}")))?,
        ..Default::default()
    };
    let state = AppState {
        store: Arc::new(store),
        config: Arc::new(config),
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(api::serve(state, api::shutdown_signal()))
        .map_err(|e| {
            let msg = e.to_string();
            let code = if msg.starts_with("BindFailure") {
                "BindFailure"
            } else {
                "ServeError"
            };
            CliError::new(code, msg)
        })
}
