use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use convo_redirect::pipeline::{self, Analysis, Backend, PipelineError, RunConfig, SegmentationParams};
use convo_redirect::scorer::NGramConfig;
use convo_redirect::segmentation::MergeScope;
use convo_redirect::stats::ShuffleMode;

#[derive(Parser)]
#[command(name = "convo-redirect", version, about = "Redirection analysis for two-party conversation corpora")]
struct Cli {
    /// Worker threads for per-conversation parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a raw export through a field mapping and write the normalized corpus.
    Ingest {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment conversations into sessions.
    Sessions(RunArgs),
    /// Session counts for a range of gap multipliers.
    Nsweep(RunArgs),
    /// Train the n-gram scorer on every session of a corpus.
    TrainLm {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        seg: SegArgs,
        #[command(flatten)]
        lm: LmArgs,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every adjacency window.
    Score(RunArgs),
    /// Per-session role averages and relative redirection.
    Aggregate(RunArgs),
    /// First-k vs last-k session comparison.
    Phases(RunArgs),
    /// Unsuccessful vs control comparison over the first sessions.
    Cohorts(RunArgs),
    /// Actual vs within-session shuffled redirection.
    ShuffleTest(RunArgs),
    /// Distinguishing words of session openers and closers.
    Fightin(RunArgs),
    /// Highest and lowest redirection excerpt per conversation.
    Pairs(RunArgs),
    /// Full pipeline; `--analysis` selects which analyses run.
    Run(RunArgs),
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Corpus JSONL file or normalized corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Field mapping file for raw exports.
    #[arg(long)]
    mapping: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MergeArg {
    WithinBurst,
    WholeConversation,
}

#[derive(Args, Clone)]
struct SegArgs {
    /// Cut when a gap exceeds this multiple of the median reply time.
    #[arg(long = "n", default_value_t = 100.0)]
    n_multiplier: f64,
    #[arg(long, default_value_t = 4)]
    min_turns: usize,
    #[arg(long, value_enum, default_value = "within-burst")]
    merge_scope: MergeArg,
    /// Drop bursts containing a message with meta video=true.
    #[arg(long)]
    drop_video: bool,
    /// File of regexes (one per line) matching automated messages.
    #[arg(long)]
    automated: Option<PathBuf>,
}

impl SegArgs {
    fn params(&self) -> SegmentationParams {
        SegmentationParams {
            n_multiplier: self.n_multiplier,
            min_turns: self.min_turns,
            merge_scope: match self.merge_scope {
                MergeArg::WithinBurst => MergeScope::WithinBurst,
                MergeArg::WholeConversation => MergeScope::WholeConversation,
            },
            drop_video_bursts: self.drop_video,
            automated_patterns: self.automated.clone(),
        }
    }
}

#[derive(Args, Clone)]
struct LmArgs {
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = 0.75)]
    discount: f64,
    #[arg(long, default_value_t = 1)]
    min_count: u64,
    /// Weight of the context unigram cache mixed into each prediction.
    #[arg(long, default_value_t = 0.3)]
    cache_weight: f64,
    #[arg(long, default_value_t = 0.5)]
    cache_decay: f64,
}

impl LmArgs {
    fn config(&self) -> NGramConfig {
        NGramConfig {
            order: self.order,
            discount: self.discount,
            min_count: self.min_count,
            cache_weight: self.cache_weight,
            cache_decay: self.cache_decay,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ShuffleArg {
    WithinRole,
    Full,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    seg: SegArgs,
    #[command(flatten)]
    lm: LmArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pretrained n-gram model; otherwise one is trained on a held-out split.
    #[arg(long)]
    lm_model: Option<PathBuf>,
    /// Fraction of conversations used only for n-gram training (0 = train on all).
    #[arg(long, default_value_t = 0.3)]
    lm_holdout: f64,
    /// Remote scorer base URL; selects the remote backend.
    #[arg(long, env = "REDIRECT_SCORER_URL")]
    scorer_url: Option<String>,
    #[arg(long, env = "REDIRECT_SCORER_TOKEN", hide_env_values = true)]
    scorer_token: Option<String>,
    #[arg(long, default_value = "default")]
    scorer_model: String,
    #[arg(long, default_value_t = 30)]
    scorer_timeout: u64,
    #[arg(long, default_value_t = 2)]
    scorer_retries: u32,
    #[arg(long, default_value_t = 8)]
    scorer_max_in_flight: usize,
    /// Reuse scores from an earlier run.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    no_similarity: bool,
    #[arg(long)]
    no_dependence: bool,
    /// CSV of externally computed orientation (utterance_id,orientation).
    #[arg(long)]
    orientation: Option<PathBuf>,
    /// Analyses for `run` (comma separated); defaults to all.
    #[arg(long, value_delimiter = ',')]
    analysis: Vec<String>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    min_sessions: usize,
    #[arg(long, value_delimiter = ',', default_value = "s2,s3,s4,s6,c3")]
    unsuccessful_codes: Vec<String>,
    #[arg(long, default_value_t = 3)]
    cohort_min_sessions: usize,
    #[arg(long, default_value_t = 3)]
    cohort_first_k: usize,
    #[arg(long, value_enum, default_value = "within-role")]
    shuffle_mode: ShuffleArg,
    #[arg(long, default_value_t = 2000)]
    bootstrap: usize,
    #[arg(long, value_delimiter = ',', default_value = "10,20,50,100,200,500,1000")]
    n_values: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    ngram_max: usize,
    #[arg(long, default_value_t = 500.0)]
    alpha_0: f64,
    #[arg(long, default_value_t = 50)]
    top_k: usize,
    #[arg(long, default_value_t = 4)]
    pair_window: usize,
}

impl RunArgs {
    fn config(&self, analyses: Option<&[Analysis]>, score: bool) -> Result<RunConfig, PipelineError> {
        let mut cfg = RunConfig::new(&self.input.corpus, &self.out);
        cfg.mapping = self.input.mapping.clone();
        cfg.segmentation = self.seg.params();
        cfg.backend = match &self.scorer_url {
            Some(url) => Backend::Remote {
                endpoint: url.clone(),
                model: self.scorer_model.clone(),
                auth_token: self.scorer_token.clone(),
                timeout_secs: self.scorer_timeout,
                retries: self.scorer_retries,
                max_in_flight: self.scorer_max_in_flight,
            },
            None => Backend::Ngram {
                model: self.lm_model.clone(),
                config: self.lm.config(),
                holdout: self.lm_holdout,
            },
        };
        cfg.scores = self.scores.clone();
        cfg.score = score;
        cfg.similarity = !self.no_similarity;
        cfg.dependence = !self.no_dependence;
        cfg.orientation = self.orientation.clone();
        cfg.analyses = match analyses {
            Some(a) => a.iter().copied().collect(),
            None if self.analysis.is_empty() => Analysis::ALL.into_iter().collect(),
            None => self
                .analysis
                .iter()
                .map(|s| s.parse::<Analysis>())
                .collect::<Result<BTreeSet<_>, _>>()
                .map_err(PipelineError::Usage)?,
        };
        cfg.phase_k = self.k;
        cfg.phase_min_sessions = self.min_sessions;
        cfg.unsuccessful_codes = self.unsuccessful_codes.iter().map(|s| s.trim().to_string()).collect();
        cfg.cohort_min_sessions = self.cohort_min_sessions;
        cfg.cohort_first_k = self.cohort_first_k;
        cfg.shuffle_mode = match self.shuffle_mode {
            ShuffleArg::WithinRole => ShuffleMode::WithinRole,
            ShuffleArg::Full => ShuffleMode::Full,
        };
        cfg.bootstrap_resamples = self.bootstrap;
        cfg.n_values = self.n_values.clone();
        cfg.fightin_ngram_max = self.ngram_max;
        cfg.fightin_alpha_0 = self.alpha_0;
        cfg.fightin_top_k = self.top_k;
        cfg.pair_window = self.pair_window;
        cfg.seed = self.seed;
        Ok(cfg)
    }
}

fn run_with(args: &RunArgs, analyses: Option<&[Analysis]>, score: bool) -> Result<(), PipelineError> {
    let cfg = args.config(analyses, score)?;
    let summary = pipeline::run(&cfg)?;
    for w in &summary.warnings {
        log::warn!("{w}");
    }
    println!("{}", cfg.out_dir.join(pipeline::MANIFEST_FILE).display());
    Ok(())
}

fn dispatch(cmd: &Command) -> Result<(), PipelineError> {
    match cmd {
        Command::Ingest { input, out } => {
            let c = pipeline::ingest(&input.corpus, input.mapping.as_deref(), out)?;
            println!(
                "{} conversations, {} utterances -> {}",
                c.conversations.len(),
                c.utterance_count(),
                out.display()
            );
            Ok(())
        }
        Command::TrainLm { input, seg, lm, out } => {
            let model = pipeline::train_lm(&input.corpus, input.mapping.as_deref(), &seg.params(), &lm.config(), out)?;
            println!("{} ({} types) -> {}", convo_redirect::Scorer::model_id(&model), model.vocabulary().len(), out.display());
            Ok(())
        }
        Command::Sessions(a) => run_with(a, Some(&[]), false),
        Command::Nsweep(a) => run_with(a, Some(&[Analysis::NSweep]), false),
        Command::Score(a) | Command::Aggregate(a) => run_with(a, Some(&[]), true),
        Command::Phases(a) => run_with(a, Some(&[Analysis::Phases]), false),
        Command::Cohorts(a) => run_with(a, Some(&[Analysis::Cohorts]), false),
        Command::ShuffleTest(a) => run_with(a, Some(&[Analysis::Shuffle]), false),
        Command::Fightin(a) => run_with(a, Some(&[Analysis::Fightin]), false),
        Command::Pairs(a) => run_with(a, Some(&[Analysis::Pairs]), false),
        Command::Run(a) => run_with(a, None, false),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
