//! End-to-end orchestration: ingest, segment, score, aggregate, analyze
//! and write artifacts.
//!
//! Every analytic CSV is built from rows in a fixed order and formatted
//! with Rust's shortest round-trip float printing, so two runs with the
//! same corpus, configuration and seed produce identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregate::{
    cohort_filter, early_means, phase_slices, summarize, AggregateError, CohortCandidate, CohortConfig,
    Metric, PhaseRow, Quantity, SessionSummary,
};
use crate::corpus::{load_corpus, AutomatedFilter, Corpus, CorpusError, FieldMapping, Role};
use crate::fightin_words::{boundary_validation, FightinError, TermContrast};
use crate::measures::{
    extract_extreme_pairs, load_orientation, score_corpus, Embedder, MeasureError, MeasureOptions,
    OrientationScores, ScoreRecord, TfIdf,
};
use crate::scorer::ngram::{train_ngram, NGramConfig, NGramModel};
use crate::scorer::remote::{RemoteConfig, RemoteScorer};
use crate::scorer::{ScoreError, Scorer};
use crate::seed::derive_seed;
use crate::segmentation::{
    n_sweep, segment_corpus, ConversationSessions, MergeScope, SegmentationConfig, SegmentationError,
    Session, SessionManifestEntry,
};
use crate::stats::{
    bootstrap_ci, mann_whitney_u, mean, wilcoxon_signed_rank, Alternative, ShuffleMode, StatsError, TestResult,
};

/// Significance level used when the comparison table labels a difference.
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Fightin(#[from] FightinError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{path}: {message}")]
    Output { path: String, message: String },
    #[error("{0}")]
    Analysis(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 2,
            _ => 1,
        }
    }

    fn output(path: &Path, e: impl std::fmt::Display) -> Self {
        PipelineError::Output {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    #[serde(rename = "nsweep")]
    NSweep,
    Phases,
    Roles,
    Cohorts,
    Shuffle,
    Fightin,
    Pairs,
    Compare,
}

impl Analysis {
    pub const ALL: [Analysis; 8] = [
        Analysis::NSweep,
        Analysis::Phases,
        Analysis::Roles,
        Analysis::Cohorts,
        Analysis::Shuffle,
        Analysis::Fightin,
        Analysis::Pairs,
        Analysis::Compare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Analysis::NSweep => "nsweep",
            Analysis::Phases => "phases",
            Analysis::Roles => "roles",
            Analysis::Cohorts => "cohorts",
            Analysis::Shuffle => "shuffle",
            Analysis::Fightin => "fightin",
            Analysis::Pairs => "pairs",
            Analysis::Compare => "compare",
        }
    }

    pub fn needs_scores(self) -> bool {
        !matches!(self, Analysis::NSweep | Analysis::Fightin)
    }
}

impl FromStr for Analysis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        if s == "phase" {
            return Ok(Analysis::Phases);
        }
        if s == "cohort" {
            return Ok(Analysis::Cohorts);
        }
        Analysis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown analysis {s:?}"))
    }
}

/// Serializable view of [`SegmentationConfig`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentationParams {
    pub n_multiplier: f64,
    pub min_turns: usize,
    pub merge_scope: MergeScope,
    pub drop_video_bursts: bool,
    /// One regex per line; matching utterances are removed.
    pub automated_patterns: Option<PathBuf>,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        let d = SegmentationConfig::default();
        SegmentationParams {
            n_multiplier: d.n_multiplier,
            min_turns: d.min_turns,
            merge_scope: d.merge_scope,
            drop_video_bursts: d.drop_video_bursts,
            automated_patterns: None,
        }
    }
}

impl SegmentationParams {
    pub fn build(&self) -> Result<SegmentationConfig, PipelineError> {
        let automated = match &self.automated_patterns {
            Some(p) => AutomatedFilter::from_file(p)?,
            None => AutomatedFilter::default(),
        };
        let cfg = SegmentationConfig {
            n_multiplier: self.n_multiplier,
            min_turns: self.min_turns,
            merge_scope: self.merge_scope,
            drop_video_bursts: self.drop_video_bursts,
            automated,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    /// Built-in n-gram model. Without `model`, one is trained on a
    /// held-out fraction of conversations that are then left unscored;
    /// `holdout = 0` trains on everything (in-sample).
    Ngram {
        model: Option<PathBuf>,
        config: NGramConfig,
        holdout: f64,
    },
    Remote {
        endpoint: String,
        model: String,
        #[serde(skip)]
        auth_token: Option<String>,
        timeout_secs: u64,
        retries: u32,
        max_in_flight: usize,
    },
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Ngram {
            model: None,
            config: NGramConfig::default(),
            holdout: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub mapping: Option<PathBuf>,
    pub segmentation: SegmentationParams,
    pub backend: Backend,
    /// Reuse a `scores.jsonl` from an earlier run instead of scoring.
    pub scores: Option<PathBuf>,
    /// Score even when no selected analysis needs it.
    pub score: bool,
    pub similarity: bool,
    pub dependence: bool,
    pub orientation: Option<PathBuf>,
    pub analyses: BTreeSet<Analysis>,
    pub phase_k: usize,
    pub phase_min_sessions: usize,
    pub unsuccessful_codes: BTreeSet<String>,
    pub cohort_min_sessions: usize,
    pub cohort_first_k: usize,
    pub shuffle_mode: ShuffleMode,
    pub bootstrap_resamples: usize,
    pub n_values: Vec<f64>,
    pub fightin_ngram_max: usize,
    pub fightin_alpha_0: f64,
    /// Rows kept per distinguishing-word table; 0 keeps all.
    pub fightin_top_k: usize,
    pub pair_window: usize,
    pub seed: u64,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(corpus: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        let cohort = CohortConfig::default();
        RunConfig {
            corpus: corpus.into(),
            mapping: None,
            segmentation: SegmentationParams::default(),
            backend: Backend::default(),
            scores: None,
            score: false,
            similarity: true,
            dependence: true,
            orientation: None,
            analyses: Analysis::ALL.into_iter().collect(),
            phase_k: 5,
            phase_min_sessions: 10,
            unsuccessful_codes: cohort.unsuccessful_codes,
            cohort_min_sessions: cohort.min_sessions,
            cohort_first_k: cohort.first_k,
            shuffle_mode: ShuffleMode::WithinRole,
            bootstrap_resamples: 2000,
            n_values: vec![10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0],
            fightin_ngram_max: 1,
            fightin_alpha_0: 500.0,
            fightin_top_k: 50,
            pair_window: 4,
            seed: 0,
            out_dir: out_dir.into(),
        }
    }

    fn needs_scores(&self) -> bool {
        self.score || self.analyses.iter().any(|a| a.needs_scores())
    }

    /// Checks everything that can be checked without reading the corpus.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let must_exist = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(PipelineError::Usage(format!("{what} {} does not exist", p.display())))
            }
        };
        must_exist(&self.corpus, "corpus")?;
        for (p, what) in [
            (&self.mapping, "mapping file"),
            (&self.segmentation.automated_patterns, "automated-pattern file"),
            (&self.scores, "scores file"),
            (&self.orientation, "orientation file"),
        ] {
            if let Some(p) = p {
                must_exist(p, what)?;
            }
        }
        match &self.backend {
            Backend::Ngram { model, holdout, .. } => {
                if let Some(m) = model {
                    must_exist(m, "language model")?;
                }
                if !(0.0..1.0).contains(holdout) {
                    return Err(PipelineError::Usage(format!("holdout must be in [0,1), got {holdout}")));
                }
            }
            Backend::Remote { endpoint, .. } => {
                if endpoint.trim().is_empty() {
                    return Err(PipelineError::Usage("remote scorer endpoint is empty".into()));
                }
            }
        }
        if self.phase_k == 0 || self.phase_min_sessions < 2 * self.phase_k {
            return Err(PipelineError::Usage(format!(
                "need k >= 1 and min-sessions >= 2k, got k={} min-sessions={}",
                self.phase_k, self.phase_min_sessions
            )));
        }
        if self.analyses.contains(&Analysis::NSweep)
            && (self.n_values.is_empty() || self.n_values.iter().any(|n| !(n.is_finite() && *n > 0.0)))
        {
            return Err(PipelineError::Usage("n-values must be positive".into()));
        }
        if self.bootstrap_resamples == 0 {
            return Err(PipelineError::Usage("bootstrap resamples must be positive".into()));
        }
        if !(self.fightin_alpha_0.is_finite() && self.fightin_alpha_0 > 0.0) {
            return Err(PipelineError::Usage("alpha-0 must be positive".into()));
        }
        if !(1..=2).contains(&self.fightin_ngram_max) {
            return Err(PipelineError::Usage("ngram-max must be 1 or 2".into()));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Loads a raw JSONL export through `mapping`, or a directory written by
/// [`Corpus::write_normalized`].
pub fn load_input(path: &Path, mapping: Option<&Path>) -> Result<Corpus, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::Usage(format!("corpus {} does not exist", path.display())));
    }
    if path.is_dir() {
        return Ok(Corpus::load_normalized(path)?);
    }
    let mapping = match mapping {
        Some(m) => FieldMapping::from_file(m)?,
        None => FieldMapping::identity(),
    };
    Ok(load_corpus(path, &mapping)?)
}

/// Conversations reserved for language-model training. The sorted ids are
/// shuffled with a seed derived from `seed` and the first
/// `round(fraction · n)` are taken; at least one conversation is left on
/// each side whenever `fraction > 0` and there are two or more.
pub fn lm_split(conversation_ids: &[String], fraction: f64, seed: u64) -> BTreeSet<String> {
    if fraction <= 0.0 || conversation_ids.len() < 2 {
        return BTreeSet::new();
    }
    let mut ids: Vec<&String> = conversation_ids.iter().collect();
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "lm-split"));
    ids.shuffle(&mut rng);
    let take = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    ids.into_iter().take(take).cloned().collect()
}

/// One line of `tests.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestRow {
    pub analysis: String,
    pub group_a: String,
    pub group_b: String,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub method: String,
    pub n: usize,
}

impl TestRow {
    fn from_result(analysis: &str, a: &str, b: &str, r: Result<TestResult, StatsError>, n: usize) -> Self {
        let (statistic, p_value, method) = match r {
            Ok(t) => (Some(t.statistic), Some(t.p_value), t.method.as_str().to_string()),
            Err(e) => (None, None, format!("skipped: {e}")),
        };
        TestRow {
            analysis: analysis.into(),
            group_a: a.into(),
            group_b: b.into(),
            statistic,
            p_value,
            method,
            n,
        }
    }

    fn significant(&self) -> bool {
        self.p_value.is_some_and(|p| p < SIGNIFICANCE)
    }
}

/// Result of [`run`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub model_id: Option<String>,
    pub counts: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
    /// File name to SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Artifacts<'a> {
    dir: &'a Path,
    summary: &'a mut RunSummary,
}

impl Artifacts<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| PipelineError::output(&path, e))?;
        self.summary
            .artifacts
            .insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        info!("wrote {}", path.display());
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), PipelineError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let path = self.dir.join(name);
        w.write_record(header).map_err(|e| PipelineError::output(&path, e))?;
        for row in rows {
            w.write_record(row).map_err(|e| PipelineError::output(&path, e))?;
        }
        let bytes = w.into_inner().map_err(|e| PipelineError::output(&path, e))?;
        self.write(name, &bytes)
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
        let mut out = String::new();
        for row in rows {
            out.push_str(&serde_json::to_string(&row).expect("row serializes"));
            out.push('\n');
        }
        self.write(name, out.as_bytes())
    }

    fn count(&mut self, key: &str, value: usize) {
        self.summary.counts.insert(key.to_string(), value as u64);
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    status: &'static str,
    error: Option<String>,
    exit_code: i32,
    tool: &'static str,
    version: &'static str,
    config_hash: String,
    config: &'a RunConfig,
    #[serde(flatten)]
    summary: &'a RunSummary,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const FAILED_MARKER: &str = "FAILED";

/// Runs the configured pipeline, writing artifacts into `cfg.out_dir`.
///
/// Usage errors detected before any output exists leave the directory
/// untouched. Once the output directory is created, `run_manifest.json` is
/// always written; on failure it records the error and a `FAILED` marker
/// file is added next to whatever partial outputs were produced.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| PipelineError::output(&cfg.out_dir, e))?;
    let _ = fs::remove_file(cfg.out_dir.join(FAILED_MARKER));
    let mut summary = RunSummary::default();
    let result = execute(
        cfg,
        &mut Artifacts {
            dir: &cfg.out_dir,
            summary: &mut summary,
        },
    );
    let manifest = RunManifest {
        status: if result.is_ok() { "ok" } else { "FAILED" },
        error: result.as_ref().err().map(|e| e.to_string()),
        exit_code: result.as_ref().err().map_or(0, |e| e.exit_code()),
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.config_hash(),
        config: cfg,
        summary: &summary,
    };
    let path = cfg.out_dir.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, body).map_err(|e| PipelineError::output(&path, e))?;
    if let Err(e) = &result {
        let marker = cfg.out_dir.join(FAILED_MARKER);
        fs::write(&marker, format!("{e}\n")).map_err(|err| PipelineError::output(&marker, err))?;
    }
    result.map(|()| summary)
}

fn execute(cfg: &RunConfig, art: &mut Artifacts<'_>) -> Result<(), PipelineError> {
    let corpus = load_input(&cfg.corpus, cfg.mapping.as_deref())?;
    art.count("conversations", corpus.conversations.len());
    art.count("utterances", corpus.utterance_count());
    art.count("dropped_unmapped_speaker", corpus.report.dropped_unmapped_speaker);
    art.count("dropped_empty_text", corpus.report.dropped_empty_text);
    art.summary.warnings.extend(corpus.report.warnings.iter().cloned());

    let seg = cfg.segmentation.build()?;
    let sessions = segment_corpus(&corpus, &seg)?;
    let all_sessions: Vec<&Session> = sessions.iter().flat_map(|c| &c.sessions).collect();
    art.count("sessions", all_sessions.len());
    art.jsonl(
        "sessions.jsonl",
        all_sessions.iter().map(|s| SessionManifestEntry::from(*s)),
    )?;

    if cfg.analyses.contains(&Analysis::NSweep) {
        let rows: Vec<Vec<String>> = n_sweep(&corpus, &cfg.n_values, &seg)?
            .into_iter()
            .map(|r| {
                vec![
                    r.n.to_string(),
                    r.mean_sessions.to_string(),
                    r.median_sessions.to_string(),
                    r.stdev_sessions.to_string(),
                ]
            })
            .collect();
        art.csv("nsweep.csv", &["n", "mean_sessions", "median_sessions", "stdev_sessions"], &rows)?;
    }

    if cfg.analyses.contains(&Analysis::Fightin) {
        let owned: Vec<Session> = all_sessions.iter().map(|s| (*s).clone()).collect();
        let (first, last) = boundary_validation(&owned, cfg.fightin_ngram_max, cfg.fightin_alpha_0)?;
        write_fightin(art, "fightin_first.csv", &first, cfg.fightin_top_k)?;
        write_fightin(art, "fightin_last.csv", &last, cfg.fightin_top_k)?;
    }

    if !cfg.needs_scores() {
        return Ok(());
    }

    let lm_ids = match &cfg.backend {
        Backend::Ngram {
            model: None, holdout, ..
        } => {
            let ids: Vec<String> = sessions
                .iter()
                .filter(|c| !c.sessions.is_empty())
                .map(|c| c.conversation_id.clone())
                .collect();
            lm_split(&ids, *holdout, cfg.seed)
        }
        _ => BTreeSet::new(),
    };
    let scored: Vec<ConversationSessions> = sessions
        .iter()
        .filter(|c| !lm_ids.contains(&c.conversation_id))
        .cloned()
        .collect();
    art.count("lm_conversations", lm_ids.len());
    art.count("scored_conversations", scored.len());
    let needs_scorer = cfg.scores.is_none()
        || cfg.analyses.contains(&Analysis::Shuffle)
        || cfg.analyses.contains(&Analysis::Compare);
    let scorer = if needs_scorer {
        Some(build_scorer(cfg, &sessions, &lm_ids, art)?)
    } else {
        None
    };
    if let Some(s) = &scorer {
        art.summary.model_id = Some(s.model_id());
    }

    let orientation: Option<OrientationScores> = match &cfg.orientation {
        Some(p) => Some(load_orientation(p)?),
        None => None,
    };
    let tfidf = cfg.similarity.then(|| {
        TfIdf::fit(
            scored
                .iter()
                .flat_map(|c| &c.sessions)
                .flat_map(|s| &s.utterances)
                .map(|u| u.text.as_str()),
        )
    });
    let opts = MeasureOptions {
        embedder: tfidf.as_ref().map(|t| t as &dyn Embedder),
        dependence: cfg.dependence,
        orientation: orientation.as_ref(),
    };

    let scores: Vec<ScoreRecord> = match &cfg.scores {
        Some(path) => read_scores(path)?,
        None => {
            let scorer = scorer.as_deref().expect("scorer built when scores are computed");
            info!("scoring {} conversations", scored.len());
            let s = score_corpus(&scored, scorer, opts);
            art.jsonl("scores.jsonl", &s)?;
            s
        }
    };
    art.count("windows", scores.len());
    art.count("unscored", scores.iter().filter(|r| r.unscored_flag).count());

    let metrics = enabled_metrics(cfg);
    let summaries: BTreeMap<Metric, Vec<SessionSummary>> =
        metrics.iter().map(|&m| (m, summarize(&scored, &scores, m))).collect();
    write_summaries(art, &summaries)?;
    let red = &summaries[&Metric::Redirection];

    let mut tests: Vec<TestRow> = Vec::new();
    if cfg.analyses.contains(&Analysis::Phases) {
        let rows = phase_slices(red, cfg.phase_k, cfg.phase_min_sessions)?;
        write_phases(art, &rows)?;
        tests.extend(phase_tests("phases", &rows));
    }
    if cfg.analyses.contains(&Analysis::Roles) {
        tests.push(role_test("roles", red));
    }

    let cohort_cfg = CohortConfig {
        unsuccessful_codes: cfg.unsuccessful_codes.clone(),
        min_sessions: cfg.cohort_min_sessions,
        first_k: cfg.cohort_first_k,
    };
    if cfg.analyses.contains(&Analysis::Cohorts) {
        let candidates = cohort_candidates(&corpus, &scored);
        let cohorts = cohort_filter(&candidates, &cohort_cfg, cfg.seed);
        art.summary.warnings.extend(cohorts.warnings.iter().cloned());
        art.count("cohort_unsuccessful", cohorts.unsuccessful.len());
        art.count("cohort_control", cohorts.control.len());
        let mut rows = Vec::new();
        for (label, ids) in [("unsuccessful", &cohorts.unsuccessful), ("control", &cohorts.control)] {
            let per_q: Vec<BTreeMap<String, f64>> = Quantity::ALL
                .iter()
                .map(|&q| early_means(red, ids, cfg.cohort_first_k, q).into_iter().collect())
                .collect();
            for id in ids {
                let mut row = vec![id.clone(), label.to_string()];
                row.extend(per_q.iter().map(|m| fmt_opt(m.get(id).copied())));
                rows.push(row);
            }
        }
        art.csv(
            "cohorts.csv",
            &["conversation_id", "cohort", "t_avg", "c_avg", "t_rel", "c_rel"],
            &rows,
        )?;
        tests.extend(cohort_tests("cohorts", red, &cohorts.unsuccessful, &cohorts.control, cfg.cohort_first_k));
    }

    let shuffled_scores = if cfg.analyses.contains(&Analysis::Shuffle) || cfg.analyses.contains(&Analysis::Compare)
    {
        let shuffled = crate::stats::shuffle_sessions(&scored, cfg.seed, cfg.shuffle_mode);
        let scorer = scorer.as_deref().expect("scorer built for shuffle");
        info!("scoring shuffled sessions");
        let s = score_corpus(&shuffled, scorer, opts);
        art.jsonl("scores_shuffled.jsonl", &s)?;
        Some((shuffled, s))
    } else {
        None
    };

    if cfg.analyses.contains(&Analysis::Shuffle) {
        let (_, shuffled) = shuffled_scores.as_ref().expect("computed above");
        let (rows, test) = shuffle_check(&scores, shuffled, cfg.bootstrap_resamples, cfg.seed)?;
        art.csv("shuffle_summary.csv", &["condition", "n_sessions", "mean", "ci_low", "ci_high"], &rows)?;
        tests.push(test);
    }

    if cfg.analyses.contains(&Analysis::Pairs) {
        let pairs: Vec<_> = scored
            .iter()
            .filter_map(|c| extract_extreme_pairs(c, &scores, cfg.pair_window).ok())
            .collect();
        art.count("pairs", pairs.len());
        art.jsonl("pairs.jsonl", &pairs)?;
    }

    if cfg.analyses.contains(&Analysis::Compare) {
        let (shuffled_sessions, shuffled) = shuffled_scores.as_ref().expect("computed above");
        let candidates = cohort_candidates(&corpus, &scored);
        let cohorts = cohort_filter(&candidates, &cohort_cfg, cfg.seed);
        let mut rows = Vec::new();
        for &m in &metrics {
            let actual = &summaries[&m];
            let shuffled_summ = summarize(shuffled_sessions, shuffled, m);
            rows.extend(compare_rows(m, actual, &shuffled_summ, &cohorts, cfg)?);
        }
        art.csv(
            "measure_comparison.csv",
            &["metric", "analysis", "role", "result", "p_value"],
            &rows,
        )?;
    }

    if !tests.is_empty() {
        let rows: Vec<Vec<String>> = tests
            .iter()
            .map(|t| {
                vec![
                    t.analysis.clone(),
                    t.group_a.clone(),
                    t.group_b.clone(),
                    fmt_opt(t.statistic),
                    fmt_opt(t.p_value),
                    t.method.clone(),
                    t.n.to_string(),
                ]
            })
            .collect();
        art.csv(
            "tests.csv",
            &["analysis", "group_a", "group_b", "statistic", "p_value", "method", "n"],
            &rows,
        )?;
    }
    Ok(())
}

fn enabled_metrics(cfg: &RunConfig) -> Vec<Metric> {
    let mut m = vec![Metric::Redirection];
    if cfg.similarity {
        m.push(Metric::SimilarityDifference);
    }
    if cfg.dependence {
        m.push(Metric::Dependence);
    }
    if cfg.orientation.is_some() {
        m.push(Metric::Orientation);
    }
    m
}

fn build_scorer(
    cfg: &RunConfig,
    sessions: &[ConversationSessions],
    lm_ids: &BTreeSet<String>,
    art: &mut Artifacts<'_>,
) -> Result<Box<dyn Scorer>, PipelineError> {
    match &cfg.backend {
        Backend::Ngram {
            model: Some(path), ..
        } => Ok(Box::new(NGramModel::load(path)?)),
        Backend::Ngram { model: None, config, .. } => {
            let train: Vec<&Session> = sessions
                .iter()
                .filter(|c| lm_ids.is_empty() || lm_ids.contains(&c.conversation_id))
                .flat_map(|c| &c.sessions)
                .collect();
            if train.is_empty() {
                return Err(PipelineError::Analysis("no sessions available for language-model training".into()));
            }
            info!("training order-{} model on {} sessions", config.order, train.len());
            let model = train_ngram(train, config)?;
            art.write("lm.bin", &model.to_bytes())?;
            Ok(Box::new(model))
        }
        Backend::Remote {
            endpoint,
            model,
            auth_token,
            timeout_secs,
            retries,
            max_in_flight,
        } => {
            let mut rc = RemoteConfig::new(endpoint.clone(), model.clone());
            rc.auth_token = auth_token.clone();
            rc.timeout = Duration::from_secs(*timeout_secs);
            rc.retries = *retries;
            rc.max_in_flight = *max_in_flight;
            let scorer = RemoteScorer::new(rc);
            // An unreachable sidecar is not fatal: every window it cannot
            // score is marked unscored and counted.
            if let Err(e) = scorer.health() {
                warn!("scorer health check failed: {e}");
                art.summary.warnings.push(format!("scorer health check failed: {e}"));
            }
            Ok(Box::new(scorer))
        }
    }
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Analysis(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn write_fightin(art: &mut Artifacts<'_>, name: &str, table: &[TermContrast], top_k: usize) -> Result<(), PipelineError> {
    let take = if top_k == 0 { table.len() } else { top_k.min(table.len()) };
    let rows: Vec<Vec<String>> = table[..take]
        .iter()
        .map(|t| {
            vec![
                t.term.clone(),
                t.delta.to_string(),
                t.z.to_string(),
                t.count_1.to_string(),
                t.count_2.to_string(),
            ]
        })
        .collect();
    art.csv(name, &["term", "delta", "z", "count_1", "count_2"], &rows)
}

fn write_summaries(art: &mut Artifacts<'_>, summaries: &BTreeMap<Metric, Vec<SessionSummary>>) -> Result<(), PipelineError> {
    let mut rows = Vec::new();
    for (m, list) in summaries {
        for s in list {
            rows.push(vec![
                m.as_str().to_string(),
                s.conversation_id.clone(),
                s.session_index.to_string(),
                fmt_opt(s.t_avg),
                fmt_opt(s.c_avg),
                fmt_opt(s.t_rel),
                fmt_opt(s.c_rel),
                s.n_scored_a.to_string(),
                s.n_scored_b.to_string(),
                s.turn_count.to_string(),
                s.token_count.to_string(),
                s.is_partial().to_string(),
            ]);
        }
    }
    art.csv(
        "session_summaries.csv",
        &[
            "metric",
            "conversation_id",
            "session_index",
            "t_avg",
            "c_avg",
            "t_rel",
            "c_rel",
            "n_scored_a",
            "n_scored_b",
            "turn_count",
            "token_count",
            "partial",
        ],
        &rows,
    )
}

fn write_phases(art: &mut Artifacts<'_>, rows: &[PhaseRow]) -> Result<(), PipelineError> {
    let mut header = vec!["conversation_id".to_string(), "n_sessions".to_string()];
    for q in Quantity::ALL {
        header.push(format!("{}_first", q.as_str()));
        header.push(format!("{}_last", q.as_str()));
    }
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.conversation_id.clone(), r.n_sessions.to_string()];
            for q in Quantity::ALL {
                let (f, l) = r.values[&q];
                row.push(fmt_opt(f));
                row.push(fmt_opt(l));
            }
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    art.csv("phases.csv", &header, &out)
}

/// Paired first-vs-last signed-rank test for each quantity.
pub fn phase_tests(analysis: &str, rows: &[PhaseRow]) -> Vec<TestRow> {
    Quantity::ALL
        .iter()
        .map(|&q| {
            let pairs: Vec<(f64, f64)> = rows
                .iter()
                .filter_map(|r| match r.values[&q] {
                    (Some(f), Some(l)) => Some((l, f)),
                    _ => None,
                })
                .collect();
            let name = format!("{analysis}:{}", q.as_str());
            TestRow::from_result(&name, "last", "first", wilcoxon_signed_rank(&pairs, Alternative::TwoSided), pairs.len())
        })
        .collect()
}

/// Paired per-session test of role A's average against role B's.
pub fn role_test(analysis: &str, summaries: &[SessionSummary]) -> TestRow {
    let pairs: Vec<(f64, f64)> = summaries
        .iter()
        .filter_map(|s| Some((s.t_avg?, s.c_avg?)))
        .collect();
    TestRow::from_result(
        analysis,
        Role::A.as_str(),
        Role::B.as_str(),
        wilcoxon_signed_rank(&pairs, Alternative::TwoSided),
        pairs.len(),
    )
}

pub fn cohort_tests(
    analysis: &str,
    summaries: &[SessionSummary],
    unsuccessful: &[String],
    control: &[String],
    first_k: usize,
) -> Vec<TestRow> {
    Quantity::ALL
        .iter()
        .map(|&q| {
            let x: Vec<f64> = early_means(summaries, unsuccessful, first_k, q).into_iter().map(|(_, v)| v).collect();
            let y: Vec<f64> = early_means(summaries, control, first_k, q).into_iter().map(|(_, v)| v).collect();
            let name = format!("{analysis}:{}", q.as_str());
            TestRow::from_result(
                &name,
                "unsuccessful",
                "control",
                mann_whitney_u(&x, &y, Alternative::TwoSided),
                x.len() + y.len(),
            )
        })
        .collect()
}

fn cohort_candidates(corpus: &Corpus, scored: &[ConversationSessions]) -> Vec<CohortCandidate> {
    scored
        .iter()
        .filter_map(|c| {
            let conv = corpus.get(&c.conversation_id)?;
            Some(CohortCandidate {
                conversation_id: c.conversation_id.clone(),
                outcome: conv.outcome,
                outcome_reason: conv.outcome_reason.clone(),
                session_count: c.sessions.len(),
            })
        })
        .collect()
}

/// Mean redirection per session over all scored utterances, keyed by
/// `(conversation_id, session_index)`.
pub fn session_mean_redirection(scores: &[ScoreRecord]) -> BTreeMap<(String, usize), f64> {
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for r in scores {
        if let (false, Some(v)) = (r.unscored_flag, r.redirection) {
            let e = acc.entry((r.conversation_id.clone(), r.session_index)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Actual vs. shuffled session means: summary rows with bootstrap
/// intervals, and the paired signed-rank test.
pub fn shuffle_check(
    actual: &[ScoreRecord],
    shuffled: &[ScoreRecord],
    resamples: usize,
    seed: u64,
) -> Result<(Vec<Vec<String>>, TestRow), PipelineError> {
    let a = session_mean_redirection(actual);
    let s = session_mean_redirection(shuffled);
    let pairs: Vec<(f64, f64)> = a.iter().filter_map(|(k, v)| Some((*v, *s.get(k)?))).collect();
    if pairs.is_empty() {
        return Err(PipelineError::Analysis("no session has scores in both conditions".into()));
    }
    let mut rows = Vec::new();
    for (label, values) in [
        ("actual", pairs.iter().map(|p| p.0).collect::<Vec<_>>()),
        ("shuffled", pairs.iter().map(|p| p.1).collect::<Vec<_>>()),
    ] {
        let (lo, hi) = bootstrap_ci(&values, resamples, 0.95, derive_seed(seed, &format!("bootstrap/{label}")))?;
        rows.push(vec![
            label.to_string(),
            values.len().to_string(),
            mean(&values).to_string(),
            lo.to_string(),
            hi.to_string(),
        ]);
    }
    let test = TestRow::from_result(
        "shuffle",
        "actual",
        "shuffled",
        wilcoxon_signed_rank(&pairs, Alternative::TwoSided),
        pairs.len(),
    );
    Ok((rows, test))
}

fn direction(rows: &[PhaseRow], q: Quantity, test: &TestRow) -> String {
    if !test.significant() {
        return "-".into();
    }
    let diff: f64 = rows
        .iter()
        .filter_map(|r| match r.values[&q] {
            (Some(f), Some(l)) => Some(l - f),
            _ => None,
        })
        .sum();
    if diff > 0.0 { "up" } else { "down" }.into()
}

fn compare_rows(
    metric: Metric,
    actual: &[SessionSummary],
    shuffled: &[SessionSummary],
    cohorts: &crate::aggregate::Cohorts,
    cfg: &RunConfig,
) -> Result<Vec<Vec<String>>, PipelineError> {
    let mut out = Vec::new();
    let name = metric.as_str();
    let phases = phase_slices(actual, cfg.phase_k, cfg.phase_min_sessions)?;
    let shuffled_phases = phase_slices(shuffled, cfg.phase_k, cfg.phase_min_sessions)?;
    let tests = phase_tests("phase", &phases);
    let shuffled_tests = phase_tests("phase", &shuffled_phases);
    let by_q: BTreeMap<Quantity, (&TestRow, &TestRow)> = Quantity::ALL
        .iter()
        .copied()
        .zip(tests.iter().zip(&shuffled_tests))
        .collect();
    for (analysis, q, role) in [
        ("start_end_average", Quantity::TAvg, Role::A),
        ("start_end_average", Quantity::CAvg, Role::B),
        ("start_end_balance", Quantity::TRel, Role::A),
        ("start_end_balance", Quantity::CRel, Role::B),
    ] {
        let t = by_q[&q].0;
        out.push(vec![
            name.into(),
            analysis.into(),
            role.as_str().into(),
            direction(&phases, q, t),
            fmt_opt(t.p_value),
        ]);
    }
    let trend = [Quantity::TAvg, Quantity::CAvg]
        .iter()
        .any(|q| by_q[q].0.significant());
    let survives = [Quantity::TAvg, Quantity::CAvg]
        .iter()
        .any(|q| by_q[q].1.significant());
    let removed_by_shuffle = if trend && !survives { "yes" } else { "no" };
    out.push(vec![
        name.into(),
        "temporal_order".into(),
        "both".into(),
        removed_by_shuffle.into(),
        String::new(),
    ]);
    let ctests = cohort_tests("cohort", actual, &cohorts.unsuccessful, &cohorts.control, cfg.cohort_first_k);
    for (t, role) in ctests.iter().take(2).zip([Role::A, Role::B]) {
        out.push(vec![
            name.into(),
            "distinguishes_unsuccessful".into(),
            role.as_str().into(),
            if t.significant() { "yes" } else { "no" }.into(),
            fmt_opt(t.p_value),
        ]);
    }
    Ok(out)
}

/// Writes the normalized corpus and `load_report.json` into `out_dir`.
pub fn ingest(corpus: &Path, mapping: Option<&Path>, out_dir: &Path) -> Result<Corpus, PipelineError> {
    let c = load_input(corpus, mapping)?;
    c.write_normalized(out_dir)?;
    let path = out_dir.join("load_report.json");
    fs::write(&path, serde_json::to_string_pretty(&c.report).expect("report serializes") + "\n")
        .map_err(|e| PipelineError::output(&path, e))?;
    Ok(c)
}

/// Trains an n-gram model on every session of a corpus and saves it.
pub fn train_lm(
    corpus: &Path,
    mapping: Option<&Path>,
    segmentation: &SegmentationParams,
    config: &NGramConfig,
    out: &Path,
) -> Result<NGramModel, PipelineError> {
    let c = load_input(corpus, mapping)?;
    let sessions = segment_corpus(&c, &segmentation.build()?)?;
    let model = train_ngram(sessions.iter().flat_map(|s| &s.sessions), config)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| PipelineError::output(parent, e))?;
    }
    model.save(out)?;
    Ok(model)
}
