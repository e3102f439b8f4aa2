// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{mann_whitney_brute, wilcoxon_brute};
use convo_redirect::aggregate::{relative_redirection, summarize, Metric};
use convo_redirect::fightin_words::boundary_validation;
use convo_redirect::measures::{redirection_score, score_corpus, session_windows, AdjacencyWindow, MeasureOptions};
use convo_redirect::pipeline::{self, lm_split, load_input, role_test, shuffle_check, RunConfig};
use convo_redirect::scorer::ngram::{train_ngram, ContextCache, NGramConfig, NGramModel};
use convo_redirect::scorer::ContextFree;
use convo_redirect::segmentation::{n_sweep, segment_corpus, ConversationSessions, SegmentationConfig};
use convo_redirect::stats::{
    mann_whitney_u, shuffle_sessions, wilcoxon_signed_rank_diffs, Alternative, Method, ShuffleMode, ZeroMethod,
};
use convo_redirect::synthetic::{
    bursty_corpus, greeting_farewell_corpus, planted_redirection_corpus, GreetingConfig, PlantedConfig,
};
use convo_redirect::{Role, Turn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn all_sessions(convs: &[ConversationSessions]) -> usize {
    convs.iter().map(|c| c.sessions.len()).sum()
}

fn null_identities() -> Result<String, String> {
    let start = Instant::now();
    let corpus = load_input(&fixture("therapy_fixture.jsonl"), None).map_err(|e| e.to_string())?;
    let sessions = segment_corpus(&corpus, &SegmentationConfig::default()).map_err(|e| e.to_string())?;
    let model = train_ngram(sessions.iter().flat_map(|c| &c.sessions), &NGramConfig::default())
        .map_err(|e| e.to_string())?;

    let blind = ContextFree(&model);
    let opts = MeasureOptions { embedder: None, dependence: true, orientation: None };
    let records = score_corpus(&sessions, &blind, opts);
    ensure(!records.is_empty(), || "no windows scored".into())?;
    for r in &records {
        ensure(!r.unscored_flag && r.redirection == Some(0.0) && r.dependence == Some(0.0), || {
            format!("{} scored {:?} / {:?} under a context-blind scorer", r.utterance_id, r.redirection, r.dependence)
        })?;
    }

    let mut repeated = 0;
    for s in sessions.iter().flat_map(|c| &c.sessions) {
        for (k, w) in session_windows(s) {
            let mut focal = w.focal.clone();
            focal.text = w.prev_other.text.clone();
            let win = AdjacencyWindow::new(w.prev_other, w.prev_self, &focal, w.reply).map_err(|e| e.to_string())?;
            let score = redirection_score(&win, &model).map_err(|e| e.to_string())?;
            ensure(score.redirection == 0.0, || format!("window {k} of {}: R = {}", s.conversation_id, score.redirection))?;
            repeated += 1;
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("{} blind windows and {repeated} repeated-focal windows all exactly 0 in {elapsed:.2?}", records.len()))
}

fn softmax_algebra() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (t, c): (f64, f64) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let (tr, cr) = relative_redirection(t, c);
        worst = worst.max((tr + cr - 1.0).abs());

        // Multiples of 2^-10 and integer shifts keep every subtraction exact.
        let (t, c) = (rng.random_range(-20_480i32..20_480) as f64 / 1024.0, rng.random_range(-20_480i32..20_480) as f64 / 1024.0);
        let k = rng.random_range(-50i32..=50) as f64;
        ensure(relative_redirection(t, c) == relative_redirection(t + k, c + k), || {
            format!("shift by {k} changed ({t}, {c})")
        })?;
    }
    ensure(worst <= 1e-12, || format!("t_rel + c_rel off by {worst:e}"))?;
    let (tr, _) = relative_redirection(1.0, 0.0);
    ensure((tr - 0.731059).abs() <= 1e-6, || format!("t_rel(1, 0) = {tr}"))?;
    Ok(format!("max |sum - 1| = {worst:.1e}; shifts exact; t_rel(1,0) = {tr:.6}"))
}

fn stats_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let alts = [Alternative::TwoSided, Alternative::Greater, Alternative::Less];
    let mut cases = 0;
    for i in 0..250 {
        let alt = alts[i % 3];
        let n = rng.random_range(1..=10);
        let d: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.5) { rng.random_range(-4i32..=4) as f64 } else { rng.random_range(-9.0..9.0) })
            .collect();
        if d.iter().any(|v| *v != 0.0) {
            let got = wilcoxon_signed_rank_diffs(&d, alt, ZeroMethod::Wilcox).map_err(|e| e.to_string())?;
            let (w, p) = wilcoxon_brute(&d, alt);
            ensure(got.method == Method::Exact && got.statistic == w && (got.p_value - p).abs() < 1e-12, || {
                format!("signed-rank {d:?}: {} vs brute force {p}", got.p_value)
            })?;
            cases += 1;
        }

        let (nx, ny) = (rng.random_range(1..=10), rng.random_range(1..=8));
        let tied = rng.random_bool(0.5);
        let draw = |rng: &mut ChaCha8Rng, parity: i32| -> f64 {
            if tied { (2 * rng.random_range(0i32..6) + parity) as f64 } else { rng.random_range(-5.0..5.0) }
        };
        let x: Vec<f64> = (0..nx).map(|_| draw(&mut rng, 0)).collect();
        let y: Vec<f64> = (0..ny).map(|_| draw(&mut rng, 1)).collect();
        let got = mann_whitney_u(&x, &y, alt).map_err(|e| e.to_string())?;
        let (u, p) = mann_whitney_brute(&x, &y, alt);
        ensure(got.method == Method::Exact && got.statistic == u && (got.p_value - p).abs() < 1e-12, || {
            format!("rank-sum {x:?} {y:?}: {} vs brute force {p}", got.p_value)
        })?;
        cases += 1;
    }
    ensure(cases >= 200, || format!("only {cases} cases"))?;

    let w = wilcoxon_signed_rank_diffs(&[1.0, 2.0, 3.0], Alternative::Greater, ZeroMethod::Wilcox).map_err(|e| e.to_string())?;
    ensure(w.statistic == 6.0 && w.p_value == 1.0 / 8.0, || format!("signed-rank example p = {}", w.p_value))?;
    let m = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0], Alternative::TwoSided).map_err(|e| e.to_string())?;
    ensure(m.statistic == 0.0 && m.p_value == 2.0 / 6.0, || format!("rank-sum example p = {}", m.p_value))?;
    Ok(format!("{cases} random cases match enumeration; p = 1/8 and 2/6 exact"))
}

fn shuffle_replication() -> Result<String, String> {
    let start = Instant::now();
    let cfg = PlantedConfig {
        conversations: 40,
        sessions_per_conversation: (5, 5),
        ..PlantedConfig::default()
    };
    let seg = SegmentationConfig::default();
    let train = segment_corpus(&planted_redirection_corpus(&cfg, 100), &seg).map_err(|e| e.to_string())?;
    let model = train_ngram(train.iter().flat_map(|c| &c.sessions), &NGramConfig::default()).map_err(|e| e.to_string())?;
    let eval = segment_corpus(&planted_redirection_corpus(&cfg, 200), &seg).map_err(|e| e.to_string())?;
    ensure(all_sessions(&eval) == 200, || format!("{} sessions", all_sessions(&eval)))?;

    let opts = MeasureOptions { embedder: None, dependence: false, orientation: None };
    let actual = score_corpus(&eval, &model, opts);
    let shuffled = score_corpus(&shuffle_sessions(&eval, 7, ShuffleMode::WithinRole), &model, opts);
    let (rows, test) = shuffle_check(&actual, &shuffled, 2000, 7).map_err(|e| e.to_string())?;
    let num = |r: &[String], i: usize| r[i].parse::<f64>().unwrap_or(f64::NAN);
    let (mean_a, mean_s) = (num(&rows[0], 2), num(&rows[1], 2));
    let (lo, hi) = (num(&rows[1], 3), num(&rows[1], 4));
    let p = test.p_value.unwrap_or(1.0);
    ensure(mean_a > mean_s, || format!("actual mean {mean_a} <= shuffled {mean_s}"))?;
    ensure(p < 0.01, || format!("Wilcoxon p = {p}"))?;
    ensure(lo <= 0.0 && 0.0 <= hi, || format!("shuffled CI [{lo}, {hi}] excludes 0"))?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(120))?;
    Ok(format!(
        "mean R actual {mean_a:.3} vs shuffled {mean_s:.3}, p = {p:.1e}, shuffled CI [{lo:.3}, {hi:.3}], {elapsed:.1?}"
    ))
}

fn supreme_court() -> Result<String, String> {
    let Some(corpus_path) = std::env::var_os("SUPREME_CORPUS").map(PathBuf::from) else {
        return Err("SUPREME_CORPUS is not set; the public corpus could not be fetched in this environment".into());
    };
    let start = Instant::now();
    let mapping = std::env::var_os("SUPREME_MAPPING").map_or_else(|| fixture("supreme.mapping"), PathBuf::from);
    let corpus = load_input(&corpus_path, Some(Path::new(&mapping))).map_err(|e| e.to_string())?;
    let sessions = segment_corpus(&corpus, &SegmentationConfig::default()).map_err(|e| e.to_string())?;
    let ids: Vec<String> = sessions.iter().map(|c| c.conversation_id.clone()).collect();
    let held_out = lm_split(&ids, 0.3, 0);
    let eval: Vec<ConversationSessions> =
        sessions.iter().filter(|c| !held_out.contains(&c.conversation_id)).cloned().collect();
    ensure(eval.len() >= 200, || format!("{} evaluation conversations, need 200", eval.len()))?;
    let model = train_ngram(
        sessions.iter().filter(|c| held_out.contains(&c.conversation_id)).flat_map(|c| &c.sessions),
        &NGramConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let opts = MeasureOptions { embedder: None, dependence: false, orientation: None };
    let summaries = summarize(&eval, &score_corpus(&eval, &model, opts), Metric::Redirection);
    let pairs: Vec<(f64, f64)> = summaries.iter().filter_map(|s| Some((s.t_avg?, s.c_avg?))).collect();
    let n = pairs.len() as f64;
    let (justices, lawyers) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let test = role_test("roles", &summaries);
    let p = test.p_value.unwrap_or(1.0);
    ensure(justices > lawyers, || format!("justices {justices:.3} <= lawyers {lawyers:.3}"))?;
    ensure(p < 0.05, || format!("Wilcoxon p = {p}"))?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(600))?;
    Ok(format!(
        "{} sessions: justices {justices:.3} vs lawyers {lawyers:.3}, p = {p:.1e}, {elapsed:.1?}",
        pairs.len()
    ))
}

fn boundary() -> Result<String, String> {
    let cfg = GreetingConfig::default();
    let sessions = segment_corpus(&greeting_farewell_corpus(&cfg, 5), &SegmentationConfig::default())
        .map_err(|e| e.to_string())?;
    let flat: Vec<_> = sessions.into_iter().flat_map(|c| c.sessions).collect();
    let (open, close) = boundary_validation(&flat, 1, 500.0).map_err(|e| e.to_string())?;
    let top = |t: &[convo_redirect::fightin_words::TermContrast]| t.iter().take(3).map(|c| c.term.clone()).collect::<Vec<_>>();
    let (o, c) = (top(&open), top(&close));
    ensure(o.contains(&cfg.greeting), || format!("opening top-3 {o:?}"))?;
    ensure(c.contains(&cfg.farewell), || format!("closing top-3 {c:?}"))?;
    Ok(format!("opening top-3 {o:?}, closing top-3 {c:?}"))
}

fn normalization_and_sweep() -> Result<String, String> {
    let planted = planted_redirection_corpus(&PlantedConfig::default(), 9);
    let sessions = segment_corpus(&planted, &SegmentationConfig::default()).map_err(|e| e.to_string())?;
    let base = train_ngram(sessions.iter().flat_map(|c| &c.sessions), &NGramConfig::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vocab = base.vocabulary().len() as u32;
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let model: NGramModel = if i % 2 == 0 {
            base.clone()
        } else {
            base.with_cache(rng.random_range(0.0..0.95), rng.random_range(0.05..=1.0)).map_err(|e| e.to_string())?
        };
        let history: Vec<u32> = (0..rng.random_range(0..6)).map(|_| rng.random_range(0..vocab)).collect();
        let turns: Vec<Turn> = (0..rng.random_range(0..3))
            .map(|_| {
                let words: Vec<String> = (0..rng.random_range(0..6))
                    .map(|_| {
                        let id = rng.random_range(5..vocab);
                        if rng.random_bool(0.1) { "never-seen".to_string() } else { base.vocabulary().token(id).to_string() }
                    })
                    .collect();
                Turn::new(Role::A, words.join(" "))
            })
            .collect();
        let cache = ContextCache::from_context(&model, &turns);
        let total: f64 = model.next_distribution(&history, &cache).iter().map(|(_, p)| p).sum();
        worst = worst.max((total - 1.0).abs());
    }
    ensure(worst <= 1e-9, || format!("distribution sums off by {worst:e}"))?;

    // The default sweep grid. Below N of about 5 most gaps are cuts and the
    // min-turns filter discards the fragments, so counts can rise with N there.
    let bursty = bursty_corpus(60, (5, 40), 12);
    let ns = [10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0, 1e5];
    let rows = n_sweep(&bursty, &ns, &SegmentationConfig::default()).map_err(|e| e.to_string())?;
    let small = n_sweep(&bursty, &[1.0, 2.0, 5.0], &SegmentationConfig::default()).map_err(|e| e.to_string())?;
    for pair in rows.windows(2) {
        ensure(pair[1].mean_sessions <= pair[0].mean_sessions, || {
            format!("mean sessions rose from {} (N={}) to {} (N={})", pair[0].mean_sessions, pair[0].n, pair[1].mean_sessions, pair[1].n)
        })?;
    }
    let means: Vec<String> = rows.iter().map(|r| format!("{:.1}", r.mean_sessions)).collect();
    let small: Vec<String> = small.iter().map(|r| format!("{:.1}", r.mean_sessions)).collect();
    Ok(format!(
        "1000 contexts, max |sum - 1| = {worst:.1e}; mean sessions for N = 10..1e5: {} (N = 1, 2, 5: {})",
        means.join(" "),
        small.join(" ")
    ))
}

fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dirs = [tmp.path().join("one"), tmp.path().join("two")];
    for (i, dir) in dirs.iter().enumerate() {
        let mut cfg = RunConfig::new(fixture("therapy_fixture.jsonl"), dir);
        cfg.phase_min_sessions = 10;
        cfg.bootstrap_resamples = 500;
        cfg.seed = 31;
        // Second run on a single worker thread.
        let pool = rayon::ThreadPoolBuilder::new().num_threads(if i == 0 { 4 } else { 1 }).build().map_err(|e| e.to_string())?;
        pool.install(|| pipeline::run(&cfg)).map_err(|e| e.to_string())?;
    }
    let names: BTreeSet<String> = std::fs::read_dir(&dirs[0])
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    ensure(names.len() >= 8, || format!("only {} CSV files: {names:?}", names.len()))?;
    for name in &names {
        let a = std::fs::read(dirs[0].join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name} differs"))?;
    }
    Ok(format!("{} CSVs byte-identical across runs (4 vs 1 threads)", names.len()))
}

fn main() {
    let checks: [(&str, Check); 8] = [
        ("null-identities", null_identities),
        ("relative-redirection-softmax", softmax_algebra),
        ("stats-oracle-equivalence", stats_oracle),
        ("shuffle-check-planted-corpus", shuffle_replication),
        ("supreme-court-justices-vs-lawyers", supreme_court),
        ("boundary-validation", boundary),
        ("ngram-normalization-and-nsweep", normalization_and_sweep),
        ("end-to-end-determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| Err(e.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
