//! Interpolated Kneser-Ney n-gram model with a context cache.
//!
//! Every utterance is rendered as `<A>|<B> tokens… </s>` and a session is
//! the concatenation of its rendered utterances behind `order − 1` `<s>`
//! pads. The highest order uses raw counts, lower orders use continuation
//! counts (number of distinct left extensions), and each order interpolates
//! with the next lower one using absolute discounting. The recursion
//! bottoms out in the uniform distribution over the predictable vocabulary
//! (everything except `<s>`).
//!
//! A short n-gram window cannot see past the role marker that opens the
//! reply, so the conditional reply likelihood would not depend on the
//! context at all. The model therefore mixes in a unigram cache built from
//! the context utterances, weighted by recency:
//!
//! `P(w | h, ctx) = (1 − λ)·P_kn(w | h) + λ·P_cache(w | ctx)`
//!
//! where the most recent context utterance has weight 1 and each older one
//! is multiplied by `cache_decay`. With an empty cache `λ` is 0.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LogProbResult, ScoreError, ScoreRequest, Scorer, Turn};
use crate::corpus::Role;
use crate::segmentation::Session;
use crate::tokenize::tokenize;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const ROLE_A: &str = "<A>";
pub const ROLE_B: &str = "<B>";

const UNK_ID: u32 = 0;
const BOS_ID: u32 = 1;
const EOS_ID: u32 = 2;
const ROLE_A_ID: u32 = 3;
const ROLE_B_ID: u32 = 4;
const RESERVED: [&str; 5] = [UNK, BOS, EOS, ROLE_A, ROLE_B];

const MAGIC: &[u8; 8] = b"CVRDNGRM";
const FORMAT_VERSION: u32 = 1;

pub fn role_marker(role: Role) -> &'static str {
    match role {
        Role::A => ROLE_A,
        Role::B => ROLE_B,
    }
}

/// Renders one utterance as `[role marker, tokens…, </s>]`.
pub fn render_turn(role: Role, text: &str) -> Vec<String> {
    let mut out = Vec::new();
    out.push(role_marker(role).to_string());
    out.extend(tokenize(text));
    out.push(EOS.to_string());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NGramConfig {
    pub order: usize,
    pub discount: f64,
    /// Word tokens seen fewer times than this map to `<unk>`.
    pub min_count: u64,
    pub cache_weight: f64,
    pub cache_decay: f64,
}

impl Default for NGramConfig {
    fn default() -> Self {
        NGramConfig {
            order: 3,
            discount: 0.75,
            min_count: 1,
            cache_weight: 0.3,
            cache_decay: 0.5,
        }
    }
}

impl NGramConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let bad = |m: String| Err(ScoreError::Model(m));
        if self.order < 1 {
            return bad("order must be at least 1".into());
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount must be in (0,1), got {}", self.discount));
        }
        if !(0.0..1.0).contains(&self.cache_weight) {
            return bad(format!("cache_weight must be in [0,1), got {}", self.cache_weight));
        }
        if !(self.cache_decay > 0.0 && self.cache_decay <= 1.0) {
            return bad(format!("cache_decay must be in (0,1], got {}", self.cache_decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Ids that can be predicted: every token except `<s>`.
    pub fn predictable(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.tokens.len() as u32).filter(|&id| id != BOS_ID)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextStats {
    total: u64,
    next: HashMap<u32, u64>,
}

/// Recency-weighted unigram distribution over the context's word tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextCache {
    weights: HashMap<u32, f64>,
    total: f64,
}

impl ContextCache {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_context(model: &NGramModel, context: &[Turn]) -> Self {
        let mut cache = ContextCache::default();
        let n = context.len();
        for (i, turn) in context.iter().enumerate() {
            let weight = model.cache_decay.powi((n - 1 - i) as i32);
            for tok in tokenize(&turn.text) {
                let id = model.vocab.id(&tok);
                if id == UNK_ID {
                    continue;
                }
                *cache.weights.entry(id).or_insert(0.0) += weight;
                cache.total += weight;
            }
        }
        cache
    }

    pub fn is_empty(&self) -> bool {
        self.total <= 0.0
    }

    pub fn probability(&self, id: u32) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.weights.get(&id).copied().unwrap_or(0.0) / self.total
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    discount: f64,
    min_count: u64,
    cache_weight: f64,
    cache_decay: f64,
    vocab: Vocabulary,
    /// `levels[m-1]` holds order-`m` statistics keyed by the `m-1` token
    /// context. The top level holds raw counts, the others continuation
    /// counts.
    levels: Vec<HashMap<Vec<u32>, ContextStats>>,
    id: String,
}

/// Trains on the rendered sessions.
pub fn train_ngram<'a>(
    sessions: impl IntoIterator<Item = &'a Session>,
    cfg: &NGramConfig,
) -> Result<NGramModel, ScoreError> {
    let sequences: Vec<Vec<String>> = sessions
        .into_iter()
        .map(|s| {
            s.utterances
                .iter()
                .flat_map(|u| render_turn(u.role, &u.text))
                .collect()
        })
        .collect();
    NGramModel::train(&sequences, cfg)
}

impl NGramModel {
    /// Trains on raw token sequences. Each sequence is padded on the left
    /// with `<s>`; callers supply any `</s>` and role markers themselves.
    pub fn train(sequences: &[Vec<String>], cfg: &NGramConfig) -> Result<Self, ScoreError> {
        cfg.validate()?;
        if sequences.iter().all(Vec::is_empty) {
            return Err(ScoreError::Model("cannot train on an empty corpus".into()));
        }

        let mut freq: HashMap<&str, u64> = HashMap::new();
        for tok in sequences.iter().flatten() {
            *freq.entry(tok.as_str()).or_insert(0) += 1;
        }
        let mut words: Vec<&str> = freq
            .iter()
            .filter(|(t, c)| **c >= cfg.min_count && !RESERVED.contains(t))
            .map(|(t, _)| *t)
            .collect();
        words.sort_unstable();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(str::to_string));
        let vocab = Vocabulary::from_tokens(tokens);

        let order = cfg.order;
        let mut levels: Vec<HashMap<Vec<u32>, ContextStats>> = vec![HashMap::new(); order];
        for seq in sequences.iter().filter(|s| !s.is_empty()) {
            let mut ids = vec![BOS_ID; order - 1];
            ids.extend(seq.iter().map(|t| vocab.id(t)));
            for i in (order - 1)..ids.len() {
                let ctx = ids[i + 1 - order..i].to_vec();
                let stats = levels[order - 1].entry(ctx).or_default();
                *stats.next.entry(ids[i]).or_insert(0) += 1;
                stats.total += 1;
            }
        }
        for m in (1..order).rev() {
            let mut lower: HashMap<Vec<u32>, ContextStats> = HashMap::new();
            for (ctx, stats) in &levels[m] {
                let shorter = ctx[1..].to_vec();
                let entry = lower.entry(shorter).or_default();
                for &w in stats.next.keys() {
                    *entry.next.entry(w).or_insert(0) += 1;
                    entry.total += 1;
                }
            }
            levels[m - 1] = lower;
        }

        let mut model = NGramModel {
            order,
            discount: cfg.discount,
            min_count: cfg.min_count,
            cache_weight: cfg.cache_weight,
            cache_decay: cfg.cache_decay,
            vocab,
            levels,
            id: String::new(),
        };
        model.id = model.fingerprint();
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn cache_weight(&self) -> f64 {
        self.cache_weight
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Same counts with a different cache mixture.
    pub fn with_cache(&self, cache_weight: f64, cache_decay: f64) -> Result<Self, ScoreError> {
        NGramConfig {
            order: self.order,
            discount: self.discount,
            min_count: self.min_count,
            cache_weight,
            cache_decay,
        }
        .validate()?;
        let mut m = self.clone();
        m.cache_weight = cache_weight;
        m.cache_decay = cache_decay;
        m.id = m.fingerprint();
        Ok(m)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.vocab.id(t.as_ref())).collect()
    }

    /// Number of predictable tokens.
    pub fn predictable_size(&self) -> usize {
        self.vocab.len() - 1
    }

    /// Kneser-Ney probability of `w` after `history` (only the last
    /// `order − 1` ids are used; shorter histories are `<s>`-padded).
    pub fn kn_probability(&self, history: &[u32], w: u32) -> f64 {
        if w == BOS_ID {
            return 0.0;
        }
        let ctx_len = self.order - 1;
        let mut padded: Vec<u32>;
        let hist = if history.len() >= ctx_len {
            &history[history.len() - ctx_len..]
        } else {
            padded = vec![BOS_ID; ctx_len - history.len()];
            padded.extend_from_slice(history);
            &padded[..]
        };
        let mut p = 1.0 / self.predictable_size() as f64;
        for m in 1..=self.order {
            let ctx = &hist[hist.len() - (m - 1)..];
            if let Some(stats) = self.levels[m - 1].get(ctx) {
                let c = stats.next.get(&w).copied().unwrap_or(0) as f64;
                let total = stats.total as f64;
                let types = stats.next.len() as f64;
                p = ((c - self.discount).max(0.0) + self.discount * types * p) / total;
            }
        }
        p
    }

    /// Full conditional probability including the cache mixture.
    pub fn conditional(&self, history: &[u32], cache: &ContextCache, w: u32) -> f64 {
        let kn = self.kn_probability(history, w);
        if cache.is_empty() || self.cache_weight == 0.0 {
            kn
        } else {
            (1.0 - self.cache_weight) * kn + self.cache_weight * cache.probability(w)
        }
    }

    /// `(id, probability)` for every predictable token.
    pub fn next_distribution(&self, history: &[u32], cache: &ContextCache) -> Vec<(u32, f64)> {
        self.vocab
            .predictable()
            .map(|w| (w, self.conditional(history, cache, w)))
            .collect()
    }

    fn render_history(&self, req: &ScoreRequest) -> Vec<u32> {
        let mut ids = vec![BOS_ID; self.order - 1];
        for turn in &req.context {
            ids.extend(self.encode(&render_turn(turn.role, &turn.text)));
        }
        ids.push(match req.reply.role {
            Role::A => ROLE_A_ID,
            Role::B => ROLE_B_ID,
        });
        ids
    }

    /// Per-token log probabilities of the reply tokens followed by `</s>`.
    pub fn token_logprobs(&self, req: &ScoreRequest) -> Result<Vec<f64>, ScoreError> {
        let reply = tokenize(&req.reply.text);
        if reply.is_empty() {
            return Err(ScoreError::EmptyReply);
        }
        let cache = ContextCache::from_context(self, &req.context);
        let mut history = self.render_history(req);
        let mut targets = self.encode(&reply);
        targets.push(EOS_ID);
        Ok(targets
            .into_iter()
            .map(|w| {
                let lp = self.conditional(&history, &cache, w).ln();
                history.push(w);
                lp
            })
            .collect())
    }

    /// Cross-entropy per token (natural log) of rendered sequences.
    pub fn perplexity(&self, sequences: &[Vec<String>]) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for seq in sequences {
            let mut history = vec![BOS_ID; self.order - 1];
            for w in self.encode(seq) {
                total += self.kn_probability(&history, w).ln();
                history.push(w);
                n += 1;
            }
        }
        (-total / n.max(1) as f64).exp()
    }

    fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        format!("ngram-{}", &hex::encode(digest)[..16])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.order as u32)?;
        w.write_f64::<LittleEndian>(self.discount)?;
        w.write_u64::<LittleEndian>(self.min_count)?;
        w.write_f64::<LittleEndian>(self.cache_weight)?;
        w.write_f64::<LittleEndian>(self.cache_decay)?;
        w.write_u32::<LittleEndian>(self.vocab.len() as u32)?;
        for tok in &self.vocab.tokens {
            w.write_u32::<LittleEndian>(tok.len() as u32)?;
            w.write_all(tok.as_bytes())?;
        }
        for level in &self.levels {
            let mut contexts: Vec<(&Vec<u32>, &ContextStats)> = level.iter().collect();
            contexts.sort_by(|a, b| a.0.cmp(b.0));
            w.write_u64::<LittleEndian>(contexts.len() as u64)?;
            for (ctx, stats) in contexts {
                for &id in ctx {
                    w.write_u32::<LittleEndian>(id)?;
                }
                let mut next: Vec<(u32, u64)> = stats.next.iter().map(|(k, v)| (*k, *v)).collect();
                next.sort_unstable();
                w.write_u32::<LittleEndian>(next.len() as u32)?;
                for (id, count) in next {
                    w.write_u32::<LittleEndian>(id)?;
                    w.write_u64::<LittleEndian>(count)?;
                }
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ScoreError> {
        let bad = |m: &str| ScoreError::Model(format!("invalid model file: {m}"));
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let io = |_| bad("truncated");
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let order = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let discount = r.read_f64::<LittleEndian>().map_err(io)?;
        let min_count = r.read_u64::<LittleEndian>().map_err(io)?;
        let cache_weight = r.read_f64::<LittleEndian>().map_err(io)?;
        let cache_decay = r.read_f64::<LittleEndian>().map_err(io)?;
        NGramConfig {
            order,
            discount,
            min_count,
            cache_weight,
            cache_decay,
        }
        .validate()?;
        let vocab_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if vocab_len < RESERVED.len() || vocab_len > bytes.len() {
            return Err(bad("vocabulary size"));
        }
        let mut tokens = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            if len > bytes.len() {
                return Err(bad("token length"));
            }
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(io)?;
            tokens.push(String::from_utf8(buf).map_err(|_| bad("token is not UTF-8"))?);
        }
        if tokens[..RESERVED.len()] != RESERVED {
            return Err(bad("reserved tokens out of place"));
        }
        let vocab = Vocabulary::from_tokens(tokens);
        let mut levels = Vec::with_capacity(order);
        for m in 1..=order {
            let n_ctx = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            if n_ctx > bytes.len() {
                return Err(bad("context count"));
            }
            let mut level = HashMap::with_capacity(n_ctx);
            for _ in 0..n_ctx {
                let mut ctx = Vec::with_capacity(m - 1);
                for _ in 0..m - 1 {
                    ctx.push(r.read_u32::<LittleEndian>().map_err(io)?);
                }
                let n_next = r.read_u32::<LittleEndian>().map_err(io)? as usize;
                let mut stats = ContextStats::default();
                for _ in 0..n_next {
                    let id = r.read_u32::<LittleEndian>().map_err(io)?;
                    let count = r.read_u64::<LittleEndian>().map_err(io)?;
                    if id as usize >= vocab_len || count == 0 {
                        return Err(bad("count entry"));
                    }
                    stats.next.insert(id, count);
                    stats.total += count;
                }
                if ctx.iter().any(|&id| id as usize >= vocab_len) {
                    return Err(bad("context id"));
                }
                level.insert(ctx, stats);
            }
            levels.push(level);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let mut model = NGramModel {
            order,
            discount,
            min_count,
            cache_weight,
            cache_decay,
            vocab,
            levels,
            id: String::new(),
        };
        model.id = model.fingerprint();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScoreError> {
        fs::write(path, self.to_bytes())
            .map_err(|e| ScoreError::Model(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ScoreError> {
        let bytes = fs::read(path)
            .map_err(|e| ScoreError::Model(format!("reading {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

impl Scorer for NGramModel {
    fn model_id(&self) -> String {
        self.id.clone()
    }

    fn sequence_logprob(&self, req: &ScoreRequest) -> Result<LogProbResult, ScoreError> {
        let lps = self.token_logprobs(req)?;
        Ok(LogProbResult {
            total_logprob: lps.iter().sum(),
            token_count: lps.len() as u32,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(raw: &[&str]) -> Vec<Vec<String>> {
        raw.iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    fn assert_normalized(model: &NGramModel, history: &[u32], cache: &ContextCache) {
        let sum: f64 = model.next_distribution(history, cache).iter().map(|(_, p)| p).sum();
        assert!((sum - 1.0).abs() < 1e-9, "sum = {sum}");
        for (_, p) in model.next_distribution(history, cache) {
            assert!(p > 0.0 && p <= 1.0);
        }
    }

    #[test]
    fn bigram_on_tiny_stream() {
        let cfg = NGramConfig {
            order: 2,
            cache_weight: 0.0,
            ..Default::default()
        };
        let model = NGramModel::train(&seqs(&["a a b </s>"]), &cfg).unwrap();
        let a = model.vocabulary().id("a");
        let p = model.kn_probability(&[a], a);
        assert!(p > 0.0 && p < 1.0);
        assert_normalized(&model, &[a], &ContextCache::empty());
        // c(a a)=1, c(a ·)=2, two continuation types after `a`;
        // lower order: N1+(· a)=2 (<s> a, a a), N1+(· b)=1, N1+(· </s>)=1 => total 4, 3 types
        let v = model.predictable_size() as f64;
        let d = 0.75;
        let uni_a = ((2.0 - d) + d * 3.0 / v) / 4.0;
        let expected = ((1.0 - d) + d * 2.0 * uni_a) / 2.0;
        assert!((p - expected).abs() < 1e-15);
    }

    #[test]
    fn unigram_single_token_mode() {
        let cfg = NGramConfig {
            order: 1,
            ..Default::default()
        };
        let model = NGramModel::train(&seqs(&["x x x x"]), &cfg).unwrap();
        let dist = model.next_distribution(&[], &ContextCache::empty());
        let x = model.vocabulary().id("x");
        let (mode, _) = dist
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(mode, x);
    }

    #[test]
    fn disjoint_corpora_cross_perplexity() {
        let cfg = NGramConfig::default();
        let c1 = seqs(&["the cat sat on the mat </s>", "the cat ate the rat </s>"]);
        let c2 = seqs(&["zebras run far away </s>", "zebras eat grass daily </s>"]);
        let m1 = NGramModel::train(&c1, &cfg).unwrap();
        assert!(m1.perplexity(&c2) > m1.perplexity(&c1));
    }

    #[test]
    fn empty_training_set_errors() {
        assert!(NGramModel::train(&[], &NGramConfig::default()).is_err());
        assert!(NGramModel::train(&[vec![]], &NGramConfig::default()).is_err());
    }

    #[test]
    fn min_count_maps_rare_tokens_to_unk() {
        let cfg = NGramConfig {
            min_count: 2,
            ..Default::default()
        };
        let model = NGramModel::train(&seqs(&["a a b </s>"]), &cfg).unwrap();
        assert_eq!(model.vocabulary().id("b"), UNK_ID);
        assert_ne!(model.vocabulary().id("a"), UNK_ID);
    }

    #[test]
    fn normalized_with_cache_and_unseen_history() {
        let model = NGramModel::train(&seqs(&["<A> hi there </s> <B> hello you </s>"]), &NGramConfig::default()).unwrap();
        let ctx = [Turn::new(Role::A, "hi there"), Turn::new(Role::B, "you you")];
        let cache = ContextCache::from_context(&model, &ctx);
        assert!(!cache.is_empty());
        for hist in [vec![], vec![EOS_ID, ROLE_B_ID], vec![UNK_ID, UNK_ID], vec![7, 3, 9]] {
            assert_normalized(&model, &hist, &cache);
            assert_normalized(&model, &hist, &ContextCache::empty());
        }
    }

    #[test]
    fn empty_context_scores_and_empty_reply_fails() {
        let model = NGramModel::train(&seqs(&["<A> hi </s> <B> yo </s>"]), &NGramConfig::default()).unwrap();
        let req = ScoreRequest::new(vec![], Turn::new(Role::B, "yo"));
        let lp = model.sequence_logprob(&req).unwrap();
        assert_eq!(lp.token_count, 2);
        assert!(lp.total_logprob < 0.0);
        let same = ScoreRequest::new(vec![Turn::new(Role::B, "yo")], Turn::new(Role::B, "yo"));
        assert!(model.sequence_logprob(&same).is_ok());
        let empty = ScoreRequest::new(vec![], Turn::new(Role::B, "   "));
        assert_eq!(model.sequence_logprob(&empty), Err(ScoreError::EmptyReply));
    }

    #[test]
    fn cache_prefers_replies_that_echo_context() {
        let model = NGramModel::train(
            &seqs(&["<A> apples pears </s> <B> plums figs </s>", "<A> figs plums </s> <B> pears apples </s>"]),
            &NGramConfig::default(),
        )
        .unwrap();
        let reply = Turn::new(Role::B, "apples pears");
        let echo = model
            .sequence_logprob(&ScoreRequest::new(vec![Turn::new(Role::A, "apples pears")], reply.clone()))
            .unwrap();
        let other = model
            .sequence_logprob(&ScoreRequest::new(vec![Turn::new(Role::A, "plums figs")], reply))
            .unwrap();
        assert!(echo.total_logprob > other.total_logprob);
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let model = NGramModel::train(&seqs(&["<A> a b c </s>", "<B> c b a </s>"]), &NGramConfig::default()).unwrap();
        let bytes = model.to_bytes();
        let back = NGramModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_bytes(), bytes);
        assert!(NGramModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(NGramModel::from_bytes(&bad).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(NGramModel::from_bytes(&trailing).is_err());
    }

    #[test]
    fn model_id_tracks_parameters() {
        let model = NGramModel::train(&seqs(&["<A> a </s>"]), &NGramConfig::default()).unwrap();
        let other = model.with_cache(0.0, 1.0).unwrap();
        assert_ne!(model.model_id(), other.model_id());
        assert!(model.model_id().starts_with("ngram-"));
    }
}
