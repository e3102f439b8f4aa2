//! Two-role conversation corpora: loading line-delimited utterance records,
//! normalizing them into [`Conversation`]s, and writing the normalized form
//! back out.
//!
//! Input records are JSON objects, one per line. The canonical fields are
//! `id`, `conversation_id`, `speaker`, `timestamp`, `text`, and the optional
//! `reply_to` and `meta`. A [`FieldMapping`] renames fields (dotted paths
//! reach into nested objects, e.g. `meta.case_id`) and assigns raw speaker
//! labels to the two roles. Records whose speaker has no role are dropped
//! and counted.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::tokenize::tokenize;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mapping config line {line}: {message}")]
    Mapping { line: usize, message: String },
    #[error("invalid automated-message pattern {pattern:?}: {source}")]
    Pattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Speaker role in a dyad. `A` is the therapist/justice side, `B` the
/// patient/lawyer side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    A,
    B,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::A => Role::B,
            Role::B => Role::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::A => "A",
            Role::B => "B",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Role::A),
            "B" | "b" => Ok(Role::B),
            other => Err(format!("unknown role {other:?} (expected A or B)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub conversation_id: String,
    pub role: Role,
    /// Seconds since the epoch.
    pub timestamp: i64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_to: Option<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        conversation_id: impl Into<String>,
        role: Role,
        timestamp: i64,
        text: impl Into<String>,
    ) -> Self {
        Utterance {
            id: id.into(),
            conversation_id: conversation_id.into(),
            role,
            timestamp,
            text: text.into(),
            reply_to: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn meta_flag(&self, key: &str) -> bool {
        self.meta
            .get(key)
            .is_some_and(|v| matches!(v.trim().to_ascii_lowercase().as_str(), "true" | "1" | "yes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Unsuccessful,
    Control,
    Unlabeled,
}

impl FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unsuccessful" => Ok(Outcome::Unsuccessful),
            "control" => Ok(Outcome::Control),
            "unlabeled" | "" => Ok(Outcome::Unlabeled),
            other => Err(format!("unknown outcome {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    /// Sorted by timestamp; ties keep input order.
    pub utterances: Vec<Utterance>,
    pub outcome: Option<Outcome>,
    /// Switch/cancel reason code such as `s2` or `c3`.
    pub outcome_reason: Option<String>,
}

impl Conversation {
    /// Builds a conversation, stable-sorting the utterances by timestamp and
    /// reading outcome labels from the first utterance that carries the
    /// `outcome` / `outcome_reason` meta keys.
    pub fn new(id: impl Into<String>, mut utterances: Vec<Utterance>) -> Self {
        utterances.sort_by_key(|u| u.timestamp);
        let outcome = utterances
            .iter()
            .find_map(|u| u.meta.get("outcome"))
            .and_then(|v| v.parse().ok());
        let outcome_reason = utterances
            .iter()
            .find_map(|u| u.meta.get("outcome_reason"))
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty());
        Conversation {
            id: id.into(),
            utterances,
            outcome,
            outcome_reason,
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn has_both_roles(&self) -> bool {
        self.utterances.iter().any(|u| u.role == Role::A)
            && self.utterances.iter().any(|u| u.role == Role::B)
    }
}

/// Counters collected while loading.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub records_read: usize,
    pub dropped_unmapped_speaker: usize,
    pub dropped_empty_text: usize,
    pub skipped_conversations: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Default)]
pub struct Corpus {
    /// Ordered by conversation id.
    pub conversations: Vec<Conversation>,
    pub report: LoadReport,
    vocabulary: OnceLock<BTreeMap<String, u64>>,
}

impl Clone for Corpus {
    fn clone(&self) -> Self {
        Corpus {
            conversations: self.conversations.clone(),
            report: self.report.clone(),
            vocabulary: OnceLock::new(),
        }
    }
}

impl Corpus {
    pub fn new(mut conversations: Vec<Conversation>) -> Self {
        conversations.sort_by(|a, b| a.id.cmp(&b.id));
        Corpus {
            conversations,
            report: LoadReport::default(),
            vocabulary: OnceLock::new(),
        }
    }

    pub fn utterance_count(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    pub fn get(&self, conversation_id: &str) -> Option<&Conversation> {
        self.conversations
            .binary_search_by(|c| c.id.as_str().cmp(conversation_id))
            .ok()
            .map(|i| &self.conversations[i])
    }

    /// Token counts over every utterance, computed on first use.
    pub fn vocabulary_stats(&self) -> &BTreeMap<String, u64> {
        self.vocabulary.get_or_init(|| {
            let mut counts = BTreeMap::new();
            for u in self.conversations.iter().flat_map(|c| &c.utterances) {
                for tok in tokenize(&u.text) {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
            counts
        })
    }

    /// Writes `utterances.jsonl` and `manifest.json` into `dir`.
    pub fn write_normalized(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        let path = dir.join("utterances.jsonl");
        let mut out = std::io::BufWriter::new(
            fs::File::create(&path).map_err(|e| CorpusError::io(&path, e))?,
        );
        for u in self.conversations.iter().flat_map(|c| &c.utterances) {
            let record = NormalizedRecord {
                id: &u.id,
                conversation_id: &u.conversation_id,
                speaker: u.role,
                reply_to: u.reply_to.as_deref(),
                timestamp: u.timestamp,
                text: &u.text,
                meta: &u.meta,
            };
            let line = serde_json::to_string(&record).expect("normalized record serializes");
            writeln!(out, "{line}").map_err(|e| CorpusError::io(&path, e))?;
        }
        out.flush().map_err(|e| CorpusError::io(&path, e))?;

        let manifest = serde_json::json!({
            "format": "convo-redirect/normalized-corpus",
            "version": 1,
            "conversations": self.conversations.len(),
            "utterances": self.utterance_count(),
            "report": self.report,
        });
        let mpath = dir.join("manifest.json");
        fs::write(
            &mpath,
            serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
        )
        .map_err(|e| CorpusError::io(&mpath, e))
    }

    /// Reads a directory written by [`Corpus::write_normalized`].
    pub fn load_normalized(dir: &Path) -> Result<Corpus, CorpusError> {
        load_corpus(&dir.join("utterances.jsonl"), &FieldMapping::identity())
    }
}

#[derive(Serialize)]
struct NormalizedRecord<'a> {
    id: &'a str,
    conversation_id: &'a str,
    speaker: Role,
    #[serde(skip_serializing_if = "Option::is_none")]
    reply_to: Option<&'a str>,
    timestamp: i64,
    text: &'a str,
    meta: &'a BTreeMap<String, String>,
}

/// What to do with a record that has no usable timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingTimestamp {
    Error,
    /// Use the record's 0-based line index as its timestamp.
    LineOrder,
}

/// Field renames and speaker-to-role assignment.
///
/// The text format is one `key = value` pair per line, `#` starts a comment:
///
/// ```text
/// field.conversation_id = meta.case_id
/// field.speaker = meta.speaker_type
/// speaker.J = A
/// speaker.A = B
/// timestamp.missing = order
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMapping {
    pub id: String,
    pub conversation_id: String,
    pub speaker: String,
    pub timestamp: String,
    pub text: String,
    pub reply_to: String,
    pub meta: String,
    pub speakers: BTreeMap<String, Role>,
    pub missing_timestamp: MissingTimestamp,
}

impl Default for FieldMapping {
    fn default() -> Self {
        Self::identity()
    }
}

impl FieldMapping {
    /// Canonical field names, speakers `A` and `B` mapped to themselves.
    pub fn identity() -> Self {
        FieldMapping {
            id: "id".into(),
            conversation_id: "conversation_id".into(),
            speaker: "speaker".into(),
            timestamp: "timestamp".into(),
            text: "text".into(),
            reply_to: "reply_to".into(),
            meta: "meta".into(),
            speakers: BTreeMap::from([("A".into(), Role::A), ("B".into(), Role::B)]),
            missing_timestamp: MissingTimestamp::Error,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses the key-value format. Declaring any `speaker.*` entry replaces
    /// the default `A`/`B` identity assignment.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut mapping = Self::identity();
        let mut speakers = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| CorpusError::Mapping {
                line: line_no,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(err(format!("empty value for {key}")));
            }
            if let Some(label) = key.strip_prefix("speaker.") {
                let role = value.parse::<Role>().map_err(err)?;
                speakers.insert(label.to_string(), role);
            } else if let Some(field) = key.strip_prefix("field.") {
                let slot = match field {
                    "id" => &mut mapping.id,
                    "conversation_id" => &mut mapping.conversation_id,
                    "speaker" => &mut mapping.speaker,
                    "timestamp" => &mut mapping.timestamp,
                    "text" => &mut mapping.text,
                    "reply_to" => &mut mapping.reply_to,
                    "meta" => &mut mapping.meta,
                    other => return Err(err(format!("unknown field {other:?}"))),
                };
                *slot = value.to_string();
            } else if key == "timestamp.missing" {
                mapping.missing_timestamp = match value {
                    "error" => MissingTimestamp::Error,
                    "order" => MissingTimestamp::LineOrder,
                    other => return Err(err(format!("timestamp.missing must be error|order, got {other:?}"))),
                };
            } else {
                return Err(err(format!("unknown key {key:?}")));
            }
        }
        if !speakers.is_empty() {
            mapping.speakers = speakers;
        }
        Ok(mapping)
    }
}

fn lookup<'a>(record: &'a Value, path: &str) -> Option<&'a Value> {
    let mut cur = record;
    for part in path.split('.') {
        cur = cur.get(part)?;
    }
    if cur.is_null() {
        None
    } else {
        Some(cur)
    }
}

fn value_to_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_timestamp(v: &Value) -> Result<i64, String> {
    let ts = match v {
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i
            } else {
                let f = n.as_f64().ok_or("timestamp out of range")?;
                if !f.is_finite() {
                    return Err("timestamp not finite".into());
                }
                f.floor() as i64
            }
        }
        Value::String(s) => {
            let s = s.trim();
            match s.parse::<i64>() {
                Ok(i) => i,
                Err(_) => s
                    .parse::<f64>()
                    .ok()
                    .filter(|f| f.is_finite())
                    .map(|f| f.floor() as i64)
                    .ok_or_else(|| format!("unparseable timestamp {s:?}"))?,
            }
        }
        other => return Err(format!("timestamp must be a number, got {other}")),
    };
    if ts < 0 {
        return Err(format!("negative timestamp {ts}"));
    }
    Ok(ts)
}

/// Normalizes message text: CRLF to LF, surrounding whitespace trimmed.
pub fn normalize_text(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n").trim().to_string()
}

/// Loads a line-delimited corpus file.
pub fn load_corpus(path: &Path, mapping: &FieldMapping) -> Result<Corpus, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    load_corpus_from_reader(file, mapping)
}

pub fn load_corpus_from_reader<R: Read>(
    reader: R,
    mapping: &FieldMapping,
) -> Result<Corpus, CorpusError> {
    let mut report = LoadReport::default();
    let mut by_conv: HashMap<String, Vec<Utterance>> = HashMap::new();
    let mut seen_ids: HashMap<String, usize> = HashMap::new();

    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CorpusError::Parse {
            line: line_no,
            message,
        };
        let record: Value =
            serde_json::from_str(&line).map_err(|e| parse_err(format!("invalid JSON: {e}")))?;
        if !record.is_object() {
            return Err(parse_err("record is not a JSON object".into()));
        }
        report.records_read += 1;

        let required = |field: &str| {
            lookup(&record, field)
                .map(value_to_string)
                .ok_or_else(|| parse_err(format!("missing field {field:?}")))
        };
        let id = required(&mapping.id)?;
        let conversation_id = required(&mapping.conversation_id)?;
        // A record without a speaker value is treated like an unmapped one.
        let speaker = lookup(&record, &mapping.speaker).map(value_to_string);
        let raw_text = required(&mapping.text)?;
        let timestamp = match lookup(&record, &mapping.timestamp) {
            Some(v) => parse_timestamp(v).map_err(parse_err)?,
            None => match mapping.missing_timestamp {
                MissingTimestamp::Error => {
                    return Err(parse_err(format!("missing field {:?}", mapping.timestamp)))
                }
                MissingTimestamp::LineOrder => idx as i64,
            },
        };

        if let Some(prev) = seen_ids.insert(id.clone(), line_no) {
            return Err(parse_err(format!(
                "duplicate utterance id {id:?} (first seen on line {prev})"
            )));
        }

        let Some(&role) = speaker.and_then(|s| mapping.speakers.get(&s)) else {
            report.dropped_unmapped_speaker += 1;
            continue;
        };
        let text = normalize_text(&raw_text);
        if text.is_empty() {
            report.dropped_empty_text += 1;
            continue;
        }
        let meta = match lookup(&record, &mapping.meta) {
            Some(Value::Object(map)) => map
                .iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k.clone(), value_to_string(v)))
                .collect(),
            Some(_) => return Err(parse_err("meta must be an object".into())),
            None => BTreeMap::new(),
        };
        let reply_to = lookup(&record, &mapping.reply_to).map(value_to_string);

        by_conv
            .entry(conversation_id.clone())
            .or_default()
            .push(Utterance {
                id,
                conversation_id,
                role,
                timestamp,
                text,
                reply_to,
                meta,
            });
    }

    let mut conversations = Vec::with_capacity(by_conv.len());
    for (cid, utts) in by_conv {
        if utts.len() < 2 {
            report.skipped_conversations += 1;
            report
                .warnings
                .push(format!("conversation {cid}: fewer than 2 utterances, skipped"));
            continue;
        }
        conversations.push(Conversation::new(cid, utts));
    }
    report.warnings.sort();
    let mut corpus = Corpus::new(conversations);
    corpus.report = report;
    Ok(corpus)
}

/// Merges each maximal run of same-role utterances into one utterance.
///
/// Texts are joined with `\n`; the merged utterance keeps the id, timestamp
/// and meta of the first message in the run (later messages only add meta
/// keys the first one lacks).
pub fn merge_turns(conv: &Conversation) -> Conversation {
    Conversation {
        id: conv.id.clone(),
        utterances: merge_utterances(&conv.utterances),
        outcome: conv.outcome,
        outcome_reason: conv.outcome_reason.clone(),
    }
}

pub(crate) fn merge_utterances(utterances: &[Utterance]) -> Vec<Utterance> {
    let mut merged: Vec<Utterance> = Vec::with_capacity(utterances.len());
    for u in utterances {
        match merged.last_mut() {
            Some(last) if last.role == u.role => {
                last.text.push('\n');
                last.text.push_str(&u.text);
                for (k, v) in &u.meta {
                    last.meta.entry(k.clone()).or_insert_with(|| v.clone());
                }
            }
            _ => merged.push(u.clone()),
        }
    }
    merged
}

/// Compiled list of automated-message patterns. A message is automated when
/// its full text matches any pattern.
#[derive(Debug, Clone, Default)]
pub struct AutomatedFilter {
    patterns: Vec<Regex>,
}

impl AutomatedFilter {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self, CorpusError> {
        let patterns = patterns
            .iter()
            .map(|p| {
                let p = p.as_ref();
                Regex::new(&format!("(?s)^(?:{p})$")).map_err(|source| CorpusError::Pattern {
                    pattern: p.to_string(),
                    source,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(AutomatedFilter { patterns })
    }

    /// One regular expression per non-blank line; lines starting with `#`
    /// are comments.
    pub fn from_file(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Self::new(&lines)
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn is_automated(&self, text: &str) -> bool {
        self.patterns.iter().any(|re| re.is_match(text))
    }
}

/// Removes automated messages, preserving the order of the rest.
pub fn filter_automated(conv: &Conversation, filter: &AutomatedFilter) -> Conversation {
    Conversation {
        id: conv.id.clone(),
        utterances: conv
            .utterances
            .iter()
            .filter(|u| !filter.is_automated(&u.text))
            .cloned()
            .collect(),
        outcome: conv.outcome,
        outcome_reason: conv.outcome_reason.clone(),
    }
}
