//! Seeded synthetic corpora with known structure, used by tests and demos.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Conversation, Corpus, Role, Utterance};

const EPOCH: i64 = 1_600_000_000;
const TURN_GAP: (i64, i64) = (30, 120);
const SESSION_GAP: i64 = 7 * 24 * 3600;

fn topic_words(topics: usize, words: usize) -> Vec<Vec<String>> {
    (0..topics)
        .map(|t| (0..words).map(|w| format!("t{t}w{w}")).collect())
        .collect()
}

/// Replies that borrow from the utterance they answer.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub conversations: usize,
    pub sessions_per_conversation: (usize, usize),
    pub utterances_per_session: (usize, usize),
    pub tokens_per_utterance: (usize, usize),
    /// Chance that a token is copied from the preceding utterance rather
    /// than drawn from that utterance's distractor topic.
    pub copy_prob: f64,
    pub topics: usize,
    pub words_per_topic: usize,
    /// Every n-th conversation is labeled with reason code `s2`.
    pub unsuccessful_every: Option<usize>,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            conversations: 20,
            sessions_per_conversation: (3, 12),
            utterances_per_session: (6, 10),
            tokens_per_utterance: (4, 9),
            copy_prob: 0.7,
            topics: 30,
            words_per_topic: 20,
            unsuccessful_every: None,
        }
    }
}

/// Generates alternating A/B conversations whose sessions are separated by
/// week-long gaps. The first utterance of a session is drawn from one
/// topic; each later token copies a random token of the previous utterance
/// with probability `copy_prob`, otherwise it comes from a fresh
/// distractor topic picked per utterance.
pub fn planted_redirection_corpus(cfg: &PlantedConfig, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics = topic_words(cfg.topics.max(1), cfg.words_per_topic.max(1));
    let mut convs = Vec::with_capacity(cfg.conversations);
    for c in 0..cfg.conversations {
        let cid = format!("planted-{c:04}");
        let n_sessions = rng.random_range(cfg.sessions_per_conversation.0..=cfg.sessions_per_conversation.1);
        let mut ts = EPOCH + c as i64 * 1000;
        let mut utts = Vec::new();
        for s in 0..n_sessions {
            let n_utts = rng.random_range(cfg.utterances_per_session.0..=cfg.utterances_per_session.1);
            let mut prev: Vec<String> = Vec::new();
            for i in 0..n_utts {
                let len = rng.random_range(cfg.tokens_per_utterance.0..=cfg.tokens_per_utterance.1);
                let distractor = topics.choose(&mut rng).expect("topics");
                let toks: Vec<String> = (0..len)
                    .map(|_| {
                        if !prev.is_empty() && rng.random_bool(cfg.copy_prob) {
                            prev.choose(&mut rng).expect("non-empty").clone()
                        } else {
                            distractor.choose(&mut rng).expect("words").clone()
                        }
                    })
                    .collect();
                let role = if i % 2 == 0 { Role::A } else { Role::B };
                let mut u = Utterance::new(format!("{cid}-{s}-{i}"), cid.as_str(), role, ts, toks.join(" "));
                if i == 0 && s == 0 {
                    if let Some(every) = cfg.unsuccessful_every {
                        if every > 0 && c % every == 0 {
                            u.meta.insert("outcome".into(), "unsuccessful".into());
                            u.meta.insert("outcome_reason".into(), "s2".into());
                        }
                    }
                }
                utts.push(u);
                prev = toks;
                ts += rng.random_range(TURN_GAP.0..=TURN_GAP.1);
            }
            ts += SESSION_GAP;
        }
        convs.push(Conversation::new(cid, utts));
    }
    Corpus::new(convs)
}

/// Sessions that open with `greeting` and close with `farewell`; neither
/// token occurs anywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct GreetingConfig {
    pub conversations: usize,
    pub sessions_per_conversation: usize,
    pub utterances_per_session: (usize, usize),
    pub greeting: String,
    pub farewell: String,
}

impl Default for GreetingConfig {
    fn default() -> Self {
        GreetingConfig {
            conversations: 10,
            sessions_per_conversation: 5,
            utterances_per_session: (6, 10),
            greeting: "hi".into(),
            farewell: "thanks".into(),
        }
    }
}

pub fn greeting_farewell_corpus(cfg: &GreetingConfig, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics = topic_words(12, 15);
    let mut convs = Vec::with_capacity(cfg.conversations);
    for c in 0..cfg.conversations {
        let cid = format!("greet-{c:04}");
        let mut ts = EPOCH + c as i64 * 1000;
        let mut utts = Vec::new();
        for s in 0..cfg.sessions_per_conversation {
            let n = rng.random_range(cfg.utterances_per_session.0..=cfg.utterances_per_session.1);
            for i in 0..n {
                let topic = topics.choose(&mut rng).expect("topics");
                let len = rng.random_range(3..=8);
                let mut words: Vec<&str> = (0..len)
                    .map(|_| topic.choose(&mut rng).expect("words").as_str())
                    .collect();
                if i == 0 {
                    words.insert(0, &cfg.greeting);
                }
                if i + 1 == n {
                    words.push(&cfg.farewell);
                }
                let role = if i % 2 == 0 { Role::A } else { Role::B };
                utts.push(Utterance::new(format!("{cid}-{s}-{i}"), cid.as_str(), role, ts, words.join(" ")));
                ts += rng.random_range(TURN_GAP.0..=TURN_GAP.1);
            }
            ts += SESSION_GAP;
        }
        convs.push(Conversation::new(cid, utts));
    }
    Corpus::new(convs)
}

/// Alternating bursts of 6 to 12 messages 30 to 120 s apart, separated by
/// log-uniform gaps between roughly an hour and four months.
pub fn bursty_corpus(conversations: usize, bursts: (usize, usize), seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut convs = Vec::with_capacity(conversations);
    for c in 0..conversations {
        let cid = format!("bursty-{c:04}");
        let mut ts = EPOCH;
        let mut utts = Vec::new();
        let n_bursts = rng.random_range(bursts.0..=bursts.1);
        let mut k = 0;
        for _ in 0..n_bursts {
            for i in 0..rng.random_range(6..=12) {
                let role = if i % 2 == 0 { Role::A } else { Role::B };
                utts.push(Utterance::new(format!("{cid}-{k}"), cid.as_str(), role, ts, format!("message {k}")));
                k += 1;
                ts += rng.random_range(TURN_GAP.0..=TURN_GAP.1);
            }
            let exponent: f64 = rng.random_range(3.5..7.0);
            ts += 10f64.powf(exponent) as i64;
        }
        convs.push(Conversation::new(cid, utts));
    }
    Corpus::new(convs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{segment_corpus, SegmentationConfig};

    #[test]
    fn planted_is_deterministic_and_segments() {
        let cfg = PlantedConfig {
            conversations: 3,
            ..PlantedConfig::default()
        };
        let a = planted_redirection_corpus(&cfg, 7);
        let b = planted_redirection_corpus(&cfg, 7);
        assert_eq!(a.conversations, b.conversations);
        let segs = segment_corpus(&a, &SegmentationConfig::default()).unwrap();
        for (conv, seg) in a.conversations.iter().zip(&segs) {
            let expected = conv.utterances.iter().filter(|u| u.id.ends_with("-0")).count();
            assert_eq!(seg.sessions.len(), expected);
        }
    }

    #[test]
    fn replies_share_tokens_with_focal() {
        let cfg = PlantedConfig {
            conversations: 2,
            copy_prob: 1.0,
            ..PlantedConfig::default()
        };
        let corpus = planted_redirection_corpus(&cfg, 1);
        let utts = &corpus.conversations[0].utterances;
        let first: Vec<&str> = utts[0].text.split(' ').collect();
        assert!(utts[1].text.split(' ').all(|t| first.contains(&t)));
    }

    #[test]
    fn greeting_tokens_only_at_boundaries() {
        let corpus = greeting_farewell_corpus(&GreetingConfig::default(), 3);
        let segs = segment_corpus(&corpus, &SegmentationConfig::default()).unwrap();
        for s in segs.iter().flat_map(|c| &c.sessions) {
            let n = s.utterances.len();
            for (i, u) in s.utterances.iter().enumerate() {
                assert_eq!(u.text.starts_with("hi "), i == 0);
                assert_eq!(u.text.ends_with(" thanks"), i + 1 == n);
            }
        }
    }

    #[test]
    fn labels_every_nth() {
        let cfg = PlantedConfig {
            conversations: 6,
            unsuccessful_every: Some(3),
            ..PlantedConfig::default()
        };
        let corpus = planted_redirection_corpus(&cfg, 2);
        let labeled = corpus.conversations.iter().filter(|c| c.outcome_reason.is_some()).count();
        assert_eq!(labeled, 2);
    }
}
