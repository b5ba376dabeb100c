//! Deterministic synthetic corpus: topic-clustered users over a small item
//! catalog, with planted popularity skew inside each topic. Desk-scale runs
//! and the integration suites train on this data, so the generator must be
//! bit-stable across runs of the same config.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Interaction, ItemText};
use crate::error::{Result, UnitError};
use crate::rng::{stream, STREAM_SYNTH};

/// Three shared words per topic; items in the same topic overlap lexically,
/// so hash-encoded vectors cluster by topic.
const BANK: [&str; 36] = [
    "amber", "birch", "cedar", "dune", "ember", "fjord", "grove", "heath", "islet", "juniper",
    "kelp", "lagoon", "maple", "nectar", "oasis", "pebble", "quartz", "reef", "sage", "thicket",
    "umber", "vale", "willow", "yarrow", "aspen", "bramble", "clover", "delta", "elm", "fern",
    "glen", "hazel", "iris", "jade", "knoll", "larch",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub topics: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability each drawn item comes from the user's home topic.
    pub home_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 500,
            items: 200,
            topics: 10,
            min_len: 8,
            max_len: 12,
            home_prob: 0.85,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.users > 9999 {
            return Err(UnitError::Config(format!(
                "synth users must be in 1..=9999, got {}",
                self.users
            )));
        }
        if self.items > 9999 {
            return Err(UnitError::Config(format!(
                "synth items must be <= 9999, got {}",
                self.items
            )));
        }
        if self.topics == 0 || self.items < self.topics {
            return Err(UnitError::Config(format!(
                "need items >= topics >= 1, got {} items, {} topics",
                self.items, self.topics
            )));
        }
        if self.min_len < 2 || self.min_len > self.max_len || self.max_len > self.items {
            return Err(UnitError::Config(format!(
                "need 2 <= min_len <= max_len <= items, got {}..{} over {} items",
                self.min_len, self.max_len, self.items
            )));
        }
        if !(self.home_prob > 0.0 && self.home_prob <= 1.0) {
            return Err(UnitError::Config(format!(
                "home_prob must be in (0, 1], got {}",
                self.home_prob
            )));
        }
        Ok(())
    }
}

fn topic_words(t: usize) -> [String; 3] {
    if t < BANK.len() / 3 {
        [BANK[3 * t].into(), BANK[3 * t + 1].into(), BANK[3 * t + 2].into()]
    } else {
        [format!("topicword{t}a"), format!("topicword{t}b"), format!("topicword{t}c")]
    }
}

fn item_id(i: usize) -> String {
    // Zero-padded so lexicographic catalog order equals numeric order.
    format!("item{i:04}")
}

/// Users draw mostly from their home topic (`u % topics`); within a topic,
/// index `⌊r²·k⌋` skews draws toward the topic's low-numbered members, which
/// plants the popular/cold structure the geometry diagnostics look for.
/// Sequences are repeat-free; a post-pass plants each never-drawn item at
/// the head of some user's history so the catalog is fully covered.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<Interaction>, Vec<ItemText>)> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, &[STREAM_SYNTH]);

    let members: Vec<Vec<usize>> = (0..cfg.topics)
        .map(|t| (t..cfg.items).step_by(cfg.topics).collect())
        .collect();

    let mut interactions = Vec::new();
    let mut used: Vec<HashSet<usize>> = vec![HashSet::new(); cfg.users];
    let mut drawn_len = vec![0usize; cfg.users];
    let mut covered = vec![false; cfg.items];

    for u in 0..cfg.users {
        let home = u % cfg.topics;
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let user = format!("user{u:04}");
        for pos in 0..len {
            let topic = if cfg.topics == 1 || rng.random::<f64>() < cfg.home_prob {
                home
            } else {
                let mut t = rng.random_range(0..cfg.topics - 1);
                if t >= home {
                    t += 1;
                }
                t
            };
            let mut pick = None;
            for _ in 0..32 {
                let r: f64 = rng.random();
                let k = members[topic].len();
                let idx = ((r * r * k as f64) as usize).min(k - 1);
                let cand = members[topic][idx];
                if !used[u].contains(&cand) {
                    pick = Some(cand);
                    break;
                }
            }
            let item = pick
                .or_else(|| members[topic].iter().copied().find(|i| !used[u].contains(i)))
                .or_else(|| (0..cfg.items).find(|i| !used[u].contains(i)))
                .expect("len <= items leaves an unused item");
            used[u].insert(item);
            covered[item] = true;
            interactions.push(Interaction {
                user: user.clone(),
                item: item_id(item),
                timestamp: pos as i64,
            });
        }
        drawn_len[u] = len;
    }

    // Coverage pass: plant each missing item at the head of the first user
    // (cyclic scan) that lacks it and still has room under max_len.
    let mut cursor = 0usize;
    let mut forced = vec![0i64; cfg.users];
    for item in (0..cfg.items).filter(|&i| !covered[i]) {
        let mut placed = false;
        for off in 0..cfg.users {
            let u = (cursor + off) % cfg.users;
            if used[u].contains(&item) || drawn_len[u] + forced[u] as usize >= cfg.max_len {
                continue;
            }
            forced[u] += 1;
            used[u].insert(item);
            interactions.push(Interaction {
                user: format!("user{u:04}"),
                item: item_id(item),
                timestamp: -forced[u],
            });
            cursor = (u + 1) % cfg.users;
            placed = true;
            break;
        }
        if !placed {
            return Err(UnitError::Data(format!(
                "cannot cover item {item}: every user is at max_len"
            )));
        }
    }

    let texts = (0..cfg.items)
        .map(|i| {
            let [a, b, c] = topic_words(i % cfg.topics);
            ItemText { item: item_id(i), text: format!("{a} {b} {c} {}", item_id(i)) }
        })
        .collect();

    Ok((interactions, texts))
}
