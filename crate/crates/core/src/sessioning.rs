//! Batch assembly (pre-gold, sampled middle, post-gold) and the per-session
//! state machine.

use std::collections::{BTreeSet, HashMap, HashSet};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, GoldPhase};
use crate::votes::CleanupReport;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Uniform,
    LeastVoted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub pre_count: usize,
    pub random_count: usize,
    pub post_count: usize,
    /// Client-side pacing between prompts; the server only audits it.
    pub min_display_seconds: u64,
    pub sampling: Sampling,
    pub rng_seed: Option<u64>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            pre_count: 5,
            random_count: 40,
            post_count: 5,
            min_display_seconds: 5,
            sampling: Sampling::Uniform,
            rng_seed: None,
        }
    }
}

impl BatchConfig {
    pub fn batch_size(&self) -> usize {
        self.pre_count + self.random_count + self.post_count
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size() == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Completed,
    Abandoned,
}

/// Which part of the batch a slot belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Pre,
    Middle,
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub user_id: String,
    pub prompt_order: Vec<String>,
    pub pre_count: usize,
    pub post_count: usize,
    /// Number of slots already answered or skipped; the next slot is `cursor + 1`.
    pub cursor: usize,
    pub status: SessionStatus,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub last_activity: DateTime<Utc>,
    /// First serve time per slot (audit trail for client pacing).
    pub served_at: Vec<Option<DateTime<Utc>>>,
    /// 1-based slots skipped because the user already voted on that prompt
    /// in an earlier session (repeated gold prompts).
    pub skipped_slots: Vec<usize>,
    pub cleanup: Option<CleanupReport>,
}

impl Session {
    pub fn batch_size(&self) -> usize {
        self.prompt_order.len()
    }

    pub fn is_active(&self) -> bool {
        self.status == SessionStatus::Active
    }

    /// Prompt at the cursor, if any slots remain.
    pub fn current(&self) -> Option<(&str, usize)> {
        self.prompt_order
            .get(self.cursor)
            .map(|id| (id.as_str(), self.cursor + 1))
    }

    pub fn slot_kind(&self, slot: usize) -> SlotKind {
        if slot <= self.pre_count {
            SlotKind::Pre
        } else if slot > self.batch_size() - self.post_count {
            SlotKind::Post
        } else {
            SlotKind::Middle
        }
    }

    /// Moves past the current slot. Completes the session on the last slot.
    pub(crate) fn advance(&mut self, now: DateTime<Utc>) {
        debug_assert!(self.cursor < self.batch_size());
        self.cursor += 1;
        self.last_activity = now;
        if self.cursor == self.batch_size() {
            self.status = SessionStatus::Completed;
            self.finished_at.get_or_insert(now);
        }
    }

    pub(crate) fn mark_served(&mut self, now: DateTime<Utc>) {
        if let Some(slot) = self.served_at.get_mut(self.cursor) {
            slot.get_or_insert(now);
        }
        self.last_activity = now;
    }
}

/// Inputs to [`assemble_prompt_order`] that come from the vote ledger and
/// retention state rather than the corpus.
pub struct Eligibility<'a> {
    /// Prompts this user has already voted on.
    pub voted_by_user: &'a HashSet<String>,
    /// Kept votes per prompt, for least-voted sampling.
    pub vote_counts: &'a HashMap<String, usize>,
    /// Working set after a set-aside pass; `None` means the whole corpus.
    pub pool: Option<&'a BTreeSet<String>>,
}

/// Derives a session seed when the caller did not fix one.
pub fn derive_seed(user_id: &str, session_number: u64) -> u64 {
    let digest = Sha256::new()
        .chain_update(user_id.as_bytes())
        .chain_update(session_number.to_le_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Builds the ordered prompt list of one batch: the first `pre_count`
/// pre-gold prompts (id order), `random_count` sampled non-gold prompts,
/// then the first `post_count` post-gold prompts.
pub fn assemble_prompt_order(
    corpus: &Corpus,
    config: &BatchConfig,
    elig: &Eligibility<'_>,
    seed: u64,
) -> Result<Vec<String>> {
    config.validate()?;
    let pre = corpus.gold_ids(GoldPhase::Pre);
    let post = corpus.gold_ids(GoldPhase::Post);
    if pre.len() < config.pre_count {
        return Err(Error::InsufficientGold {
            phase: "pre",
            available: pre.len(),
            required: config.pre_count,
        });
    }
    if post.len() < config.post_count {
        return Err(Error::InsufficientGold {
            phase: "post",
            available: post.len(),
            required: config.post_count,
        });
    }

    let mut eligible: Vec<&str> = corpus
        .prompts()
        .filter(|p| !p.is_gold())
        .map(|p| p.prompt_id.as_str())
        .filter(|id| elig.pool.is_none_or(|pool| pool.contains(*id)))
        .filter(|id| !elig.voted_by_user.contains(*id))
        .collect();
    if eligible.len() < config.random_count {
        return Err(Error::InsufficientCorpus {
            available: eligible.len(),
            required: config.random_count,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut middle: Vec<&str> = match config.sampling {
        Sampling::Uniform => {
            eligible.shuffle(&mut rng);
            eligible.truncate(config.random_count);
            eligible
        }
        Sampling::LeastVoted => {
            let mut keyed: Vec<(usize, u64, &str)> = eligible
                .into_iter()
                .map(|id| {
                    (
                        elig.vote_counts.get(id).copied().unwrap_or(0),
                        rng.gen(),
                        id,
                    )
                })
                .collect();
            keyed.sort_unstable();
            keyed.truncate(config.random_count);
            keyed.into_iter().map(|(_, _, id)| id).collect()
        }
    };
    middle.shuffle(&mut rng);

    let order = pre[..config.pre_count]
        .iter()
        .chain(middle.iter())
        .chain(post[..config.post_count].iter())
        .map(|s| s.to_string())
        .collect();
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PromptRecord;
    use crate::Reaction;

    fn corpus(n: usize) -> Corpus {
        let mut c = Corpus::new();
        let recs: Vec<_> = (0..n)
            .map(|i| PromptRecord {
                prompt_id: format!("p{i:04}"),
                image_ref: "img".into(),
                question: "q".into(),
                answer: "a".into(),
                gold: None,
                template_id: None,
            })
            .collect();
        c.ingest(&recs, Utc::now()).unwrap();
        for i in 0..5 {
            c.register_gold(&format!("p{i:04}"), Reaction::Ethical, GoldPhase::Pre)
                .unwrap();
            c.register_gold(
                &format!("p{:04}", 5 + i),
                Reaction::Unethical,
                GoldPhase::Post,
            )
            .unwrap();
        }
        c
    }

    fn assemble(c: &Corpus, voted: &HashSet<String>, seed: u64) -> Result<Vec<String>> {
        let counts = HashMap::new();
        let elig = Eligibility {
            voted_by_user: voted,
            vote_counts: &counts,
            pool: None,
        };
        assemble_prompt_order(c, &BatchConfig::default(), &elig, seed)
    }

    #[test]
    fn shape_is_5_40_5() {
        let c = corpus(200);
        let order = assemble(&c, &HashSet::new(), 1).unwrap();
        assert_eq!(order.len(), 50);
        for (i, id) in order.iter().enumerate() {
            let p = c.get(id).unwrap();
            match i {
                0..=4 => assert_eq!(p.gold.unwrap().phase, GoldPhase::Pre),
                45..=49 => assert_eq!(p.gold.unwrap().phase, GoldPhase::Post),
                _ => assert!(p.gold.is_none()),
            }
        }
        let unique: HashSet<_> = order.iter().collect();
        assert_eq!(unique.len(), 50);
    }

    #[test]
    fn exact_pool_uses_every_prompt() {
        let c = corpus(50);
        let order = assemble(&c, &HashSet::new(), 3).unwrap();
        let middle: BTreeSet<_> = order[5..45].iter().cloned().collect();
        let expected: BTreeSet<_> = (10..50).map(|i| format!("p{i:04}")).collect();
        assert_eq!(middle, expected);
        assert_ne!(order, assemble(&c, &HashSet::new(), 4).unwrap());
    }

    #[test]
    fn pool_of_39_is_insufficient() {
        let c = corpus(49);
        assert!(matches!(
            assemble(&c, &HashSet::new(), 0),
            Err(Error::InsufficientCorpus {
                available: 39,
                required: 40
            })
        ));
    }

    #[test]
    fn previously_voted_prompts_are_ineligible() {
        let c = corpus(60);
        let voted: HashSet<String> = (10..25).map(|i| format!("p{i:04}")).collect();
        assert!(matches!(
            assemble(&c, &voted, 0),
            Err(Error::InsufficientCorpus { available: 35, .. })
        ));
    }

    #[test]
    fn missing_gold_is_reported() {
        let mut c = Corpus::new();
        c.ingest(
            &[PromptRecord {
                prompt_id: "x".into(),
                image_ref: "i".into(),
                question: "q".into(),
                answer: "a".into(),
                gold: None,
                template_id: None,
            }],
            Utc::now(),
        )
        .unwrap();
        assert!(matches!(
            assemble(&c, &HashSet::new(), 0),
            Err(Error::InsufficientGold { phase: "pre", .. })
        ));
    }

    #[test]
    fn least_voted_prefers_low_counts() {
        let c = corpus(100);
        let mut counts = HashMap::new();
        for i in 10..50 {
            counts.insert(format!("p{i:04}"), 3);
        }
        let voted = HashSet::new();
        let elig = Eligibility {
            voted_by_user: &voted,
            vote_counts: &counts,
            pool: None,
        };
        let cfg = BatchConfig {
            sampling: Sampling::LeastVoted,
            ..Default::default()
        };
        let order = assemble_prompt_order(&c, &cfg, &elig, 9).unwrap();
        assert!(order[5..45].iter().all(|id| !counts.contains_key(id)));
    }
}
