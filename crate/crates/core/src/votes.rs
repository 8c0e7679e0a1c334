//! Vote ledger: recording, per-user dedup, end-of-session cleanup and the
//! append-only audit log.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::{Error, Reaction, Result};

/// Default length of the terminal all-unclear run that triggers cleanup.
pub const DEFAULT_TRAILING_RUN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    #[default]
    None,
    TrailingUnclear,
    UserFlagged,
}

/// One recorded reaction. Also the line format of the audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub session_id: String,
    pub user_id: String,
    pub prompt_id: String,
    /// 1-based position of the prompt in the session.
    pub slot: usize,
    pub reaction: Reaction,
    #[serde(rename = "timestamp")]
    pub voted_at: DateTime<Utc>,
    #[serde(default)]
    pub discard: DiscardReason,
}

impl Vote {
    pub fn is_kept(&self) -> bool {
        self.discard == DiscardReason::None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanupReport {
    pub session_id: String,
    pub votes_kept: usize,
    pub votes_discarded_trailing_unclear: usize,
    pub completed: bool,
}

/// Length of the terminal run of `unclear` reactions.
pub fn trailing_unclear_run(reactions: &[Reaction]) -> usize {
    reactions
        .iter()
        .rev()
        .take_while(|r| **r == Reaction::Unclear)
        .count()
}

/// Number of trailing votes to discard: the whole terminal unclear run when
/// it is at least `threshold` long, otherwise none.
pub fn trailing_discard_count(reactions: &[Reaction], threshold: usize) -> usize {
    let run = trailing_unclear_run(reactions);
    if threshold > 0 && run >= threshold {
        run
    } else {
        0
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    votes: Vec<Vote>,
    by_pair: HashMap<(String, String), usize>,
    by_session: HashMap<String, Vec<usize>>,
    by_user: HashMap<String, Vec<usize>>,
    kept_counts: HashMap<String, usize>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.votes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.votes.is_empty()
    }

    /// All votes in recording order.
    pub fn votes(&self) -> &[Vote] {
        &self.votes
    }

    pub fn kept(&self) -> impl Iterator<Item = &Vote> {
        self.votes.iter().filter(|v| v.is_kept())
    }

    pub fn kept_for_prompt<'a>(
        &'a self,
        prompt_id: &'a str,
    ) -> impl Iterator<Item = &'a Vote> + 'a {
        self.kept().filter(move |v| v.prompt_id == prompt_id)
    }

    pub fn has_voted(&self, user_id: &str, prompt_id: &str) -> bool {
        self.by_pair
            .contains_key(&(user_id.to_string(), prompt_id.to_string()))
    }

    pub fn prompts_voted_by(&self, user_id: &str) -> HashSet<String> {
        self.by_user
            .get(user_id)
            .map(|idx| {
                idx.iter()
                    .map(|&i| self.votes[i].prompt_id.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn votes_by_user(&self, user_id: &str) -> Vec<&Vote> {
        self.indices(&self.by_user, user_id)
    }

    pub fn votes_in_session(&self, session_id: &str) -> Vec<&Vote> {
        self.indices(&self.by_session, session_id)
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.by_user.keys().map(String::as_str)
    }

    pub fn kept_counts(&self) -> &HashMap<String, usize> {
        &self.kept_counts
    }

    fn indices<'a>(&'a self, map: &HashMap<String, Vec<usize>>, key: &str) -> Vec<&'a Vote> {
        map.get(key)
            .map(|idx| idx.iter().map(|&i| &self.votes[i]).collect())
            .unwrap_or_default()
    }

    /// Appends a vote. Any earlier vote by the same user on the same prompt,
    /// discarded or not, makes this a duplicate.
    pub fn insert(&mut self, vote: Vote) -> Result<usize> {
        let key = (vote.user_id.clone(), vote.prompt_id.clone());
        if self.by_pair.contains_key(&key) {
            return Err(Error::DuplicateVote {
                user_id: vote.user_id,
                prompt_id: vote.prompt_id,
            });
        }
        let idx = self.votes.len();
        self.by_pair.insert(key, idx);
        self.by_session
            .entry(vote.session_id.clone())
            .or_default()
            .push(idx);
        self.by_user
            .entry(vote.user_id.clone())
            .or_default()
            .push(idx);
        if vote.is_kept() {
            *self.kept_counts.entry(vote.prompt_id.clone()).or_default() += 1;
        }
        self.votes.push(vote);
        Ok(idx)
    }

    /// Changes the discard status of one vote. Returns the updated vote when
    /// the status actually changed.
    pub(crate) fn set_discard(&mut self, idx: usize, reason: DiscardReason) -> Option<&Vote> {
        let vote = &mut self.votes[idx];
        if vote.discard == reason {
            return None;
        }
        let was_kept = vote.is_kept();
        vote.discard = reason;
        let counter = self.kept_counts.entry(vote.prompt_id.clone()).or_default();
        match (was_kept, vote.is_kept()) {
            (true, false) => *counter -= 1,
            (false, true) => *counter += 1,
            _ => {}
        }
        Some(&self.votes[idx])
    }

    pub(crate) fn session_indices(&self, session_id: &str) -> Vec<usize> {
        self.by_session.get(session_id).cloned().unwrap_or_default()
    }

    pub(crate) fn user_indices(&self, user_id: &str) -> Vec<usize> {
        self.by_user.get(user_id).cloned().unwrap_or_default()
    }

    /// Rebuilds a ledger from audit-log records. The first record for a
    /// `(session_id, slot)` is the vote; later ones amend its discard status.
    pub fn replay<I: IntoIterator<Item = Vote>>(records: I) -> Result<Self> {
        let mut ledger = Ledger::new();
        let mut by_slot: HashMap<(String, usize), usize> = HashMap::new();
        for rec in records {
            let key = (rec.session_id.clone(), rec.slot);
            match by_slot.get(&key) {
                Some(&idx) => {
                    ledger.set_discard(idx, rec.discard);
                }
                None => {
                    let idx = ledger.insert(rec)?;
                    by_slot.insert(key, idx);
                }
            }
        }
        Ok(ledger)
    }

    /// Canonical dump of the vote table, one JSON object per line.
    pub fn dump_table<W: Write>(&self, mut w: W) -> Result<()> {
        for v in &self.votes {
            serde_json::to_writer(&mut w, v)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads an audit log written by the store.
pub fn read_log<R: BufRead>(reader: R) -> Result<Vec<Vote>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::SchemaError {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_log_record<W: Write + ?Sized>(w: &mut W, vote: &Vote) -> Result<()> {
    let mut line = serde_json::to_vec(vote)?;
    line.push(b'\n');
    w.write_all(&line)?;
    Ok(())
}

/// In-memory audit-log sink whose clones share one buffer.
#[derive(Debug, Clone, Default)]
pub struct SharedLog(Arc<Mutex<Vec<u8>>>);

impl SharedLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contents(&self) -> Vec<u8> {
        self.0.lock().unwrap().clone()
    }
}

impl Write for SharedLog {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}
