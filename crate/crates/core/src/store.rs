use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    agreement_points, coverage_table, gold_breakdown, label_corpus, label_table, tally,
    AggregateLabel, AggregationConfig, DistributionStats,
};
use crate::clock::{Clock, SystemClock};
use crate::corpus::{Corpus, CorpusStats, GoldPhase, Prompt, PromptRecord};
use crate::sessioning::{
    assemble_prompt_order, derive_seed, BatchConfig, Eligibility, Session, SessionStatus,
};
use crate::trust::{score_user, TrustPolicy, TrustRecord};
use crate::votes::{
    trailing_discard_count, write_log_record, CleanupReport, DiscardReason, Ledger, Vote,
};
use crate::{Error, Reaction, Result};

/// Sessions idle for longer than this are finalized as abandoned.
pub const DEFAULT_IDLE_TIMEOUT_HOURS: i64 = 24;

/// Result of [`Store::next_prompt`].
#[derive(Debug, Clone, PartialEq)]
pub enum NextPrompt {
    Prompt { prompt: Prompt, slot: usize },
    EndOfSession,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub slot: usize,
    pub cursor: usize,
    pub completed: bool,
}

#[derive(Default)]
struct State {
    ledger: Ledger,
    /// Working set fixed by the last set-aside pass.
    pool: Option<BTreeSet<String>>,
    excluded: BTreeSet<String>,
    cohorts: BTreeMap<String, String>,
    sessions_per_user: HashMap<String, u64>,
}

/// An owned, consistent copy of everything aggregation and export read.
#[derive(Debug, Clone)]
pub struct StoreSnapshot {
    pub corpus: Corpus,
    pub votes: Vec<Vote>,
    pub pool: Option<BTreeSet<String>>,
    pub excluded: BTreeSet<String>,
}

impl StoreSnapshot {
    pub fn labels(&self, config: &AggregationConfig) -> Vec<AggregateLabel> {
        labels_with_working_set(&self.corpus, &self.votes, self.pool.as_ref(), config)
    }

    pub fn stats(&self, config: &AggregationConfig) -> DistributionStats {
        stats_for(&self.corpus, &self.votes, self.pool.as_ref(), config)
    }
}

fn labels_with_working_set(
    corpus: &Corpus,
    votes: &[Vote],
    pool: Option<&BTreeSet<String>>,
    config: &AggregationConfig,
) -> Vec<AggregateLabel> {
    let tallies = tally(votes.iter().filter(|v| v.is_kept()));
    let mut labels = label_corpus(corpus, &tallies, config);
    for l in &mut labels {
        l.retained = match pool {
            Some(pool) => pool.contains(&l.prompt_id),
            None => l.label.is_retainable(),
        };
    }
    labels
}

fn stats_for(
    corpus: &Corpus,
    votes: &[Vote],
    pool: Option<&BTreeSet<String>>,
    config: &AggregationConfig,
) -> DistributionStats {
    let labels = labels_with_working_set(corpus, votes, pool, config);
    let tallies = tally(votes.iter().filter(|v| v.is_kept()));
    let retained: Vec<&AggregateLabel> = labels.iter().filter(|l| l.retained).collect();
    DistributionStats {
        labels: label_table(retained.iter().copied()),
        coverage: coverage_table(retained.iter().copied()),
        gold: gold_breakdown(corpus, &tallies),
        agreement: agreement_points(retained.iter().copied()),
    }
}

/// Labels computed from every vote not removed by session cleanup, used as
/// the trust module's reference.
fn reference_labels(corpus: &Corpus, ledger: &Ledger) -> BTreeMap<String, AggregateLabel> {
    let tallies = tally(
        ledger
            .votes()
            .iter()
            .filter(|v| v.discard != DiscardReason::TrailingUnclear),
    );
    label_corpus(corpus, &tallies, &AggregationConfig::default())
        .into_iter()
        .map(|l| (l.prompt_id.clone(), l))
        .collect()
}

/// The annotation service state: corpus, sessions and the vote ledger.
///
/// Lock order is session, then ledger state, then corpus. Per-session
/// operations serialize on the session's own mutex; vote insertion is
/// linearized by the ledger mutex.
pub struct Store {
    clock: Arc<dyn Clock>,
    corpus: RwLock<Corpus>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    state: Mutex<State>,
    session_seq: AtomicU64,
    log: Mutex<Option<Box<dyn Write + Send>>>,
    idle_timeout: Duration,
}

impl Default for Store {
    fn default() -> Self {
        Self::new(Arc::new(SystemClock))
    }
}

impl Store {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            corpus: RwLock::new(Corpus::new()),
            sessions: RwLock::new(HashMap::new()),
            state: Mutex::new(State::default()),
            session_seq: AtomicU64::new(1),
            log: Mutex::new(None),
            idle_timeout: Duration::hours(DEFAULT_IDLE_TIMEOUT_HOURS),
        }
    }

    pub fn with_corpus(clock: Arc<dyn Clock>, corpus: Corpus) -> Self {
        let store = Self::new(clock);
        *store.corpus.write().unwrap() = corpus;
        store
    }

    pub fn set_idle_timeout(&mut self, timeout: Duration) {
        self.idle_timeout = timeout;
    }

    /// Every vote and discard amendment is appended to `sink` from now on.
    pub fn set_vote_log(&self, sink: Box<dyn Write + Send>) {
        *self.log.lock().unwrap() = Some(sink);
    }

    pub fn flush_log(&self) -> Result<()> {
        if let Some(sink) = self.log.lock().unwrap().as_mut() {
            sink.flush()?;
        }
        Ok(())
    }

    fn append_log(&self, vote: &Vote) -> Result<()> {
        if let Some(sink) = self.log.lock().unwrap().as_mut() {
            write_log_record(sink.as_mut(), vote)?;
        }
        Ok(())
    }

    pub fn now(&self) -> chrono::DateTime<chrono::Utc> {
        self.clock.now()
    }

    // corpus

    pub fn ingest(&self, records: &[PromptRecord]) -> Result<CorpusStats> {
        let now = self.clock.now();
        self.corpus.write().unwrap().ingest(records, now)
    }

    pub fn register_gold(&self, prompt_id: &str, label: Reaction, phase: GoldPhase) -> Result<()> {
        self.corpus
            .write()
            .unwrap()
            .register_gold(prompt_id, label, phase)
    }

    pub fn corpus_stats(&self) -> CorpusStats {
        self.corpus.read().unwrap().stats()
    }

    pub fn prompt(&self, prompt_id: &str) -> Option<Prompt> {
        self.corpus.read().unwrap().get(prompt_id).cloned()
    }

    pub fn read_corpus<T>(&self, f: impl FnOnce(&Corpus) -> T) -> T {
        f(&self.corpus.read().unwrap())
    }

    pub fn set_cohort(&self, user_id: &str, cohort: &str) {
        self.state
            .lock()
            .unwrap()
            .cohorts
            .insert(user_id.to_string(), cohort.to_string());
    }

    // sessions

    pub fn assemble_batch(&self, user_id: &str, config: &BatchConfig) -> Result<Session> {
        let now = self.clock.now();
        let session = {
            let mut state = self.state.lock().unwrap();
            let corpus = self.corpus.read().unwrap();
            let voted = state.ledger.prompts_voted_by(user_id);
            let number = *state.sessions_per_user.get(user_id).unwrap_or(&0);
            let seed = config
                .rng_seed
                .unwrap_or_else(|| derive_seed(user_id, number));
            let elig = Eligibility {
                voted_by_user: &voted,
                vote_counts: state.ledger.kept_counts(),
                pool: state.pool.as_ref(),
            };
            let order = assemble_prompt_order(&corpus, config, &elig, seed)?;
            *state
                .sessions_per_user
                .entry(user_id.to_string())
                .or_default() += 1;
            let seq = self.session_seq.fetch_add(1, Ordering::SeqCst);
            Session {
                session_id: format!("s{seq:06}"),
                user_id: user_id.to_string(),
                served_at: vec![None; order.len()],
                prompt_order: order,
                pre_count: config.pre_count,
                post_count: config.post_count,
                cursor: 0,
                status: SessionStatus::Active,
                started_at: now,
                finished_at: None,
                last_activity: now,
                skipped_slots: Vec::new(),
                cleanup: None,
            }
        };
        self.sessions.write().unwrap().insert(
            session.session_id.clone(),
            Arc::new(Mutex::new(session.clone())),
        );
        Ok(session)
    }

    fn session_handle(&self, session_id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .unwrap()
            .get(session_id)
            .cloned()
            .ok_or_else(|| Error::UnknownSession(session_id.to_string()))
    }

    pub fn session(&self, session_id: &str) -> Result<Session> {
        Ok(self.session_handle(session_id)?.lock().unwrap().clone())
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Skips slots whose prompt the user already answered in another session.
    fn skip_answered(&self, session: &mut Session, state: &State) {
        let now = self.clock.now();
        while let Some((prompt_id, slot)) = session.current() {
            if !state.ledger.has_voted(&session.user_id, prompt_id) {
                break;
            }
            session.skipped_slots.push(slot);
            session.advance(now);
        }
    }

    /// Returns the prompt at the cursor without advancing it.
    pub fn next_prompt(&self, session_id: &str) -> Result<NextPrompt> {
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock().unwrap();
        match session.status {
            SessionStatus::Completed => return Ok(NextPrompt::EndOfSession),
            SessionStatus::Abandoned => {
                return Err(Error::SessionNotActive(session_id.to_string()))
            }
            SessionStatus::Active => {}
        }
        let state = self.state.lock().unwrap();
        self.skip_answered(&mut session, &state);
        let Some((prompt_id, slot)) = session.current() else {
            return Ok(NextPrompt::EndOfSession);
        };
        let prompt = self
            .corpus
            .read()
            .unwrap()
            .get(prompt_id)
            .cloned()
            .ok_or_else(|| Error::UnknownPrompt(prompt_id.to_string()))?;
        session.mark_served(self.clock.now());
        Ok(NextPrompt::Prompt { prompt, slot })
    }

    pub fn record_vote(
        &self,
        session_id: &str,
        prompt_id: &str,
        reaction: Reaction,
    ) -> Result<VoteOutcome> {
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock().unwrap();
        if !session.is_active() {
            return Err(Error::SessionNotActive(session_id.to_string()));
        }
        let mut state = self.state.lock().unwrap();
        if state.ledger.has_voted(&session.user_id, prompt_id) {
            return Err(Error::DuplicateVote {
                user_id: session.user_id.clone(),
                prompt_id: prompt_id.to_string(),
            });
        }
        self.skip_answered(&mut session, &state);
        let Some((expected, slot)) = session.current() else {
            return Err(Error::SessionNotActive(session_id.to_string()));
        };
        if expected != prompt_id {
            return Err(Error::OutOfOrderVote {
                prompt_id: prompt_id.to_string(),
                expected: expected.to_string(),
            });
        }
        let now = self.clock.now();
        let vote = Vote {
            session_id: session_id.to_string(),
            user_id: session.user_id.clone(),
            prompt_id: prompt_id.to_string(),
            slot,
            reaction,
            voted_at: now,
            discard: DiscardReason::None,
        };
        self.append_log(&vote)?;
        state.ledger.insert(vote)?;
        session.advance(now);
        Ok(VoteOutcome {
            slot,
            cursor: session.cursor,
            completed: session.status == SessionStatus::Completed,
        })
    }

    /// Applies trailing-unclear cleanup and closes the session. Calling it
    /// again returns the stored report unchanged.
    pub fn finalize_session(
        &self,
        session_id: &str,
        trailing_run_length: usize,
    ) -> Result<CleanupReport> {
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock().unwrap();
        if let Some(report) = &session.cleanup {
            return Ok(report.clone());
        }
        let mut state = self.state.lock().unwrap();
        let mut indices = state.ledger.session_indices(session_id);
        indices.sort_by_key(|&i| state.ledger.votes()[i].slot);
        let reactions: Vec<Reaction> = indices
            .iter()
            .map(|&i| state.ledger.votes()[i].reaction)
            .collect();
        let discard = trailing_discard_count(&reactions, trailing_run_length);
        for &idx in &indices[indices.len() - discard..] {
            if state.ledger.votes()[idx].discard != DiscardReason::None {
                continue;
            }
            if let Some(v) = state
                .ledger
                .set_discard(idx, DiscardReason::TrailingUnclear)
            {
                let v = v.clone();
                self.append_log(&v)?;
            }
        }
        let now = self.clock.now();
        if session.status == SessionStatus::Active {
            session.status = SessionStatus::Abandoned;
            session.finished_at = Some(now);
        }
        let report = CleanupReport {
            session_id: session_id.to_string(),
            votes_kept: indices.len() - discard,
            votes_discarded_trailing_unclear: discard,
            completed: session.status == SessionStatus::Completed,
        };
        session.cleanup = Some(report.clone());
        Ok(report)
    }

    /// Finalizes every session idle beyond the timeout, and every completed
    /// session that was never finalized.
    pub fn expire_idle_sessions(&self, trailing_run_length: usize) -> Result<Vec<CleanupReport>> {
        let now = self.clock.now();
        let mut due = Vec::new();
        for (id, handle) in self.sessions.read().unwrap().iter() {
            let s = handle.lock().unwrap();
            if s.cleanup.is_none()
                && (s.status == SessionStatus::Completed
                    || now - s.last_activity > self.idle_timeout)
            {
                due.push(id.clone());
            }
        }
        due.sort();
        due.iter()
            .map(|id| self.finalize_session(id, trailing_run_length))
            .collect()
    }

    // ledger views

    pub fn votes(&self) -> Vec<Vote> {
        self.state.lock().unwrap().ledger.votes().to_vec()
    }

    pub fn vote_count(&self) -> usize {
        self.state.lock().unwrap().ledger.len()
    }

    pub fn dump_votes<W: Write>(&self, w: W) -> Result<()> {
        self.state.lock().unwrap().ledger.dump_table(w)
    }

    /// Loads audit-log records into an empty ledger, for restart and replay.
    pub fn replay_votes(&self, records: Vec<Vote>) -> Result<()> {
        let mut guard = self.state.lock().unwrap();
        let state = &mut *guard;
        if !state.ledger.is_empty() {
            return Err(Error::InvalidConfig(
                "replay requires an empty ledger".into(),
            ));
        }
        state.ledger = Ledger::replay(records)?;
        let mut max_seq = 0;
        let mut per_user: HashMap<String, BTreeSet<String>> = HashMap::new();
        for v in state.ledger.votes() {
            if let Some(n) = v
                .session_id
                .strip_prefix('s')
                .and_then(|n| n.parse::<u64>().ok())
            {
                max_seq = max_seq.max(n);
            }
            per_user
                .entry(v.user_id.clone())
                .or_default()
                .insert(v.session_id.clone());
            if v.discard == DiscardReason::UserFlagged {
                state.excluded.insert(v.user_id.clone());
            }
        }
        state.sessions_per_user = per_user
            .into_iter()
            .map(|(u, s)| (u, s.len() as u64))
            .collect();
        self.session_seq.fetch_max(max_seq + 1, Ordering::SeqCst);
        Ok(())
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        let state = self.state.lock().unwrap();
        let corpus = self.corpus.read().unwrap();
        StoreSnapshot {
            corpus: corpus.clone(),
            votes: state.ledger.votes().to_vec(),
            pool: state.pool.clone(),
            excluded: state.excluded.clone(),
        }
    }

    // aggregation

    pub fn aggregate_prompt(
        &self,
        prompt_id: &str,
        config: &AggregationConfig,
    ) -> Result<AggregateLabel> {
        config.validate()?;
        let state = self.state.lock().unwrap();
        let corpus = self.corpus.read().unwrap();
        if !corpus.contains(prompt_id) {
            return Err(Error::UnknownPrompt(prompt_id.to_string()));
        }
        let counts = crate::aggregate::Counts::from_reactions(
            state.ledger.kept_for_prompt(prompt_id).map(|v| &v.reaction),
        );
        let mut label = crate::aggregate::label_counts(prompt_id, counts, config);
        label.retained = match &state.pool {
            Some(pool) => pool.contains(prompt_id),
            None => label.label.is_retainable(),
        };
        Ok(label)
    }

    pub fn aggregate_all(&self, config: &AggregationConfig) -> Result<Vec<AggregateLabel>> {
        config.validate()?;
        let state = self.state.lock().unwrap();
        let corpus = self.corpus.read().unwrap();
        Ok(labels_with_working_set(
            &corpus,
            state.ledger.votes(),
            state.pool.as_ref(),
            config,
        ))
    }

    /// Prompts whose current label is ethical or unethical.
    pub fn retention_filter(&self, config: &AggregationConfig) -> Result<BTreeSet<String>> {
        config.validate()?;
        let state = self.state.lock().unwrap();
        let corpus = self.corpus.read().unwrap();
        Ok(label_corpus(&corpus, &tally(state.ledger.kept()), config)
            .into_iter()
            .filter(|l| l.label.is_retainable())
            .map(|l| l.prompt_id)
            .collect())
    }

    /// Fixes the working set to the current retention filter. Prompts left
    /// out stay in the store and can be reinstated.
    pub fn set_aside(&self, config: &AggregationConfig) -> Result<BTreeSet<String>> {
        let retained = self.retention_filter(config)?;
        self.state.lock().unwrap().pool = Some(retained.clone());
        Ok(retained)
    }

    pub fn reinstate_prompts<I: IntoIterator<Item = String>>(&self, ids: I) -> Result<()> {
        let corpus = self.corpus.read().unwrap();
        let ids: Vec<String> = ids.into_iter().collect();
        if let Some(bad) = ids.iter().find(|id| !corpus.contains(id)) {
            return Err(Error::UnknownPrompt(bad.clone()));
        }
        drop(corpus);
        if let Some(pool) = self.state.lock().unwrap().pool.as_mut() {
            pool.extend(ids);
        }
        Ok(())
    }

    pub fn working_pool(&self) -> Option<BTreeSet<String>> {
        self.state.lock().unwrap().pool.clone()
    }

    pub fn set_working_pool(&self, pool: Option<BTreeSet<String>>) {
        self.state.lock().unwrap().pool = pool;
    }

    pub fn distribution_stats(&self, config: &AggregationConfig) -> Result<DistributionStats> {
        config.validate()?;
        let state = self.state.lock().unwrap();
        let corpus = self.corpus.read().unwrap();
        Ok(stats_for(
            &corpus,
            state.ledger.votes(),
            state.pool.as_ref(),
            config,
        ))
    }

    // trust

    pub fn score_user(&self, user_id: &str, policy: &TrustPolicy) -> Result<TrustRecord> {
        policy.validate()?;
        let state = self.state.lock().unwrap();
        let corpus = self.corpus.read().unwrap();
        let reference = reference_labels(&corpus, &state.ledger);
        let votes = state.ledger.votes_by_user(user_id);
        score_user(
            user_id,
            &votes,
            &corpus,
            &reference,
            policy,
            state.cohorts.get(user_id).map(String::as_str),
        )
    }

    /// Scores every user who has voted, in user-id order.
    pub fn trust_report(&self, policy: &TrustPolicy) -> Result<Vec<TrustRecord>> {
        policy.validate()?;
        let state = self.state.lock().unwrap();
        let corpus = self.corpus.read().unwrap();
        Self::score_all(&state, &corpus, policy)
    }

    fn score_all(state: &State, corpus: &Corpus, policy: &TrustPolicy) -> Result<Vec<TrustRecord>> {
        let reference = reference_labels(corpus, &state.ledger);
        let mut users: Vec<&str> = state.ledger.users().collect();
        users.sort_unstable();
        let mut out = Vec::new();
        for user in users {
            let votes = state.ledger.votes_by_user(user);
            match score_user(
                user,
                &votes,
                corpus,
                &reference,
                policy,
                state.cohorts.get(user).map(String::as_str),
            ) {
                Ok(r) => out.push(r),
                Err(Error::UnknownUser(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    /// Scores all users and marks the votes of excluded users as
    /// `user_flagged`. Users no longer excluded under `policy` get their
    /// votes back. Nothing is deleted.
    pub fn apply_trust(&self, policy: &TrustPolicy) -> Result<Vec<TrustRecord>> {
        policy.validate()?;
        let mut state = self.state.lock().unwrap();
        let corpus = self.corpus.read().unwrap();
        let records = Self::score_all(&state, &corpus, policy)?;
        drop(corpus);
        let mut excluded = BTreeSet::new();
        for r in &records {
            let (from, to) = if r.excluded {
                excluded.insert(r.user_id.clone());
                (DiscardReason::None, DiscardReason::UserFlagged)
            } else {
                (DiscardReason::UserFlagged, DiscardReason::None)
            };
            for idx in state.ledger.user_indices(&r.user_id) {
                if state.ledger.votes()[idx].discard != from {
                    continue;
                }
                if let Some(v) = state.ledger.set_discard(idx, to) {
                    let v = v.clone();
                    self.append_log(&v)?;
                }
            }
        }
        state.excluded = excluded;
        Ok(records)
    }

    pub fn excluded_users(&self) -> BTreeSet<String> {
        self.state.lock().unwrap().excluded.clone()
    }
}
