//! Synthetic annotator populations driven through the public store API.

mod replay;
mod robustness;

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::{Clock, ManualClock};
use crate::corpus::Corpus;
use crate::sessioning::BatchConfig;
use crate::votes::{CleanupReport, DEFAULT_TRAILING_RUN};
use crate::{Error, NextPrompt, Reaction, Result, Store};

pub use replay::{
    build_replay, replay_corpus, replay_records, search_replay_seeds, ReplayFixture, ReplayOutcome,
    PINNED_REPLAY,
};
pub use robustness::{robustness_report, Recovery, RobustnessReport};

/// How a simulated annotator answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// Answers the truth, or with probability `noise` one of the other two
    /// reactions at random.
    Honest {
        noise: f64,
    },
    /// Answers unclear with probability `unclear_prob`, otherwise the truth.
    Lazy {
        unclear_prob: f64,
    },
    /// Swaps ethical and unethical with probability `flip_prob`.
    Contrarian {
        flip_prob: f64,
    },
    Constant {
        reaction: Reaction,
    },
    /// Honest, but stops after a number of answers drawn uniformly from
    /// `quit_after_min..=quit_after_max` in each session.
    Dropout {
        noise: f64,
        quit_after_min: usize,
        quit_after_max: usize,
    },
}

impl Profile {
    fn validate(&self) -> Result<()> {
        let p = match *self {
            Profile::Honest { noise } | Profile::Dropout { noise, .. } => noise,
            Profile::Lazy { unclear_prob } => unclear_prob,
            Profile::Contrarian { flip_prob } => flip_prob,
            Profile::Constant { .. } => 0.0,
        };
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        if let Profile::Dropout {
            quit_after_min,
            quit_after_max,
            ..
        } = *self
        {
            if quit_after_min > quit_after_max {
                return Err(Error::InvalidConfig("dropout range is empty".into()));
            }
        }
        Ok(())
    }

    /// Picks a reaction from two uniform draws. Both draws are always
    /// consumed, so the random stream does not depend on the truth.
    pub fn respond(&self, truth: Reaction, u_flag: f64, u_pick: f64) -> Reaction {
        let pick = |r: Reaction| r.others()[usize::from(u_pick >= 0.5)];
        match *self {
            Profile::Honest { noise } | Profile::Dropout { noise, .. } => {
                if u_flag < noise {
                    pick(truth)
                } else {
                    truth
                }
            }
            Profile::Lazy { unclear_prob } => {
                if u_flag < unclear_prob {
                    Reaction::Unclear
                } else {
                    truth
                }
            }
            Profile::Contrarian { flip_prob } => {
                if u_flag < flip_prob {
                    truth.opposite()
                } else {
                    truth
                }
            }
            Profile::Constant { reaction } => reaction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub name: String,
    pub count: usize,
    pub profile: Profile,
    #[serde(default = "one")]
    pub sessions: usize,
}

fn one() -> usize {
    1
}

/// Truth for prompts missing from the explicit map: drawn per prompt from
/// a hash of `(seed, prompt_id)` with the given class weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthModel {
    pub seed: u64,
    pub weights: [f64; 3],
}

impl TruthModel {
    pub fn truth(&self, prompt_id: &str) -> Reaction {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(prompt_id.as_bytes())
            .finalize();
        let u = u64::from_le_bytes(digest[..8].try_into().unwrap()) as f64 / u64::MAX as f64;
        let total: f64 = self.weights.iter().sum();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w / total;
            if u < acc {
                return Reaction::from_index(i).unwrap();
            }
        }
        Reaction::Unclear
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationSpec {
    pub cohorts: Vec<Cohort>,
    pub ground_truth: BTreeMap<String, Reaction>,
    pub truth_model: Option<TruthModel>,
    pub rng_seed: u64,
    /// Session seeds are drawn from each user's stream; a fixed
    /// `batch.rng_seed` is ignored.
    pub batch: BatchConfig,
    pub trailing_run_length: usize,
    pub vote_interval_seconds: i64,
    pub user_prefix: String,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            cohorts: Vec::new(),
            ground_truth: BTreeMap::new(),
            truth_model: None,
            rng_seed: 0,
            batch: BatchConfig::default(),
            trailing_run_length: DEFAULT_TRAILING_RUN,
            vote_interval_seconds: 6,
            user_prefix: "sim".into(),
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        for c in &self.cohorts {
            c.profile.validate()?;
        }
        if let Some(m) = &self.truth_model {
            if m.weights.iter().any(|w| *w < 0.0 || !w.is_finite())
                || m.weights.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::InvalidConfig(
                    "truth weights must be nonnegative".into(),
                ));
            }
        }
        self.batch.validate()
    }

    /// Truth of one prompt: the explicit map, then the gold label, then
    /// the truth model.
    pub fn truth(&self, corpus: &Corpus, prompt_id: &str) -> Result<Reaction> {
        if let Some(r) = self.ground_truth.get(prompt_id) {
            return Ok(*r);
        }
        if let Some(g) = corpus.get(prompt_id).and_then(|p| p.gold) {
            return Ok(g.label);
        }
        self.truth_model
            .as_ref()
            .map(|m| m.truth(prompt_id))
            .ok_or_else(|| Error::MissingGroundTruth(prompt_id.to_string()))
    }

    /// Users in processing order as `(user_id, cohort index)`.
    pub fn users(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (ci, c) in self.cohorts.iter().enumerate() {
            for i in 0..c.count {
                out.push((format!("{}-{}-{:04}", self.user_prefix, c.name, i), ci));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedUser {
    pub user_id: String,
    pub cohort: String,
    pub sessions: Vec<String>,
    pub votes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub users: Vec<SimulatedUser>,
    pub cleanup: Vec<CleanupReport>,
    pub votes_recorded: usize,
}

fn user_rng(seed: u64, user_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user_index as u64);
    rng
}

fn run_user(
    store: &Store,
    clock: Option<&ManualClock>,
    spec: &PopulationSpec,
    user_id: &str,
    user_index: usize,
    cohort: &Cohort,
) -> Result<(SimulatedUser, Vec<CleanupReport>)> {
    let mut rng = user_rng(spec.rng_seed, user_index);
    store.set_cohort(user_id, &cohort.name);
    let step = Duration::seconds(spec.vote_interval_seconds);
    let mut user = SimulatedUser {
        user_id: user_id.to_string(),
        cohort: cohort.name.clone(),
        sessions: Vec::new(),
        votes: 0,
    };
    let mut reports = Vec::new();
    for _ in 0..cohort.sessions {
        let batch = BatchConfig {
            rng_seed: Some(rng.gen()),
            ..spec.batch.clone()
        };
        let quit_after = match cohort.profile {
            Profile::Dropout {
                quit_after_min,
                quit_after_max,
                ..
            } => Some(rng.gen_range(quit_after_min..=quit_after_max)),
            _ => None,
        };
        let session = store.assemble_batch(user_id, &batch)?;
        let mut answered = 0;
        loop {
            if quit_after.is_some_and(|q| answered >= q) {
                break;
            }
            let NextPrompt::Prompt { prompt, .. } = store.next_prompt(&session.session_id)? else {
                break;
            };
            let truth = store.read_corpus(|c| spec.truth(c, &prompt.prompt_id))?;
            let (u_flag, u_pick): (f64, f64) = (rng.gen(), rng.gen());
            let reaction = cohort.profile.respond(truth, u_flag, u_pick);
            if let Some(c) = clock {
                c.advance(step);
            }
            store.record_vote(&session.session_id, &prompt.prompt_id, reaction)?;
            answered += 1;
        }
        user.votes += answered;
        reports.push(store.finalize_session(&session.session_id, spec.trailing_run_length)?);
        user.sessions.push(session.session_id);
    }
    Ok((user, reports))
}

/// Runs every user to completion, one after another, so the vote log is a
/// pure function of `spec` and the store's starting state. Pass the
/// store's manual clock to advance it between votes.
pub fn simulate_population(
    store: &Store,
    spec: &PopulationSpec,
    clock: Option<&ManualClock>,
) -> Result<SimulationReport> {
    spec.validate()?;
    let mut report = SimulationReport::default();
    for (idx, (user_id, ci)) in spec.users().into_iter().enumerate() {
        let (user, cleanup) = run_user(store, clock, spec, &user_id, idx, &spec.cohorts[ci])?;
        report.votes_recorded += user.votes;
        report.users.push(user);
        report.cleanup.extend(cleanup);
    }
    Ok(report)
}

type UserRun = (usize, SimulatedUser, Vec<CleanupReport>);

/// Runs users on `threads` worker threads. Interleaving is left to the
/// scheduler, so only ledger invariants, not the log bytes, are stable.
pub fn simulate_concurrent(
    store: &Store,
    spec: &PopulationSpec,
    threads: usize,
) -> Result<SimulationReport> {
    spec.validate()?;
    let users = spec.users();
    let threads = threads.max(1);
    let results: Vec<Result<Vec<UserRun>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let users = &users;
                scope.spawn(move || {
                    let mut out = Vec::new();
                    for (idx, (user_id, ci)) in users.iter().enumerate().skip(t).step_by(threads) {
                        let (u, c) = run_user(store, None, spec, user_id, idx, &spec.cohorts[*ci])?;
                        out.push((idx, u, c));
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut all = Vec::new();
    for r in results {
        all.extend(r?);
    }
    all.sort_by_key(|(idx, _, _)| *idx);
    let mut report = SimulationReport::default();
    for (_, user, cleanup) in all {
        report.votes_recorded += user.votes;
        report.users.push(user);
        report.cleanup.extend(cleanup);
    }
    Ok(report)
}

/// Fresh store over `corpus` with a manual clock, plus the simulation run.
pub fn simulate_on(corpus: Corpus, spec: &PopulationSpec) -> Result<(Store, SimulationReport)> {
    let clock = Arc::new(ManualClock::at_epoch());
    let store = Store::with_corpus(clock.clone() as Arc<dyn Clock>, corpus);
    let report = simulate_population(&store, spec, Some(&clock))?;
    Ok((store, report))
}
