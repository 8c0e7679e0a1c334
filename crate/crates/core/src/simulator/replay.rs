//! Replay fixture: a two-phase simulated campaign whose aggregation
//! reproduces the published label and coverage tables.
//!
//! Phase one spreads single votes from noisy honest annotators over 1,098
//! prompts with least-voted sampling; the set-aside pass then keeps 789.
//! Phase two adds noiseless votes sampled uniformly from the working set.
//! Ground truths are chosen after dry runs, which is sound because the
//! session schedule never depends on the answers given.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::Duration;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{simulate_population, Cohort, PopulationSpec, Profile, TruthModel};
use crate::aggregate::{AggregationConfig, DistributionStats};
use crate::clock::{Clock, ManualClock};
use crate::corpus::{Corpus, GoldPhase, PromptRecord};
use crate::sessioning::{BatchConfig, Sampling};
use crate::votes::SharedLog;
use crate::{Error, Reaction, Result, Store};

use Reaction::{Ethical as E, Unclear as C, Unethical as U};

pub const RAW_PROMPTS: usize = 2900;
pub const NON_LATIN_PROMPTS: usize = 56;
const PRE_GOLD: [Reaction; 5] = [E, U, C, E, U];
const POST_GOLD: [Reaction; 5] = [U, E, C, U, E];

const FIRST_USERS: usize = 27;
const FIRST_DROPOUT_AFTER: usize = 23;
const FIRST_NOISE: f64 = 0.1;
const SECOND_USERS: usize = 17;
const SECOND_QUIT: (usize, usize) = (6, 45);

const RETAINED_MIDDLE: usize = 781;
const NOISY_IN_POOL: usize = 70;
const TARGET_LABELS: (usize, usize, usize) = (369, 386, 34);
const TARGET_COVERAGE: (usize, usize, usize) = (322, 278, 189);

/// Seeds of the two campaign phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayFixture {
    pub first_seed: u64,
    pub second_seed: u64,
}

pub const PINNED_REPLAY: ReplayFixture = ReplayFixture {
    first_seed: 2024,
    second_seed: 443,
};

pub struct ReplayOutcome {
    pub store: Store,
    pub clock: Arc<ManualClock>,
    pub fixture: ReplayFixture,
    /// Audit log of both phases.
    pub vote_log: Vec<u8>,
    pub truths: BTreeMap<String, Reaction>,
    /// Prompts with at least one kept vote after the first phase.
    pub evaluated_after_first_phase: usize,
    pub stats: DistributionStats,
}

const QUESTIONS: [&str; 6] = [
    "What is the person in the image doing?",
    "Is the action shown here acceptable?",
    "How should someone respond to this situation?",
    "What would you do if you saw this?",
    "Describe what is happening in this picture.",
    "Should the person in the image be stopped?",
];

const WORDS: [&str; 16] = [
    "they",
    "are",
    "helping",
    "taking",
    "the",
    "a",
    "neighbor",
    "wallet",
    "quietly",
    "should",
    "return",
    "it",
    "crowd",
    "sign",
    "carefully",
    "street",
];

const NON_LATIN: [&str; 4] = [
    "Они помогают соседу.",
    "他们正在帮助邻居。",
    "彼らは財布を返すべきです。",
    "Αυτό είναι αποδεκτό.",
];

/// Raw records of the fixture campaign, including the answers in
/// non-Latin script that ingestion filters out.
pub fn replay_records() -> Vec<PromptRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut non_latin: Vec<usize> = (0..RAW_PROMPTS).collect();
    non_latin.shuffle(&mut rng);
    let non_latin: BTreeSet<usize> = non_latin
        .into_iter()
        .filter(|i| *i >= 20)
        .take(NON_LATIN_PROMPTS)
        .collect();
    (0..RAW_PROMPTS)
        .map(|i| {
            let template = rng.gen_range(0..QUESTIONS.len());
            let answer = if non_latin.contains(&i) {
                NON_LATIN[i % NON_LATIN.len()].to_string()
            } else {
                let n = rng.gen_range(4..12);
                let mut s: Vec<&str> = (0..n)
                    .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
                    .collect();
                s[0] = "They";
                format!("{}.", s.join(" "))
            };
            PromptRecord {
                prompt_id: format!("vqa-{i:05}"),
                image_ref: format!("images/{:04}.jpg", i / 3),
                question: QUESTIONS[template].to_string(),
                answer,
                gold: None,
                template_id: Some(format!("t{template}")),
            }
        })
        .collect()
}

/// Filtered fixture corpus with five pre-test and five post-test gold prompts.
pub fn replay_corpus() -> Result<Corpus> {
    let mut corpus = Corpus::new();
    corpus.ingest(&replay_records(), ManualClock::at_epoch().now())?;
    let ids: Vec<String> = corpus
        .prompts()
        .take(10)
        .map(|p| p.prompt_id.clone())
        .collect();
    for (i, id) in ids.iter().enumerate() {
        let (label, phase) = if i < 5 {
            (PRE_GOLD[i], GoldPhase::Pre)
        } else {
            (POST_GOLD[i - 5], GoldPhase::Post)
        };
        corpus.register_gold(id, label, phase)?;
    }
    Ok(corpus)
}

fn first_phase(
    seed: u64,
    truths: &BTreeMap<String, Reaction>,
    model: Option<TruthModel>,
) -> PopulationSpec {
    PopulationSpec {
        cohorts: vec![
            Cohort {
                name: "early".into(),
                count: FIRST_USERS,
                profile: Profile::Honest { noise: FIRST_NOISE },
                sessions: 1,
            },
            Cohort {
                name: "early-quit".into(),
                count: 1,
                profile: Profile::Dropout {
                    noise: FIRST_NOISE,
                    quit_after_min: FIRST_DROPOUT_AFTER,
                    quit_after_max: FIRST_DROPOUT_AFTER,
                },
                sessions: 1,
            },
        ],
        ground_truth: truths.clone(),
        truth_model: model,
        rng_seed: seed,
        batch: BatchConfig {
            sampling: Sampling::LeastVoted,
            ..Default::default()
        },
        user_prefix: "annotator".into(),
        ..Default::default()
    }
}

fn second_phase(seed: u64, truths: &BTreeMap<String, Reaction>) -> PopulationSpec {
    PopulationSpec {
        cohorts: vec![
            Cohort {
                name: "late".into(),
                count: SECOND_USERS,
                profile: Profile::Honest { noise: 0.0 },
                sessions: 1,
            },
            Cohort {
                name: "late-quit".into(),
                count: 1,
                profile: Profile::Dropout {
                    noise: 0.0,
                    quit_after_min: SECOND_QUIT.0,
                    quit_after_max: SECOND_QUIT.1,
                },
                sessions: 1,
            },
        ],
        ground_truth: truths.clone(),
        rng_seed: seed,
        batch: BatchConfig {
            sampling: Sampling::Uniform,
            ..Default::default()
        },
        user_prefix: "annotator".into(),
        ..Default::default()
    }
}

fn fresh(corpus: &Corpus) -> (Store, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::at_epoch());
    let store = Store::with_corpus(clock.clone() as Arc<dyn Clock>, corpus.clone());
    (store, clock)
}

fn single_votes(store: &Store, corpus: &Corpus) -> BTreeMap<String, Reaction> {
    store
        .votes()
        .into_iter()
        .filter(|v| !corpus.get(&v.prompt_id).is_some_and(|p| p.is_gold()))
        .map(|v| (v.prompt_id, v.reaction))
        .collect()
}

fn check_no_discards(store: &Store) -> Result<()> {
    if store.votes().iter().any(|v| !v.is_kept()) {
        return Err(Error::InvalidConfig("replay run discarded votes".into()));
    }
    Ok(())
}

/// State after the first phase's dry run: which prompts were answered,
/// which single votes were noisy, and the working set to aim for.
struct FirstPhasePlan {
    /// Noise pick index of each noisy single vote (0 or 1 into `others`).
    noisy: BTreeMap<String, usize>,
    noisy_pool: Vec<String>,
    clean_pool: Vec<String>,
    /// Truths that realize the planned working set.
    truths: BTreeMap<String, Reaction>,
}

fn forced_truth(pick: usize) -> Reaction {
    // The truth whose noisy flip lands on the other polar label.
    if pick == 0 {
        E
    } else {
        U
    }
}

fn plan_first_phase(corpus: &Corpus, seed: u64) -> Result<FirstPhasePlan> {
    let probe = TruthModel {
        seed: 0,
        weights: [1.0, 0.0, 0.0],
    };
    let (store, clock) = fresh(corpus);
    simulate_population(
        &store,
        &first_phase(seed, &BTreeMap::new(), Some(probe)),
        Some(&clock),
    )?;
    check_no_discards(&store)?;
    let votes = single_votes(&store, corpus);
    let mut noisy = BTreeMap::new();
    let mut clean = Vec::new();
    for (id, r) in &votes {
        match r {
            E => clean.push(id.clone()),
            U => {
                noisy.insert(id.clone(), 0);
            }
            C => {
                noisy.insert(id.clone(), 1);
            }
        }
    }
    let noisy_ids: Vec<String> = noisy.keys().cloned().collect();
    let in_pool = noisy_ids.len().min(NOISY_IN_POOL);
    let clean_in_pool = RETAINED_MIDDLE
        .checked_sub(in_pool)
        .filter(|n| *n <= clean.len())
        .ok_or_else(|| Error::InvalidConfig("not enough clean single votes".into()))?;
    let noisy_pool = noisy_ids[..in_pool].to_vec();
    let clean_pool = clean[..clean_in_pool].to_vec();

    let mut truths = BTreeMap::new();
    for (id, &pick) in &noisy {
        let t = if noisy_pool.contains(id) {
            forced_truth(pick)
        } else {
            // The truth whose noisy flip lands on unclear.
            if pick == 0 {
                U
            } else {
                E
            }
        };
        truths.insert(id.clone(), t);
    }
    for (i, id) in clean.iter().enumerate() {
        truths.insert(id.clone(), if i < clean_in_pool { E } else { C });
    }
    Ok(FirstPhasePlan {
        noisy,
        noisy_pool,
        clean_pool,
        truths,
    })
}

fn run_first_phase(
    corpus: &Corpus,
    seed: u64,
    truths: &BTreeMap<String, Reaction>,
) -> Result<(Store, Arc<ManualClock>, SharedLog)> {
    let (store, clock) = fresh(corpus);
    let log = SharedLog::new();
    store.set_vote_log(Box::new(log.clone()));
    simulate_population(&store, &first_phase(seed, truths, None), Some(&clock))?;
    check_no_discards(&store)?;
    store.set_aside(&AggregationConfig::default())?;
    Ok((store, clock, log))
}

/// Phase-two vote count per working-set prompt outside the gold set.
fn second_phase_counts(
    corpus: &Corpus,
    first_votes: &[crate::votes::Vote],
    pool: &BTreeSet<String>,
    seed: u64,
    truths: &BTreeMap<String, Reaction>,
) -> Result<BTreeMap<String, usize>> {
    let (store, clock) = fresh(corpus);
    store.replay_votes(first_votes.to_vec())?;
    store.set_working_pool(Some(pool.clone()));
    simulate_population(&store, &second_phase(seed, truths), Some(&clock))?;
    let mut counts: BTreeMap<String, usize> = pool
        .iter()
        .filter(|id| !corpus.get(id).is_some_and(|p| p.is_gold()))
        .map(|id| (id.clone(), 0))
        .collect();
    for v in store.votes().iter().skip(first_votes.len()) {
        if let Some(c) = counts.get_mut(&v.prompt_id) {
            *c += 1;
        }
    }
    Ok(counts)
}

fn coverage_matches(plan: &FirstPhasePlan, counts: &BTreeMap<String, usize>) -> bool {
    let gold_in_pool = PRE_GOLD
        .iter()
        .chain(&POST_GOLD)
        .filter(|r| **r != C)
        .count();
    let k0 = counts.values().filter(|k| **k == 0).count();
    let k1 = counts.values().filter(|k| **k == 1).count();
    let k2 = counts.values().filter(|k| **k >= 2).count();
    if (k0, k1, k2 + gold_in_pool) != TARGET_COVERAGE {
        return false;
    }
    let noisy_k1 = plan.noisy_pool.iter().filter(|id| counts[*id] == 1).count();
    let noisy_seen = plan.noisy_pool.iter().filter(|id| counts[*id] >= 1).count();
    noisy_k1 <= TARGET_LABELS.2 && TARGET_LABELS.2 <= noisy_seen
}

/// Final truths: the planned unclear prompts, the forced noisy ones and
/// clean prompts split to hit the label totals.
fn final_truths(
    plan: &FirstPhasePlan,
    counts: &BTreeMap<String, usize>,
) -> Result<BTreeMap<String, Reaction>> {
    let mut truths = plan.truths.clone();
    let mut unclear: Vec<&String> = plan
        .noisy_pool
        .iter()
        .filter(|id| counts[*id] == 1)
        .collect();
    for id in plan.noisy_pool.iter().filter(|id| counts[*id] >= 2) {
        if unclear.len() == TARGET_LABELS.2 {
            break;
        }
        unclear.push(id);
    }
    let (mut e, mut u) = (0, 0);
    for id in &plan.noisy_pool {
        if unclear.contains(&id) {
            truths.insert(id.clone(), C);
            continue;
        }
        let t = forced_truth(plan.noisy[id]);
        let label = if counts[id] == 0 { t.opposite() } else { t };
        if label == E {
            e += 1;
        } else {
            u += 1;
        }
    }
    let gold_e = PRE_GOLD
        .iter()
        .chain(&POST_GOLD)
        .filter(|r| **r == E)
        .count();
    let gold_u = PRE_GOLD
        .iter()
        .chain(&POST_GOLD)
        .filter(|r| **r == U)
        .count();
    let clean_e = TARGET_LABELS.0 - gold_e - e;
    if clean_e + (TARGET_LABELS.1 - gold_u - u) != plan.clean_pool.len() {
        return Err(Error::InvalidConfig("label totals cannot be met".into()));
    }
    for (i, id) in plan.clean_pool.iter().enumerate() {
        truths.insert(id.clone(), if i < clean_e { E } else { U });
    }
    Ok(truths)
}

/// Runs the calibrated campaign for `fixture` and checks it reproduces the
/// target tables.
pub fn build_replay(fixture: ReplayFixture) -> Result<ReplayOutcome> {
    let corpus = replay_corpus()?;
    let plan = plan_first_phase(&corpus, fixture.first_seed)?;
    let (probe_store, _, _) = run_first_phase(&corpus, fixture.first_seed, &plan.truths)?;
    let pool = probe_store.working_pool().unwrap_or_default();
    let counts = second_phase_counts(
        &corpus,
        &probe_store.votes(),
        &pool,
        fixture.second_seed,
        &plan.truths,
    )?;
    if !coverage_matches(&plan, &counts) {
        return Err(Error::InvalidConfig(
            "second-phase coverage misses the target".into(),
        ));
    }
    let truths = final_truths(&plan, &counts)?;
    build_with_truths(&corpus, fixture, truths)
}

fn build_with_truths(
    corpus: &Corpus,
    fixture: ReplayFixture,
    truths: BTreeMap<String, Reaction>,
) -> Result<ReplayOutcome> {
    let (store, clock, log) = run_first_phase(corpus, fixture.first_seed, &truths)?;
    let evaluated = store
        .aggregate_all(&AggregationConfig::default())?
        .iter()
        .filter(|l| l.total > 0)
        .count();
    clock.advance(Duration::days(1));
    simulate_population(
        &store,
        &second_phase(fixture.second_seed, &truths),
        Some(&clock),
    )?;
    check_no_discards(&store)?;
    let stats = store.distribution_stats(&AggregationConfig::default())?;
    let l = &stats.labels;
    let c = &stats.coverage;
    if (l.ethical.count, l.unethical.count, l.unclear.count) != TARGET_LABELS
        || (c.one.count, c.two.count, c.three_or_more.count) != TARGET_COVERAGE
    {
        return Err(Error::InvalidConfig(
            "replay run does not reproduce the tables".into(),
        ));
    }
    Ok(ReplayOutcome {
        store,
        clock,
        fixture,
        vote_log: log.contents(),
        truths,
        evaluated_after_first_phase: evaluated,
        stats,
    })
}

/// Tries second-phase seeds `start..start + attempts` on `threads` threads
/// and returns the first fixture that reproduces the tables.
pub fn search_replay_seeds(
    first_seed: u64,
    start: u64,
    attempts: u64,
    threads: usize,
) -> Result<Option<ReplayFixture>> {
    let corpus = replay_corpus()?;
    let plan = plan_first_phase(&corpus, first_seed)?;
    let (probe_store, _, _) = run_first_phase(&corpus, first_seed, &plan.truths)?;
    let pool = probe_store.working_pool().unwrap_or_default();
    let first_votes = probe_store.votes();
    let threads = threads.max(1) as u64;
    let hits: Vec<Result<Option<u64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (corpus, plan, pool, first_votes) = (&corpus, &plan, &pool, &first_votes);
                scope.spawn(move || -> Result<Option<u64>> {
                    let mut seed = start + t;
                    while seed < start + attempts {
                        let counts =
                            second_phase_counts(corpus, first_votes, pool, seed, &plan.truths)?;
                        if coverage_matches(plan, &counts) {
                            return Ok(Some(seed));
                        }
                        seed += threads;
                    }
                    Ok(None)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut seeds = Vec::new();
    for h in hits {
        seeds.extend(h?);
    }
    seeds.sort();
    for second_seed in seeds {
        let fixture = ReplayFixture {
            first_seed,
            second_seed,
        };
        if build_replay(fixture).is_ok() {
            return Ok(Some(fixture));
        }
    }
    Ok(None)
}
