mod common;

use std::collections::BTreeSet;
use std::sync::{Arc, Barrier};

use ethicrowd_core::aggregate::AggregationConfig;
use ethicrowd_core::export::{export_dataset, ExportConfig};
use ethicrowd_core::sessioning::BatchConfig;
use ethicrowd_core::simulator::{simulate_population, Profile};
use ethicrowd_core::votes::{read_log, DiscardReason, SharedLog};
use ethicrowd_core::{Error, Reaction, Store};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn middle_only(n: usize, seed: u64) -> BatchConfig {
    BatchConfig {
        pre_count: 0,
        post_count: 0,
        random_count: n,
        rng_seed: Some(seed),
        ..Default::default()
    }
}

#[test]
fn duplicate_across_sessions_is_rejected() {
    let (store, _) = common::store(60, true);
    let a = store
        .assemble_batch(
            "u",
            &BatchConfig {
                rng_seed: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
    let b = store
        .assemble_batch(
            "u",
            &BatchConfig {
                rng_seed: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
    let gold = a.prompt_order[0].clone();
    assert_eq!(b.prompt_order[0], gold);
    store
        .record_vote(&a.session_id, &gold, Reaction::Ethical)
        .unwrap();
    assert!(matches!(
        store.record_vote(&b.session_id, &gold, Reaction::Unethical),
        Err(Error::DuplicateVote { .. })
    ));
    assert_eq!(store.vote_count(), 1);
}

#[test]
fn voting_ahead_of_cursor_is_out_of_order() {
    let (store, _) = common::store(60, true);
    let s = store
        .assemble_batch(
            "u",
            &BatchConfig {
                rng_seed: Some(5),
                ..Default::default()
            },
        )
        .unwrap();
    for pid in &s.prompt_order[..3] {
        store
            .record_vote(&s.session_id, pid, Reaction::Ethical)
            .unwrap();
    }
    assert!(matches!(
        store.record_vote(&s.session_id, &s.prompt_order[6], Reaction::Ethical),
        Err(Error::OutOfOrderVote { .. })
    ));
}

#[test]
fn concurrent_duplicates_accept_exactly_one() {
    let (store, _) = common::store(300, false);
    let store = Arc::new(store);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut pairs = BTreeSet::new();
    while pairs.len() < 25 {
        pairs.insert((
            format!("user{}", rng.gen_range(0..10)),
            format!("p{:04}", rng.gen_range(0..300)),
        ));
    }
    for (user, prompt) in &pairs {
        store.set_working_pool(Some(BTreeSet::from([prompt.clone()])));
        let sessions: Vec<String> = (0..32)
            .map(|k| {
                store
                    .assemble_batch(user, &middle_only(1, k))
                    .unwrap()
                    .session_id
            })
            .collect();
        let barrier = Arc::new(Barrier::new(sessions.len()));
        let accepted: usize = std::thread::scope(|scope| {
            let handles: Vec<_> = sessions
                .iter()
                .map(|sid| {
                    let (store, barrier) = (store.clone(), barrier.clone());
                    scope.spawn(move || {
                        barrier.wait();
                        match store.record_vote(sid, prompt, Reaction::Unethical) {
                            Ok(_) => 1,
                            Err(Error::DuplicateVote { .. }) => 0,
                            Err(e) => panic!("unexpected {e}"),
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).sum()
        });
        assert_eq!(accepted, 1, "{user} {prompt}");
    }
    assert_eq!(store.vote_count(), pairs.len());
}

fn session_with(store: &Store, user: &str, reactions: &[Reaction]) -> String {
    let s = store
        .assemble_batch(user, &middle_only(reactions.len(), 9))
        .unwrap();
    for (pid, r) in s.prompt_order.iter().zip(reactions) {
        store.record_vote(&s.session_id, pid, *r).unwrap();
    }
    s.session_id
}

#[test]
fn ten_trailing_unclear_are_discarded() {
    let (store, _) = common::store(60, false);
    let mut reactions = vec![Reaction::Ethical; 40];
    reactions.extend([Reaction::Unclear; 10]);
    let sid = session_with(&store, "u", &reactions);
    let report = store.finalize_session(&sid, 10).unwrap();
    assert_eq!(report.votes_kept, 40);
    assert_eq!(report.votes_discarded_trailing_unclear, 10);
    assert!(report.completed);
    let votes = store.votes();
    assert!(votes[40..]
        .iter()
        .all(|v| v.discard == DiscardReason::TrailingUnclear));
}

#[test]
fn partial_session_keeps_its_votes() {
    let (store, _) = common::store(60, false);
    let s = store.assemble_batch("u", &middle_only(50, 2)).unwrap();
    for pid in &s.prompt_order[..30] {
        store
            .record_vote(&s.session_id, pid, Reaction::Unethical)
            .unwrap();
    }
    let report = store.finalize_session(&s.session_id, 10).unwrap();
    assert_eq!(report.votes_kept, 30);
    assert_eq!(report.votes_discarded_trailing_unclear, 0);
    assert!(!report.completed);
}

#[test]
fn finalize_twice_is_identical() {
    let (store, _) = common::store(60, false);
    let mut reactions = vec![Reaction::Unethical; 35];
    reactions.extend([Reaction::Unclear; 15]);
    let sid = session_with(&store, "u", &reactions);
    let first = store.finalize_session(&sid, 10).unwrap();
    let votes = store.votes();
    let second = store.finalize_session(&sid, 10).unwrap();
    assert_eq!(first, second);
    assert_eq!(votes, store.votes());
    assert_eq!(first.votes_discarded_trailing_unclear, 15);
}

#[test]
fn discarded_votes_never_reach_labels_or_export() {
    let (store, _) = common::store(60, false);
    let mut reactions = vec![Reaction::Ethical; 38];
    reactions.extend([Reaction::Unclear; 12]);
    let sid = session_with(&store, "u", &reactions);
    store.finalize_session(&sid, 10).unwrap();
    let discarded: BTreeSet<String> = store
        .votes()
        .iter()
        .filter(|v| !v.is_kept())
        .map(|v| v.prompt_id.clone())
        .collect();
    assert_eq!(discarded.len(), 12);
    for l in store.aggregate_all(&AggregationConfig::default()).unwrap() {
        if discarded.contains(&l.prompt_id) {
            assert_eq!(l.total, 0);
        }
    }
    let bundle = export_dataset(
        &store.snapshot(),
        &ExportConfig {
            include_set_aside: true,
            ..ExportConfig::with_salt(b"s".to_vec())
        },
    )
    .unwrap();
    for r in &bundle.records {
        if discarded.contains(&r.prompt_id) {
            assert!(r.votes.as_ref().unwrap().is_empty());
            assert_eq!(r.counts.total(), 0);
        }
    }
}

#[test]
fn replaying_the_log_reproduces_the_vote_table() {
    let (store, clock) = common::store(150, true);
    let log = SharedLog::new();
    store.set_vote_log(Box::new(log.clone()));
    let spec = common::spec(
        vec![
            ("honest", 6, Profile::Honest { noise: 0.1 }),
            (
                "lazy",
                2,
                Profile::Constant {
                    reaction: Reaction::Unclear,
                },
            ),
            (
                "quitter",
                2,
                Profile::Dropout {
                    noise: 0.0,
                    quit_after_min: 5,
                    quit_after_max: 30,
                },
            ),
        ],
        4,
    );
    simulate_population(&store, &spec, Some(&clock)).unwrap();
    store.flush_log().unwrap();

    let fresh = Store::with_corpus(clock.clone(), common::corpus(150, true));
    fresh
        .replay_votes(read_log(log.contents().as_slice()).unwrap())
        .unwrap();
    assert_eq!(fresh.votes(), store.votes());
    let (mut a, mut b) = (Vec::new(), Vec::new());
    store.dump_votes(&mut a).unwrap();
    fresh.dump_votes(&mut b).unwrap();
    assert_eq!(a, b);
    assert!(store
        .votes()
        .iter()
        .any(|v| v.discard == DiscardReason::TrailingUnclear));
}
