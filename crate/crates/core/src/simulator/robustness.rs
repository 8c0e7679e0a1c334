use serde::{Deserialize, Serialize};

use super::{simulate_on, PopulationSpec};
use crate::aggregate::{label_corpus, tally, AggregateLabel, AggregationConfig};
use crate::corpus::Corpus;
use crate::trust::TrustPolicy;
use crate::Result;

/// Label recovery over non-gold prompts labelled ethical or unethical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub retained: usize,
    pub correct: usize,
    /// `None` when nothing was retained.
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub users: usize,
    pub votes: usize,
    pub excluded_users: Vec<String>,
    /// Trust exclusion and trailing-unclear cleanup applied.
    pub safeguards_on: Recovery,
    /// Every recorded vote counts.
    pub safeguards_off: Recovery,
}

impl RobustnessReport {
    pub fn improvement(&self) -> Option<f64> {
        Some(self.safeguards_on.rate? - self.safeguards_off.rate?)
    }
}

fn recovery(corpus: &Corpus, spec: &PopulationSpec, labels: &[AggregateLabel]) -> Result<Recovery> {
    let mut r = Recovery::default();
    for l in labels {
        let Some(label) = l.label.as_reaction().filter(|_| l.label.is_retainable()) else {
            continue;
        };
        if corpus.get(&l.prompt_id).is_some_and(|p| p.is_gold()) {
            continue;
        }
        r.retained += 1;
        if spec.truth(corpus, &l.prompt_id)? == label {
            r.correct += 1;
        }
    }
    r.rate = (r.retained > 0).then(|| r.correct as f64 / r.retained as f64);
    Ok(r)
}

/// Simulates the population on a fresh store and compares label recovery
/// with and without the safeguards.
pub fn robustness_report(
    corpus: &Corpus,
    spec: &PopulationSpec,
    policy: &TrustPolicy,
    config: &AggregationConfig,
) -> Result<RobustnessReport> {
    config.validate()?;
    policy.validate()?;
    if spec.users().is_empty() {
        return Ok(RobustnessReport::default());
    }
    let (store, sim) = simulate_on(corpus.clone(), spec)?;
    let all_votes = store.votes();
    let off_labels = label_corpus(corpus, &tally(all_votes.iter()), config);
    let off = recovery(corpus, spec, &off_labels)?;

    let records = store.apply_trust(policy)?;
    let on_labels = store.aggregate_all(config)?;
    let on = recovery(corpus, spec, &on_labels)?;
    Ok(RobustnessReport {
        users: sim.users.len(),
        votes: all_votes.len(),
        excluded_users: records
            .into_iter()
            .filter(|r| r.excluded)
            .map(|r| r.user_id)
            .collect(),
        safeguards_on: on,
        safeguards_off: off,
    })
}
