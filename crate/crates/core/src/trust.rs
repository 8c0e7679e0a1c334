//! Annotator trust scoring from gold prompts and response patterns.
//!
//! Scores are a pure function of a user's vote history, the gold registry,
//! reference labels and the policy. Votes removed by trailing-unclear
//! cleanup are ignored; votes already excluded by an earlier trust pass
//! still count, so re-scoring an excluded user is stable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregateLabel, Label};
use crate::corpus::{Corpus, GoldPhase};
use crate::votes::{DiscardReason, Vote};
use crate::{Error, Result};

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustFlag {
    LowGoldAgreement,
    ConstantResponder,
    Contrarian,
    AttentionDrop,
}

impl TrustFlag {
    pub const ALL: [TrustFlag; 4] = [
        TrustFlag::LowGoldAgreement,
        TrustFlag::ConstantResponder,
        TrustFlag::Contrarian,
        TrustFlag::AttentionDrop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrustFlag::LowGoldAgreement => "low_gold_agreement",
            TrustFlag::ConstantResponder => "constant_responder",
            TrustFlag::Contrarian => "contrarian",
            TrustFlag::AttentionDrop => "attention_drop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrustPolicy {
    pub min_gold_agreement: f64,
    pub max_constant_rate: f64,
    pub max_contrarian_rate: f64,
    pub attention_drop_delta: f64,
    pub exclusion_flags: BTreeSet<TrustFlag>,
    /// Kept votes needed before the constant-responder check applies.
    pub min_votes_for_constant: usize,
    /// Qualifying prompts needed before the contrarian check applies.
    pub min_prompts_for_contrarian: usize,
    /// Votes a prompt needs to serve as a contrarian reference.
    pub contrarian_reference_votes: usize,
}

impl Default for TrustPolicy {
    fn default() -> Self {
        Self {
            min_gold_agreement: 0.4,
            max_constant_rate: 0.95,
            max_contrarian_rate: 0.8,
            attention_drop_delta: 0.4,
            exclusion_flags: TrustFlag::ALL.into_iter().collect(),
            min_votes_for_constant: 20,
            min_prompts_for_contrarian: 10,
            contrarian_reference_votes: 3,
        }
    }
}

impl TrustPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("min_gold_agreement", self.min_gold_agreement),
            ("max_constant_rate", self.max_constant_rate),
            ("max_contrarian_rate", self.max_contrarian_rate),
            ("attention_drop_delta", self.attention_drop_delta),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustRecord {
    pub user_id: String,
    pub cohort: Option<String>,
    pub kept_votes: usize,
    pub gold_seen: usize,
    /// `None` when the user has not answered any gold prompt.
    pub gold_agreement: Option<f64>,
    pub pre_agreement: Option<f64>,
    pub post_agreement: Option<f64>,
    pub constant_response_rate: f64,
    pub contrarian_prompts: usize,
    pub contrarian_rate: Option<f64>,
    pub flags: BTreeSet<TrustFlag>,
    pub excluded: bool,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Scores one user. `votes` must be that user's recorded votes;
/// `reference` maps prompt ids to labels computed without trust exclusions.
pub fn score_user(
    user_id: &str,
    votes: &[&Vote],
    corpus: &Corpus,
    reference: &BTreeMap<String, AggregateLabel>,
    policy: &TrustPolicy,
    cohort: Option<&str>,
) -> Result<TrustRecord> {
    let considered: Vec<&Vote> = votes
        .iter()
        .copied()
        .filter(|v| v.user_id == user_id && v.discard != DiscardReason::TrailingUnclear)
        .collect();
    if considered.is_empty() {
        return Err(Error::UnknownUser(user_id.to_string()));
    }

    let mut gold = [(0usize, 0usize); 2];
    for v in &considered {
        let Some(spec) = corpus.get(&v.prompt_id).and_then(|p| p.gold) else {
            continue;
        };
        let slot = match spec.phase {
            GoldPhase::Pre => &mut gold[0],
            GoldPhase::Post => &mut gold[1],
        };
        slot.1 += 1;
        if v.reaction == spec.label {
            slot.0 += 1;
        }
    }
    let gold_seen = gold[0].1 + gold[1].1;
    let gold_agreement = ratio(gold[0].0 + gold[1].0, gold_seen);
    let pre_agreement = ratio(gold[0].0, gold[0].1);
    let post_agreement = ratio(gold[1].0, gold[1].1);

    let mut freq = [0usize; 3];
    for v in &considered {
        freq[v.reaction.index()] += 1;
    }
    let constant_response_rate = *freq.iter().max().unwrap() as f64 / considered.len() as f64;

    let mut contrarian_prompts = 0;
    let mut disagreements = 0;
    for v in &considered {
        let Some(reference) = reference.get(&v.prompt_id) else {
            continue;
        };
        if reference.total < policy.contrarian_reference_votes
            || reference.label == Label::Unevaluated
        {
            continue;
        }
        contrarian_prompts += 1;
        if Label::from(v.reaction) != reference.label {
            disagreements += 1;
        }
    }
    let contrarian_rate = ratio(disagreements, contrarian_prompts);

    let mut flags = BTreeSet::new();
    if gold_agreement.is_some_and(|a| a + EPS < policy.min_gold_agreement) {
        flags.insert(TrustFlag::LowGoldAgreement);
    }
    if considered.len() >= policy.min_votes_for_constant
        && constant_response_rate > policy.max_constant_rate + EPS
    {
        flags.insert(TrustFlag::ConstantResponder);
    }
    if contrarian_prompts >= policy.min_prompts_for_contrarian
        && contrarian_rate.is_some_and(|r| r > policy.max_contrarian_rate + EPS)
    {
        flags.insert(TrustFlag::Contrarian);
    }
    if let (Some(pre), Some(post)) = (pre_agreement, post_agreement) {
        if pre - post + EPS >= policy.attention_drop_delta {
            flags.insert(TrustFlag::AttentionDrop);
        }
    }
    let excluded = flags.iter().any(|f| policy.exclusion_flags.contains(f));

    Ok(TrustRecord {
        user_id: user_id.to_string(),
        cohort: cohort.map(str::to_string),
        kept_votes: considered.len(),
        gold_seen,
        gold_agreement,
        pre_agreement,
        post_agreement,
        constant_response_rate,
        contrarian_prompts,
        contrarian_rate,
        flags,
        excluded,
    })
}

/// Flag set only; see [`score_user`].
pub fn detect_anomalies(
    user_id: &str,
    votes: &[&Vote],
    corpus: &Corpus,
    reference: &BTreeMap<String, AggregateLabel>,
    policy: &TrustPolicy,
) -> Result<BTreeSet<TrustFlag>> {
    Ok(score_user(user_id, votes, corpus, reference, policy, None)?.flags)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Operator report: one comma-separated row per user.
pub fn render_trust_report(records: &[TrustRecord]) -> String {
    let mut out = String::from(
        "user_id,cohort,kept_votes,gold_seen,gold_agreement,pre_agreement,post_agreement,constant_response_rate,contrarian_prompts,contrarian_rate,flags,excluded\n",
    );
    for r in records {
        let flags: Vec<&str> = r.flags.iter().map(|f| f.as_str()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.4},{},{},{},{}",
            r.user_id,
            r.cohort.as_deref().unwrap_or(""),
            r.kept_votes,
            r.gold_seen,
            opt(r.gold_agreement),
            opt(r.pre_agreement),
            opt(r.post_agreement),
            r.constant_response_rate,
            r.contrarian_prompts,
            opt(r.contrarian_rate),
            flags.join(";"),
            r.excluded
        );
    }
    out
}
