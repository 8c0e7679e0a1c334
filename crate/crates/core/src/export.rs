//! Anonymised dataset export: line-delimited prompt records with salted
//! user hashes, plus a manifest describing the release.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{AggregationConfig, Counts, CoverageTable, Label, LabelTable, TieRule};
use crate::corpus::{CorpusStats, GoldSpec};
use crate::store::StoreSnapshot;
use crate::votes::DiscardReason;
use crate::{Error, Reaction, Result};

pub const HASH_SCHEME: &str = "sha256(salt || user_id), lowercase hex";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportConfig {
    #[serde(with = "hex::serde")]
    pub salt: Vec<u8>,
    pub include_gold: bool,
    /// Also list votes removed by cleanup or trust exclusion (operator dumps).
    pub include_discarded: bool,
    /// Also emit prompts outside the working set.
    pub include_set_aside: bool,
    /// Per-vote detail (hashed user, reaction) alongside the counts.
    pub include_votes: bool,
    /// Publish gold labels and phases; off for public releases.
    pub reveal_gold_labels: bool,
    pub format_version: String,
    pub aggregation: AggregationConfig,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            salt: Vec::new(),
            include_gold: true,
            include_discarded: false,
            include_set_aside: false,
            include_votes: true,
            reveal_gold_labels: false,
            format_version: "1".into(),
            aggregation: AggregationConfig::default(),
        }
    }
}

impl ExportConfig {
    pub fn with_salt(salt: impl Into<Vec<u8>>) -> Self {
        Self {
            salt: salt.into(),
            ..Default::default()
        }
    }
}

pub fn hash_user(user_id: &str, salt: &[u8]) -> Result<String> {
    if salt.is_empty() {
        return Err(Error::EmptySalt);
    }
    let digest = Sha256::new()
        .chain_update(salt)
        .chain_update(user_id.as_bytes())
        .finalize();
    Ok(hex::encode(digest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportVote {
    pub user: String,
    pub reaction: Reaction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discard: Option<DiscardReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub prompt_id: String,
    pub image_ref: String,
    pub question: String,
    pub answer: String,
    pub label: Label,
    pub counts: Counts,
    pub retained: bool,
    pub is_gold: bool,
    /// Present only when gold labels are revealed; same shape as the corpus
    /// file so an operator export can be re-ingested as a corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<GoldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<Vec<ExportVote>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub record_count: usize,
    pub tau: f64,
    pub min_votes: usize,
    pub tie_rule: TieRule,
    pub hash_scheme: String,
    pub includes_votes: bool,
    pub includes_gold: bool,
    pub reveals_gold_labels: bool,
    pub includes_set_aside: bool,
    pub corpus: CorpusStats,
    pub labels: LabelTable,
    pub coverage: CoverageTable,
    pub schema: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct ExportBundle {
    pub records: Vec<ExportRecord>,
    pub manifest: Manifest,
}

impl ExportBundle {
    /// Records as JSON lines.
    pub fn records_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn manifest_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(&self.manifest)?;
        out.push(b'\n');
        Ok(out)
    }
}

fn schema() -> BTreeMap<String, String> {
    [
        ("prompt_id", "opaque prompt identifier"),
        ("image_ref", "image path or URL"),
        ("question", "question shown with the image"),
        ("answer", "model answer that was judged"),
        ("label", "ethical | unethical | unclear | unevaluated"),
        ("counts", "[ethical, unethical, unclear] kept-vote tallies"),
        ("retained", "member of the working set"),
        ("is_gold", "pre/post-test gold prompt"),
        ("gold", "optional {label, phase}; operator exports only"),
        (
            "votes",
            "optional list of {user, reaction}; user is the salted hash",
        ),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Builds the export from a consistent snapshot. Output is a pure function
/// of the snapshot and config.
pub fn export_dataset(snapshot: &StoreSnapshot, config: &ExportConfig) -> Result<ExportBundle> {
    if config.salt.is_empty() {
        return Err(Error::EmptySalt);
    }
    config.aggregation.validate()?;
    let labels = snapshot.labels(&config.aggregation);
    let stats = snapshot.stats(&config.aggregation);

    let mut votes_by_prompt: HashMap<&str, Vec<ExportVote>> = HashMap::new();
    let mut hashes: HashMap<&str, String> = HashMap::new();
    if config.include_votes {
        for v in &snapshot.votes {
            if !v.is_kept() && !config.include_discarded {
                continue;
            }
            let user = match hashes.get(v.user_id.as_str()) {
                Some(h) => h.clone(),
                None => {
                    let h = hash_user(&v.user_id, &config.salt)?;
                    hashes.insert(&v.user_id, h.clone());
                    h
                }
            };
            votes_by_prompt
                .entry(&v.prompt_id)
                .or_default()
                .push(ExportVote {
                    user,
                    reaction: v.reaction,
                    discard: (!v.is_kept()).then_some(v.discard),
                });
        }
    }

    let mut records = Vec::new();
    for l in labels {
        if !l.retained && !config.include_set_aside {
            continue;
        }
        let prompt = snapshot
            .corpus
            .get(&l.prompt_id)
            .expect("labels are computed from the corpus");
        if prompt.is_gold() && !config.include_gold {
            continue;
        }
        let votes = config.include_votes.then(|| {
            votes_by_prompt
                .remove(l.prompt_id.as_str())
                .unwrap_or_default()
        });
        records.push(ExportRecord {
            prompt_id: l.prompt_id,
            image_ref: prompt.image_ref.clone(),
            question: prompt.question.clone(),
            answer: prompt.answer.clone(),
            label: l.label,
            counts: l.counts,
            retained: l.retained,
            is_gold: prompt.is_gold(),
            gold: if config.reveal_gold_labels {
                prompt.gold
            } else {
                None
            },
            votes,
        });
    }

    let manifest = Manifest {
        format_version: config.format_version.clone(),
        record_count: records.len(),
        tau: config.aggregation.tau,
        min_votes: config.aggregation.min_votes,
        tie_rule: config.aggregation.tie_rule,
        hash_scheme: HASH_SCHEME.into(),
        includes_votes: config.include_votes,
        includes_gold: config.include_gold,
        reveals_gold_labels: config.reveal_gold_labels,
        includes_set_aside: config.include_set_aside,
        corpus: snapshot.corpus.stats(),
        labels: stats.labels,
        coverage: stats.coverage,
        schema: schema(),
    };
    Ok(ExportBundle { records, manifest })
}
