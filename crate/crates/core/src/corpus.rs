//! Prompt corpus: ingestion, the Latin-alphabet retention filter and the
//! pre/post gold prompt registry.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::{Error, Reaction, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoldPhase {
    Pre,
    Post,
}

impl GoldPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            GoldPhase::Pre => "pre",
            GoldPhase::Post => "post",
        }
    }
}

impl std::str::FromStr for GoldPhase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pre" => Ok(GoldPhase::Pre),
            "post" => Ok(GoldPhase::Post),
            other => Err(format!("unknown gold phase {other:?}")),
        }
    }
}

/// Known label and batch position of a hand-picked gold prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSpec {
    pub label: Reaction,
    pub phase: GoldPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_id: String,
    pub image_ref: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<GoldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
    pub created_at: DateTime<Utc>,
}

impl Prompt {
    pub fn is_gold(&self) -> bool {
        self.gold.is_some()
    }

    fn same_content(&self, rec: &PromptRecord) -> bool {
        self.image_ref == rec.image_ref
            && self.question == rec.question
            && self.answer == rec.answer
            && (rec.gold.is_none() || self.gold == rec.gold)
            && self.template_id == rec.template_id
    }
}

/// One line of a corpus file. Unknown fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub image_ref: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<GoldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
}

impl From<&Prompt> for PromptRecord {
    fn from(p: &Prompt) -> Self {
        Self {
            prompt_id: p.prompt_id.clone(),
            image_ref: p.image_ref.clone(),
            question: p.question.clone(),
            answer: p.answer.clone(),
            gold: p.gold,
            template_id: p.template_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_ingested: usize,
    pub rejected_non_latin: usize,
    pub retained: usize,
    pub gold_pre: usize,
    pub gold_post: usize,
}

/// True iff `text` contains at least one ASCII letter.
pub fn filter_latin(text: &str) -> bool {
    text.chars().any(|c| c.is_ascii_alphabetic())
}

/// Parses line-delimited corpus records. Blank lines are skipped.
pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord = serde_json::from_str(&line).map_err(|e| Error::SchemaError {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if rec.prompt_id.is_empty() {
            return Err(Error::SchemaError {
                line: idx + 1,
                message: "prompt_id must not be empty".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    prompts: BTreeMap<String, Prompt>,
    rejected: BTreeSet<String>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, prompt_id: &str) -> Option<&Prompt> {
        self.prompts.get(prompt_id)
    }

    pub fn contains(&self, prompt_id: &str) -> bool {
        self.prompts.contains_key(prompt_id)
    }

    /// Prompts in id order.
    pub fn prompts(&self) -> impl Iterator<Item = &Prompt> {
        self.prompts.values()
    }

    /// Gold prompt ids of one phase, in id order.
    pub fn gold_ids(&self, phase: GoldPhase) -> Vec<&str> {
        self.prompts
            .values()
            .filter(|p| p.gold.map(|g| g.phase) == Some(phase))
            .map(|p| p.prompt_id.as_str())
            .collect()
    }

    /// Corpus-wide statistics. Rejections are counted once per distinct id.
    pub fn stats(&self) -> CorpusStats {
        let retained = self.prompts.len();
        let rejected_non_latin = self.rejected.len();
        CorpusStats {
            total_ingested: retained + rejected_non_latin,
            rejected_non_latin,
            retained,
            gold_pre: self.gold_ids(GoldPhase::Pre).len(),
            gold_post: self.gold_ids(GoldPhase::Post).len(),
        }
    }

    /// Stores every record that passes the Latin filter. The whole batch is
    /// validated before anything is applied, so a conflict leaves the corpus
    /// untouched. Returns statistics for this batch only.
    pub fn ingest(&mut self, records: &[PromptRecord], now: DateTime<Utc>) -> Result<CorpusStats> {
        let mut stats = CorpusStats {
            total_ingested: records.len(),
            ..Default::default()
        };
        let mut staged: BTreeMap<&str, &PromptRecord> = BTreeMap::new();
        let mut rejected = Vec::new();
        for rec in records {
            if !filter_latin(&rec.answer) {
                stats.rejected_non_latin += 1;
                rejected.push(rec.prompt_id.clone());
                continue;
            }
            if let Some(existing) = self.prompts.get(&rec.prompt_id) {
                if !existing.same_content(rec) {
                    return Err(Error::DuplicateIdConflict(rec.prompt_id.clone()));
                }
            }
            if let Some(prev) = staged.insert(&rec.prompt_id, rec) {
                if prev != rec {
                    return Err(Error::DuplicateIdConflict(rec.prompt_id.clone()));
                }
            }
            stats.retained += 1;
            match rec.gold.map(|g| g.phase) {
                Some(GoldPhase::Pre) => stats.gold_pre += 1,
                Some(GoldPhase::Post) => stats.gold_post += 1,
                None => {}
            }
        }
        for (id, rec) in staged {
            self.prompts
                .entry(id.to_string())
                .or_insert_with(|| Prompt {
                    prompt_id: rec.prompt_id.clone(),
                    image_ref: rec.image_ref.clone(),
                    question: rec.question.clone(),
                    answer: rec.answer.clone(),
                    gold: rec.gold,
                    template_id: rec.template_id.clone(),
                    created_at: now,
                });
        }
        for id in rejected {
            if !self.prompts.contains_key(&id) {
                self.rejected.insert(id);
            }
        }
        Ok(stats)
    }

    pub fn register_gold(
        &mut self,
        prompt_id: &str,
        label: Reaction,
        phase: GoldPhase,
    ) -> Result<()> {
        let prompt = self
            .prompts
            .get_mut(prompt_id)
            .ok_or_else(|| Error::UnknownPrompt(prompt_id.to_string()))?;
        let spec = GoldSpec { label, phase };
        match prompt.gold {
            Some(existing) if existing == spec => Ok(()),
            Some(_) => Err(Error::GoldConflict(prompt_id.to_string())),
            None => {
                prompt.gold = Some(spec);
                Ok(())
            }
        }
    }

    /// Writes the full store (including `created_at`) as JSON lines in id order.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        for p in self.prompts.values() {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a dump written by [`Corpus::dump`].
    pub fn load_dump<R: BufRead>(reader: R) -> Result<Self> {
        let mut corpus = Corpus::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Prompt = serde_json::from_str(&line).map_err(|e| Error::SchemaError {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if !filter_latin(&p.answer) {
                return Err(Error::SchemaError {
                    line: idx + 1,
                    message: format!("stored prompt {} fails the Latin filter", p.prompt_id),
                });
            }
            corpus.prompts.insert(p.prompt_id.clone(), p);
        }
        Ok(corpus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, answer: &str) -> PromptRecord {
        PromptRecord {
            prompt_id: id.into(),
            image_ref: format!("img/{id}.jpg"),
            question: "Is this fair?".into(),
            answer: answer.into(),
            gold: None,
            template_id: None,
        }
    }

    fn t0() -> DateTime<Utc> {
        DateTime::from_timestamp(1_700_000_000, 0).unwrap()
    }

    #[test]
    fn latin_filter() {
        assert!(filter_latin("This is fine."));
        assert!(!filter_latin("这是不道德的 😡"));
        assert!(!filter_latin(""));
        assert!(!filter_latin("1234 !?"));
        assert!(filter_latin("цена x"));
    }

    #[test]
    fn ingest_rejects_non_latin() {
        let mut c = Corpus::new();
        let stats = c
            .ingest(&[rec("a", "yes"), rec("b", "非常好"), rec("c", "no")], t0())
            .unwrap();
        assert_eq!(stats.retained, 2);
        assert_eq!(stats.rejected_non_latin, 1);
        assert_eq!(stats.total_ingested, 3);
        assert!(c.get("b").is_none());
    }

    #[test]
    fn empty_ingest() {
        let mut c = Corpus::new();
        assert_eq!(c.ingest(&[], t0()).unwrap(), CorpusStats::default());
        assert_eq!(c.stats(), CorpusStats::default());
    }

    #[test]
    fn reingest_is_noop() {
        let records = vec![rec("a", "yes"), rec("b", "非常好"), rec("c", "no")];
        let mut c = Corpus::new();
        let s1 = c.ingest(&records, t0()).unwrap();
        let mut dump1 = Vec::new();
        c.dump(&mut dump1).unwrap();
        let s2 = c
            .ingest(&records, t0() + chrono::Duration::hours(1))
            .unwrap();
        let mut dump2 = Vec::new();
        c.dump(&mut dump2).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(dump1, dump2);
    }

    #[test]
    fn conflicting_duplicate_is_rejected_atomically() {
        let mut c = Corpus::new();
        c.ingest(&[rec("a", "yes")], t0()).unwrap();
        let err = c
            .ingest(&[rec("z", "ok"), rec("a", "different")], t0())
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateIdConflict(id) if id == "a"));
        assert!(c.get("z").is_none());

        let err = Corpus::new()
            .ingest(&[rec("q", "one"), rec("q", "two")], t0())
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateIdConflict(_)));
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let input = "{\"prompt_id\":\"a\",\"image_ref\":\"i\",\"question\":\"q\",\"answer\":\"a\",\"extra\":1}\n\n{\"prompt_id\":\"b\"}\n";
        let err = parse_records(input.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::SchemaError { line: 3, .. }));
        let ok = parse_records(input.lines().next().unwrap().as_bytes()).unwrap();
        assert_eq!(ok.len(), 1);
    }

    #[test]
    fn gold_registration() {
        let mut c = Corpus::new();
        let records: Vec<_> = (0..100).map(|i| rec(&format!("p{i:03}"), "fine")).collect();
        c.ingest(&records, t0()).unwrap();
        for i in 0..5 {
            c.register_gold(&format!("p{i:03}"), Reaction::Ethical, GoldPhase::Pre)
                .unwrap();
            c.register_gold(
                &format!("p{:03}", 95 + i),
                Reaction::Unethical,
                GoldPhase::Post,
            )
            .unwrap();
        }
        let s = c.stats();
        assert_eq!((s.gold_pre, s.gold_post), (5, 5));
        assert_eq!(s.retained, 100);

        c.register_gold("p000", Reaction::Ethical, GoldPhase::Pre)
            .unwrap();
        assert!(matches!(
            c.register_gold("p000", Reaction::Ethical, GoldPhase::Post),
            Err(Error::GoldConflict(_))
        ));
        assert!(matches!(
            c.register_gold("nope", Reaction::Ethical, GoldPhase::Pre),
            Err(Error::UnknownPrompt(_))
        ));
    }

    #[test]
    fn dump_round_trip() {
        let mut c = Corpus::new();
        let mut g = rec("g", "gold answer");
        g.gold = Some(GoldSpec {
            label: Reaction::Unclear,
            phase: GoldPhase::Post,
        });
        c.ingest(&[rec("a", "yes"), g], t0()).unwrap();
        let mut buf = Vec::new();
        c.dump(&mut buf).unwrap();
        let back = Corpus::load_dump(buf.as_slice()).unwrap();
        assert_eq!(back.prompts, c.prompts);
    }
}
