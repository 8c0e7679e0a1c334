//! Per-prompt majority vote gated by the unclear-fraction cutoff, plus the
//! label and coverage tables reported over the working set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, GoldPhase};
use crate::votes::Vote;
use crate::{Error, Reaction, Result};

/// Lower and upper edge of the recommended cutoff band.
pub const TAU_BAND: (f64, f64) = (0.10, 0.25);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// An ethical/unethical tie is labelled unclear.
    #[default]
    Unclear,
    /// Ties go to ethical, the first label in declaration order.
    DeterministicOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationConfig {
    pub tau: f64,
    pub min_votes: usize,
    pub tie_rule: TieRule,
    /// Permits a cutoff outside [`TAU_BAND`]; a warning is logged instead.
    pub allow_tau_outside_band: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            tau: 0.20,
            min_votes: 1,
            tie_rule: TieRule::Unclear,
            allow_tau_outside_band: false,
        }
    }
}

impl AggregationConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!(
                "tau {} outside [0, 1]",
                self.tau
            )));
        }
        if self.min_votes == 0 {
            return Err(Error::InvalidConfig("min_votes must be at least 1".into()));
        }
        if !(TAU_BAND.0..=TAU_BAND.1).contains(&self.tau) {
            if !self.allow_tau_outside_band {
                return Err(Error::InvalidConfig(format!(
                    "tau {} outside the [{}, {}] band; set allow_tau_outside_band to override",
                    self.tau, TAU_BAND.0, TAU_BAND.1
                )));
            }
            log::warn!("tau {} is outside the recommended band", self.tau);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Ethical,
    Unethical,
    Unclear,
    Unevaluated,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Ethical => "ethical",
            Label::Unethical => "unethical",
            Label::Unclear => "unclear",
            Label::Unevaluated => "unevaluated",
        }
    }

    pub fn as_reaction(self) -> Option<Reaction> {
        match self {
            Label::Ethical => Some(Reaction::Ethical),
            Label::Unethical => Some(Reaction::Unethical),
            Label::Unclear => Some(Reaction::Unclear),
            Label::Unevaluated => None,
        }
    }

    pub fn is_retainable(self) -> bool {
        matches!(self, Label::Ethical | Label::Unethical)
    }
}

impl From<Reaction> for Label {
    fn from(r: Reaction) -> Self {
        match r {
            Reaction::Ethical => Label::Ethical,
            Reaction::Unethical => Label::Unethical,
            Reaction::Unclear => Label::Unclear,
        }
    }
}

/// Reaction tallies, serialized as `[ethical, unethical, unclear]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Counts {
    pub ethical: usize,
    pub unethical: usize,
    pub unclear: usize,
}

impl From<[usize; 3]> for Counts {
    fn from(c: [usize; 3]) -> Self {
        Self {
            ethical: c[0],
            unethical: c[1],
            unclear: c[2],
        }
    }
}

impl From<Counts> for [usize; 3] {
    fn from(c: Counts) -> Self {
        [c.ethical, c.unethical, c.unclear]
    }
}

impl Counts {
    pub fn total(&self) -> usize {
        self.ethical + self.unethical + self.unclear
    }

    pub fn add(&mut self, r: Reaction) {
        match r {
            Reaction::Ethical => self.ethical += 1,
            Reaction::Unethical => self.unethical += 1,
            Reaction::Unclear => self.unclear += 1,
        }
    }

    pub fn get(&self, r: Reaction) -> usize {
        match r {
            Reaction::Ethical => self.ethical,
            Reaction::Unethical => self.unethical,
            Reaction::Unclear => self.unclear,
        }
    }

    pub fn from_reactions<'a, I: IntoIterator<Item = &'a Reaction>>(rs: I) -> Self {
        let mut c = Counts::default();
        for r in rs {
            c.add(*r);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateLabel {
    pub prompt_id: String,
    pub counts: Counts,
    pub total: usize,
    pub unclear_fraction: f64,
    pub label: Label,
    pub retained: bool,
}

/// Applies the labelling rule to one prompt's tallies. `retained` is left
/// false; the caller decides working-set membership.
pub fn label_counts(prompt_id: &str, counts: Counts, config: &AggregationConfig) -> AggregateLabel {
    let total = counts.total();
    let unclear_fraction = if total == 0 {
        0.0
    } else {
        counts.unclear as f64 / total as f64
    };
    let label = if total == 0 || total < config.min_votes {
        Label::Unevaluated
    } else if unclear_fraction >= config.tau {
        Label::Unclear
    } else if counts.ethical > counts.unethical {
        Label::Ethical
    } else if counts.unethical > counts.ethical {
        Label::Unethical
    } else {
        match config.tie_rule {
            TieRule::Unclear => Label::Unclear,
            TieRule::DeterministicOrder => Label::Ethical,
        }
    };
    AggregateLabel {
        prompt_id: prompt_id.to_string(),
        counts,
        total,
        unclear_fraction,
        label,
        retained: false,
    }
}

/// Tallies votes per prompt. The caller chooses which votes count.
pub fn tally<'a, I: IntoIterator<Item = &'a Vote>>(votes: I) -> BTreeMap<String, Counts> {
    let mut out: BTreeMap<String, Counts> = BTreeMap::new();
    for v in votes {
        out.entry(v.prompt_id.clone()).or_default().add(v.reaction);
    }
    out
}

/// Labels every prompt of the corpus, in id order.
pub fn label_corpus(
    corpus: &Corpus,
    tallies: &BTreeMap<String, Counts>,
    config: &AggregationConfig,
) -> Vec<AggregateLabel> {
    corpus
        .prompts()
        .map(|p| {
            let counts = tallies.get(&p.prompt_id).copied().unwrap_or_default();
            label_counts(&p.prompt_id, counts, config)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub count: usize,
    pub percentage: f64,
}

fn pct(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

/// Prompts per label, over evaluated prompts of the working set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    pub ethical: Row,
    pub unethical: Row,
    pub unclear: Row,
    pub total: usize,
}

/// Prompts per number of reactions received (1, 2, 3 or more).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub one: Row,
    pub two: Row,
    pub three_or_more: Row,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldBreakdown {
    pub prompt_id: String,
    pub phase: GoldPhase,
    pub gold_label: Reaction,
    pub counts: Counts,
    /// Percentages of (ethical, unethical, unclear) reactions.
    pub percentages: [f64; 3],
}

/// Unclear share and top ethical/unethical share of one prompt, both in
/// percent. Reported for inspection only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementPoint {
    pub prompt_id: String,
    pub unclear_pct: f64,
    pub max_agreement_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub labels: LabelTable,
    pub coverage: CoverageTable,
    pub gold: Vec<GoldBreakdown>,
    pub agreement: Vec<AgreementPoint>,
}

pub fn label_table<'a, I: IntoIterator<Item = &'a AggregateLabel>>(labels: I) -> LabelTable {
    let (mut e, mut u, mut c) = (0, 0, 0);
    for l in labels {
        match l.label {
            Label::Ethical => e += 1,
            Label::Unethical => u += 1,
            Label::Unclear => c += 1,
            Label::Unevaluated => {}
        }
    }
    let total = e + u + c;
    LabelTable {
        ethical: Row {
            count: e,
            percentage: pct(e, total),
        },
        unethical: Row {
            count: u,
            percentage: pct(u, total),
        },
        unclear: Row {
            count: c,
            percentage: pct(c, total),
        },
        total,
    }
}

pub fn coverage_table<'a, I: IntoIterator<Item = &'a AggregateLabel>>(labels: I) -> CoverageTable {
    let (mut one, mut two, mut more) = (0, 0, 0);
    for l in labels {
        match l.total {
            0 => {}
            1 => one += 1,
            2 => two += 1,
            _ => more += 1,
        }
    }
    let total = one + two + more;
    CoverageTable {
        one: Row {
            count: one,
            percentage: pct(one, total),
        },
        two: Row {
            count: two,
            percentage: pct(two, total),
        },
        three_or_more: Row {
            count: more,
            percentage: pct(more, total),
        },
        total,
    }
}

/// Reaction breakdown of every gold prompt: pre-test first, then post-test,
/// each in id order.
pub fn gold_breakdown(corpus: &Corpus, tallies: &BTreeMap<String, Counts>) -> Vec<GoldBreakdown> {
    [GoldPhase::Pre, GoldPhase::Post]
        .into_iter()
        .flat_map(|phase| {
            corpus.gold_ids(phase).into_iter().map(move |id| {
                let prompt = corpus.get(id).expect("gold id comes from corpus");
                let counts = tallies.get(id).copied().unwrap_or_default();
                let total = counts.total();
                GoldBreakdown {
                    prompt_id: id.to_string(),
                    phase,
                    gold_label: prompt.gold.expect("gold prompt").label,
                    counts,
                    percentages: [
                        pct(counts.ethical, total),
                        pct(counts.unethical, total),
                        pct(counts.unclear, total),
                    ],
                }
            })
        })
        .collect()
}

pub fn agreement_points<'a, I: IntoIterator<Item = &'a AggregateLabel>>(
    labels: I,
) -> Vec<AgreementPoint> {
    labels
        .into_iter()
        .filter(|l| l.total > 0)
        .map(|l| AgreementPoint {
            prompt_id: l.prompt_id.clone(),
            unclear_pct: pct(l.counts.unclear, l.total),
            max_agreement_pct: pct(l.counts.ethical.max(l.counts.unethical), l.total),
        })
        .collect()
}

/// Renders the label and coverage tables as comma-separated text.
pub fn render_stats_report(stats: &DistributionStats) -> String {
    let mut out = String::new();
    out.push_str("Classification,Amount of prompts,Percentage\n");
    for (name, row) in [
        ("Ethical", stats.labels.ethical),
        ("Unethical", stats.labels.unethical),
        ("Unclear", stats.labels.unclear),
    ] {
        let _ = writeln!(out, "{name},{},{:.0}%", row.count, row.percentage);
    }
    out.push('\n');
    out.push_str("Amount of reactions,Amount of prompts,Percentage\n");
    for (name, row) in [
        ("1", stats.coverage.one),
        ("2", stats.coverage.two),
        (">=3", stats.coverage.three_or_more),
    ] {
        let _ = writeln!(out, "{name},{},{:.0}%", row.count, row.percentage);
    }
    if !stats.gold.is_empty() {
        out.push('\n');
        out.push_str("Gold prompt,Phase,Gold label,Ethical %,Unethical %,Unclear %,Reactions\n");
        for g in &stats.gold {
            let _ = writeln!(
                out,
                "{},{},{},{:.1},{:.1},{:.1},{}",
                g.prompt_id,
                g.phase.as_str(),
                g.gold_label,
                g.percentages[0],
                g.percentages[1],
                g.percentages[2],
                g.counts.total()
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab(c: [usize; 3], tau: f64) -> AggregateLabel {
        label_counts("p", c.into(), &AggregationConfig::with_tau(tau))
    }

    #[test]
    fn unanimous() {
        let l = lab([2, 0, 0], 0.2);
        assert_eq!(l.label, Label::Ethical);
        assert_eq!(l.unclear_fraction, 0.0);
    }

    #[test]
    fn unclear_fraction_overrides_plurality() {
        let l = lab([5, 4, 3], 0.2);
        assert_eq!(l.unclear_fraction, 0.25);
        assert_eq!(l.label, Label::Unclear);
    }

    #[test]
    fn boundary_is_unclear() {
        assert_eq!(lab([5, 4, 3], 0.25).label, Label::Unclear);
        assert_eq!(lab([3, 1, 1], 0.2).label, Label::Unclear);
        assert_eq!(lab([12, 0, 3], 0.2).label, Label::Unclear);
        assert_eq!(lab([13, 0, 3], 0.2).label, Label::Ethical);
    }

    #[test]
    fn no_votes_is_unevaluated() {
        assert_eq!(lab([0, 0, 0], 0.2).label, Label::Unevaluated);
        let cfg = AggregationConfig {
            min_votes: 3,
            ..Default::default()
        };
        assert_eq!(
            label_counts("p", [1, 1, 0].into(), &cfg).label,
            Label::Unevaluated
        );
    }

    #[test]
    fn ties() {
        assert_eq!(lab([2, 2, 0], 0.2).label, Label::Unclear);
        let cfg = AggregationConfig {
            tie_rule: TieRule::DeterministicOrder,
            ..Default::default()
        };
        assert_eq!(
            label_counts("p", [2, 2, 0].into(), &cfg).label,
            Label::Ethical
        );
    }

    #[test]
    fn tau_band_is_enforced_softly() {
        assert!(AggregationConfig::with_tau(0.3).validate().is_err());
        let cfg = AggregationConfig {
            tau: 0.3,
            allow_tau_outside_band: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
        assert!(AggregationConfig::with_tau(0.1).validate().is_ok());
    }

    #[test]
    fn empty_tables() {
        let s = DistributionStats {
            labels: label_table([]),
            coverage: coverage_table([]),
            ..Default::default()
        };
        assert_eq!(s.labels.total, 0);
        assert_eq!(s.coverage.total, 0);
        assert_eq!(s.labels.ethical.percentage, 0.0);
        assert!(render_stats_report(&s).contains("Ethical,0,0%"));
    }

    #[test]
    fn counts_serialize_as_triple() {
        let c = Counts::from([1, 2, 3]);
        assert_eq!(serde_json::to_string(&c).unwrap(), "[1,2,3]");
    }
}
