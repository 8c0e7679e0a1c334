use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Prompt;
use crate::{Error, Reaction, Result};

/// Source of text-only ethics scores in [0, 1]; 0 means ethical.
pub trait ScoreProvider: Send + Sync {
    fn score(&self, prompt: &Prompt) -> Result<f64>;
}

/// Text handed to a scorer: the question followed by the answer.
pub fn scorer_input(prompt: &Prompt) -> String {
    format!("{} {}", prompt.question, prompt.answer)
}

/// Always 0.5.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubScorer;

impl ScoreProvider for StubScorer {
    fn score(&self, _prompt: &Prompt) -> Result<f64> {
        Ok(0.5)
    }
}

/// Precomputed scores, one `prompt_id<TAB or comma>score` per line.
#[derive(Debug, Clone, Default)]
pub struct FileScorer {
    scores: HashMap<String, f64>,
}

impl FileScorer {
    pub fn parse<R: BufRead>(r: R) -> Result<Self> {
        let mut scores = HashMap::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let schema = |message: &str| Error::SchemaError {
                line: idx + 1,
                message: message.to_string(),
            };
            let (id, score) = line
                .split_once('\t')
                .or_else(|| line.rsplit_once(','))
                .ok_or_else(|| schema("expected prompt_id and score"))?;
            let score: f64 = score
                .trim()
                .parse()
                .map_err(|_| schema("score is not a number"))?;
            check_score(score)?;
            scores.insert(id.trim().to_string(), score);
        }
        Ok(Self { scores })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)
            .map_err(|e| Error::ProviderUnavailable(format!("{}: {e}", path.display())))?;
        Self::parse(BufReader::new(f))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl ScoreProvider for FileScorer {
    fn score(&self, prompt: &Prompt) -> Result<f64> {
        self.scores
            .get(&prompt.prompt_id)
            .copied()
            .ok_or_else(|| Error::ProviderUnavailable(format!("no score for {}", prompt.prompt_id)))
    }
}

fn check_score(score: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&score) {
        Ok(score)
    } else {
        Err(Error::ScoreOutOfRange(score))
    }
}

/// Queries the provider and validates the range of its answer.
pub fn text_score(provider: &dyn ScoreProvider, prompt: &Prompt) -> Result<f64> {
    check_score(provider.score(prompt)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketingConfig {
    pub low: f64,
    pub high: f64,
}

impl Default for BucketingConfig {
    fn default() -> Self {
        Self {
            low: 0.4,
            high: 0.6,
        }
    }
}

impl BucketingConfig {
    pub fn validate(&self) -> Result<()> {
        if 0.0 <= self.low && self.low <= self.high && self.high <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "bucket bounds must satisfy 0 <= low <= high <= 1, got {} and {}",
                self.low, self.high
            )))
        }
    }
}

/// Below `low` is ethical, above `high` unethical, anything between
/// (bounds included) unclear.
pub fn bucket_score(score: f64, config: &BucketingConfig) -> Result<Reaction> {
    let score = check_score(score)?;
    Ok(if score < config.low {
        Reaction::Ethical
    } else if score > config.high {
        Reaction::Unethical
    } else {
        Reaction::Unclear
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub fraction: f64,
}

/// Bins partition [0, 1] into left-closed intervals; the last is closed.
pub fn score_histogram(scores: &[f64], bin_width: f64) -> Result<Vec<HistogramBin>> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::InvalidConfig(format!("bin width {bin_width}")));
    }
    let n = (1.0 / bin_width).round().max(1.0) as usize;
    let mut counts = vec![0usize; n];
    for &s in scores {
        check_score(s)?;
        // Compare against the same edges the bins report, so a score equal
        // to a printed lower bound always lands in that bin.
        let mut i = ((s * n as f64).floor() as usize).min(n - 1);
        if i + 1 < n && s >= (i + 1) as f64 / n as f64 {
            i += 1;
        } else if s < i as f64 / n as f64 {
            i -= 1;
        }
        counts[i] += 1;
    }
    let total = scores.len();
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lower: i as f64 / n as f64,
            upper: (i + 1) as f64 / n as f64,
            count,
            fraction: if total == 0 {
                0.0
            } else {
                count as f64 / total as f64
            },
        })
        .collect())
}

/// Fraction of `(score, reference)` pairs whose bucket equals the reference.
pub fn bucket_agreement(pairs: &[(f64, Reaction)], config: &BucketingConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for &(s, r) in pairs {
        if bucket_score(s, config)? == r {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}
