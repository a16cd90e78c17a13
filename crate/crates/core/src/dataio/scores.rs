//! Score files: `<enrol_id>\t<test_id>\t<score %.6f>` per line.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{io_err, DataError, Label, TrialRecord};

/// One line of a score file. Score files carry no labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub enrol_id: String,
    pub test_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub trial: TrialRecord,
    pub score: f64,
}

/// Labelled per-trial scores, in trial order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    records: Vec<ScoredTrial>,
}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, trial: TrialRecord, score: f64) -> Result<(), DataError> {
        if !score.is_finite() {
            return Err(DataError::NonFiniteScore {
                enrol_id: trial.enrol_id,
                test_id: trial.test_id,
            });
        }
        self.records.push(ScoredTrial { trial, score });
        Ok(())
    }

    pub fn from_scores(trials: &[TrialRecord], scores: &[f64]) -> Result<Self, DataError> {
        assert_eq!(trials.len(), scores.len(), "one score per trial");
        let mut set = Self::new();
        for (t, &s) in trials.iter().zip(scores) {
            set.push(t.clone(), s)?;
        }
        Ok(set)
    }

    /// Attaches labels from `trials` to the entries of a score file. Every
    /// trial needs exactly one score and every score exactly one trial.
    pub fn join(trials: &[TrialRecord], entries: &[ScoreEntry]) -> Result<Self, DataError> {
        let mut by_pair: HashMap<(&str, &str), f64> = HashMap::with_capacity(entries.len());
        for e in entries {
            if by_pair.insert((&e.enrol_id, &e.test_id), e.score).is_some() {
                return Err(DataError::DuplicateTrial {
                    enrol_id: e.enrol_id.clone(),
                    test_id: e.test_id.clone(),
                });
            }
        }
        let mut set = Self::new();
        for t in trials {
            let score = by_pair
                .remove(&(t.enrol_id.as_str(), t.test_id.as_str()))
                .ok_or_else(|| DataError::MissingScore {
                    enrol_id: t.enrol_id.clone(),
                    test_id: t.test_id.clone(),
                })?;
            set.push(t.clone(), score)?;
        }
        if let Some(extra) = entries
            .iter()
            .find(|e| by_pair.contains_key(&(e.enrol_id.as_str(), e.test_id.as_str())))
        {
            return Err(DataError::UnexpectedScore {
                enrol_id: extra.enrol_id.clone(),
                test_id: extra.test_id.clone(),
            });
        }
        Ok(set)
    }

    pub fn records(&self) -> &[ScoredTrial] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.trial.label).collect()
    }

    pub fn entries(&self) -> Vec<ScoreEntry> {
        self.records
            .iter()
            .map(|r| ScoreEntry {
                enrol_id: r.trial.enrol_id.clone(),
                test_id: r.trial.test_id.clone(),
                score: r.score,
            })
            .collect()
    }
}

pub fn format_score_line(enrol_id: &str, test_id: &str, score: f64) -> String {
    format!("{enrol_id}\t{test_id}\t{score:.6}")
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreEntry>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.is_empty() {
            continue;
        }
        let malformed = |reason: String| DataError::MalformedScore { line, reason };
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(malformed("empty id".into()));
        }
        let score: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| malformed(format!("score {:?}: {e}", fields[2])))?;
        if !score.is_finite() {
            return Err(malformed(format!("non-finite score {:?}", fields[2])));
        }
        out.push(ScoreEntry {
            enrol_id: fields[0].to_string(),
            test_id: fields[1].to_string(),
            score,
        });
    }
    Ok(out)
}

pub fn format_scores(scores: &ScoreSet) -> String {
    let mut out = String::new();
    for r in scores.records() {
        out.push_str(&format_score_line(&r.trial.enrol_id, &r.trial.test_id, r.score));
        out.push('\n');
    }
    out
}

pub fn write_scores(scores: &ScoreSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, format_scores(scores)).map_err(io_err(path))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreEntry>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_scores(&text)
}
