//! Trial lists: `<enrol_id> <test_id> <label>` per line, `#` comments.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{io_err, DataError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Target,
    Nontarget,
    Spoof,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Target, Label::Nontarget, Label::Spoof];

    /// SASV positive: same speaker and bona fide speech.
    pub fn is_positive(self) -> bool {
        self == Label::Target
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "target" => Ok(Label::Target),
            "nontarget" => Ok(Label::Nontarget),
            "spoof" => Ok(Label::Spoof),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrialRecord {
    pub enrol_id: String,
    pub test_id: String,
    pub label: Label,
}

impl TrialRecord {
    pub fn new(enrol_id: impl Into<String>, test_id: impl Into<String>, label: Label) -> Result<Self, DataError> {
        let (enrol_id, test_id) = (enrol_id.into(), test_id.into());
        for id in [&enrol_id, &test_id] {
            // A leading '#' would read back as a comment line.
            if id.is_empty() || id.starts_with('#') || id.chars().any(char::is_whitespace) {
                return Err(DataError::BadTrialId(id.clone()));
            }
        }
        Ok(Self {
            enrol_id,
            test_id,
            label,
        })
    }
}

pub fn parse_trials(text: &str) -> Result<Vec<TrialRecord>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        // An empty field between two separators is an empty id, not a skipped column.
        let fields: Vec<&str> = trimmed.split(' ').collect();
        if fields.len() != 3 {
            let found = trimmed.split_whitespace().count();
            if found == 3 && fields.len() > 3 {
                return Err(DataError::EmptyId { line });
            }
            return Err(DataError::FieldCount { line, found: fields.len() });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(DataError::EmptyId { line });
        }
        let label = fields[2].parse().map_err(|_| DataError::UnknownLabel {
            line,
            token: fields[2].to_string(),
        })?;
        out.push(TrialRecord::new(fields[0], fields[1], label)?);
    }
    Ok(out)
}

pub fn format_trials(trials: &[TrialRecord]) -> String {
    let mut out = String::new();
    for t in trials {
        out.push_str(&t.enrol_id);
        out.push(' ');
        out.push_str(&t.test_id);
        out.push(' ');
        out.push_str(t.label.as_str());
        out.push('\n');
    }
    out
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_trials(&text)
}

pub fn write_trials(trials: &[TrialRecord], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, format_trials(trials)).map_err(io_err(path))
}
