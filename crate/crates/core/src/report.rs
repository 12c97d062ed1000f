//! Structured pass/warn/fail reports shared by certifiers, validators and verdicts.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Outcome of a single check. Ordered from best to worst.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Skipped,
    Warn,
    Fail,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Skipped => "SKIPPED",
            Status::Warn => "WARN",
            Status::Fail => "FAIL",
        })
    }
}

/// One inequality `value <= bound` (or a named condition) with its margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub value: f64,
    pub bound: f64,
    /// `bound - value` for upper bounds; positive means satisfied.
    pub margin: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl Check {
    /// `value <= bound`, failing with `on_violation` otherwise.
    pub fn upper(name: impl Into<String>, value: f64, bound: f64, on_violation: Status) -> Self {
        let ok = value <= bound;
        Self {
            name: name.into(),
            status: if ok { Status::Pass } else { on_violation },
            value,
            bound,
            margin: bound - value,
            note: String::new(),
        }
    }

    /// `value > bound` strictly.
    pub fn strict_lower(name: impl Into<String>, value: f64, bound: f64, on_violation: Status) -> Self {
        let ok = value > bound;
        Self {
            name: name.into(),
            status: if ok { Status::Pass } else { on_violation },
            value,
            bound,
            margin: value - bound,
            note: String::new(),
        }
    }

    /// `value >= bound`.
    pub fn lower(name: impl Into<String>, value: f64, bound: f64, on_violation: Status) -> Self {
        let ok = value >= bound;
        Self {
            name: name.into(),
            status: if ok { Status::Pass } else { on_violation },
            value,
            bound,
            margin: value - bound,
            note: String::new(),
        }
    }

    pub fn skipped(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            status: Status::Skipped,
            value: f64::NAN,
            bound: f64::NAN,
            margin: f64::NAN,
            note: reason.into(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub subject: String,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn new(subject: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            checks: Vec::new(),
        }
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    /// Worst status over all checks; an empty report passes.
    pub fn status(&self) -> Status {
        self.checks.iter().map(|c| c.status).max().unwrap_or(Status::Pass)
    }

    pub fn passed(&self) -> bool {
        matches!(self.status(), Status::Pass | Status::Skipped)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Smallest margin over non-skipped checks.
    pub fn worst_margin(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.status != Status::Skipped)
            .map(|c| c.margin)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn extend(&mut self, other: Report) {
        let prefix = other.subject;
        for mut c in other.checks {
            c.name = format!("{prefix}.{}", c.name);
            self.checks.push(c);
        }
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {}", self.status(), self.subject)?;
        for c in &self.checks {
            write!(
                f,
                "  {:<7} {:<40} value={:.6e} bound={:.6e} margin={:.6e}",
                c.status.to_string(),
                c.name,
                c.value,
                c.bound,
                c.margin
            )?;
            if !c.note.is_empty() {
                write!(f, "  ({})", c.note)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
