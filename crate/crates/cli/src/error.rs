//! Command failures and their exit codes.

use std::fmt;
use std::path::Path;

use rulefit_hte::Error;

/// Exit status classes: 1 usage, 2 data, 3 numerical.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage,
    Data,
    Numerical,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Usage => 1,
            ExitKind::Data => 2,
            ExitKind::Numerical => 3,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ExitKind::Usage => "usage",
            ExitKind::Data => "data",
            ExitKind::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        // one line per error, whatever the source text looked like
        let message: String = message.into();
        let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
        CliError { kind, message }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Usage, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Data, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::data(format!("I/O error on {}: {err}", path.display()))
    }
}

/// `error[data]: missing column(s): x3`
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.kind.tag(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::Parameter { .. } | Error::Scenario(_) => ExitKind::Usage,
            Error::Numerical(_) | Error::EmptyModel => ExitKind::Numerical,
            _ => ExitKind::Data,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::data(format!("model file: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::data(format!("CSV error: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_exit_classes() {
        let param: CliError = Error::Parameter {
            name: "folds",
            reason: "need at least 2".into(),
        }
        .into();
        assert_eq!(param.kind.code(), 1);
        let missing: CliError = Error::MissingColumns(vec!["x3".into()]).into();
        assert_eq!(missing.kind.code(), 2);
        assert_eq!(missing.to_string(), "error[data]: missing column(s): x3");
        let num: CliError = Error::Numerical("diverged".into()).into();
        assert_eq!(num.kind.code(), 3);
    }

    #[test]
    fn messages_are_single_line() {
        let e = CliError::usage("first\n  second\tthird");
        assert_eq!(e.to_string(), "error[usage]: first second third");
    }
}
