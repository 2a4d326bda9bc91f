use maxent_pref::ErrorFamily;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("unknown key `{key}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey { key: String, suggestion: Option<String> },
    #[error(transparent)]
    Core(#[from] maxent_pref::Error),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    pub fn validation(field: &str, message: impl Into<String>) -> Self {
        CliError::Validation { field: field.to_string(), message: message.into() }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), message: e.to_string() }
    }

    /// 0 ok, 2 config, 3 numeric, 4 verification, 5 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation { .. } | CliError::UnknownKey { .. } => 2,
            CliError::Core(e) => match e.family() {
                ErrorFamily::Config => 2,
                ErrorFamily::Numeric => 3,
                ErrorFamily::Io => 5,
            },
            CliError::Verification(_) => 4,
            CliError::Io { .. } => 5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_family() {
        assert_eq!(CliError::validation("env.vocab_size", "x").exit_code(), 2);
        assert_eq!(CliError::UnknownKey { key: "a".into(), suggestion: None }.exit_code(), 2);
        assert_eq!(CliError::Core(maxent_pref::Error::NonFiniteGradient).exit_code(), 3);
        assert_eq!(CliError::Core(maxent_pref::Error::MissingReference).exit_code(), 2);
        assert_eq!(CliError::Core(maxent_pref::Error::Io("x".into())).exit_code(), 5);
        assert_eq!(CliError::Verification("x".into()).exit_code(), 4);
        assert_eq!(CliError::Io { path: "p".into(), message: "m".into() }.exit_code(), 5);
    }

    #[test]
    fn unknown_key_message_has_suggestion() {
        let e = CliError::UnknownKey { key: "env.vocabsize".into(), suggestion: Some("env.vocab_size".into()) };
        assert_eq!(e.to_string(), "unknown key `env.vocabsize` (did you mean `env.vocab_size`?)");
    }
}
