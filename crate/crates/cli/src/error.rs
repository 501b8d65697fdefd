use std::fmt;

use cci_core::CciError;
use serde_json::json;

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// A failed command: exit code plus the message reported as JSON on stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
    pub label: Option<String>,
}

impl CliError {
    pub fn usage(message: impl fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.to_string(),
            label: None,
        }
    }

    pub fn internal(message: impl fmt::Display) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: message.to_string(),
            label: None,
        }
    }

    pub fn unknown_label(label: &str) -> Self {
        Self {
            code: EXIT_USAGE,
            message: format!("label `{label}` is not in the text bank and no text embedding was given"),
            label: Some(label.to_string()),
        }
    }

    pub fn to_json(&self) -> String {
        let kind = if self.code == EXIT_USAGE { "usage" } else { "internal" };
        let mut body = json!({"error": {"kind": kind, "code": self.code, "message": self.message}});
        if let Some(l) = &self.label {
            body["error"]["label"] = json!(l);
        }
        body.to_string()
    }
}

impl From<CciError> for CliError {
    fn from(e: CciError) -> Self {
        match e {
            CciError::UnknownLabel(l) => CliError::unknown_label(&l),
            other => CliError::internal(other),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}
