use std::fmt::Display;

use serde_json::json;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Display) -> Self {
        Self {
            code: 1,
            kind: "user",
            message: message.to_string(),
        }
    }

    pub fn internal(message: impl Display) -> Self {
        Self {
            code: 2,
            kind: "internal",
            message: message.to_string(),
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_line(&self) -> String {
        json!({ "error": self.kind, "code": self.code, "message": self.message }).to_string()
    }
}

impl From<depscreen_core::Error> for CliError {
    fn from(e: depscreen_core::Error) -> Self {
        use depscreen_core::Error as E;
        match e {
            E::Tape(_) | E::NonFinite(_) => CliError::internal(e),
            _ => CliError::user(e),
        }
    }
}

impl From<depscreen_service::ServiceError> for CliError {
    fn from(e: depscreen_service::ServiceError) -> Self {
        use depscreen_service::ServiceError as E;
        match e {
            E::Core(inner) => inner.into(),
            E::Storage(_) => CliError::internal(e),
            _ => CliError::user(e),
        }
    }
}
