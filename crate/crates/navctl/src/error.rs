//! Machine-readable failures shared by the CLI and the teleop service.

use std::fmt;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NavError {
    pub code: &'static str,
    pub message: String,
}

impl NavError {
    pub fn new(code: &'static str, message: impl fmt::Display) -> NavError {
        NavError {
            code,
            message: message.to_string(),
        }
    }

    /// Single-line JSON rendering used on stderr.
    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self.code, "message": self.message }).to_string()
    }

    /// Process exit status: 2 for command-line misuse, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.code == "usage" {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for NavError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for NavError {}

pub type Result<T> = std::result::Result<T, NavError>;

/// Map a library error into a coded one.
pub trait Coded<T> {
    fn code(self, code: &'static str) -> Result<T>;
}

impl<T, E: fmt::Display> Coded<T> for std::result::Result<T, E> {
    fn code(self, code: &'static str) -> Result<T> {
        self.map_err(|e| NavError::new(code, e))
    }
}
