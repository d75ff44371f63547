//! Process exit codes and machine-readable error reports.

use std::fmt;

use partsdf::Error;
use serde::Serialize;

pub const OK: i32 = 0;
pub const USAGE: i32 = 2;
pub const DATA: i32 = 3;
pub const NUMERIC: i32 = 4;

#[derive(Debug)]
pub enum HubError {
    Usage(String),
    Core(Error),
}

impl fmt::Display for HubError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HubError::Usage(m) => f.write_str(m),
            HubError::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for HubError {}

impl From<Error> for HubError {
    fn from(e: Error) -> Self {
        HubError::Core(e)
    }
}

impl From<std::io::Error> for HubError {
    fn from(e: std::io::Error) -> Self {
        HubError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for HubError {
    fn from(e: serde_json::Error) -> Self {
        HubError::Core(Error::Json(e))
    }
}

pub fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::UnknownKey(_) | Error::OutOfRange { .. } | Error::WrongVariant { .. } => "usage",
        Error::InvalidParams(_) => "invalid_parameters",
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::EmptyTape | Error::EmptyUnion => "numerical",
        Error::NoDetection(_) => "no_detection",
        Error::Io(_) => "io",
        Error::Json(_) | Error::Format(_) => "format",
        Error::LengthMismatch { .. } | Error::Dimension { .. } => "data",
    }
}

impl HubError {
    pub fn kind(&self) -> &'static str {
        match self {
            HubError::Usage(_) => "usage",
            HubError::Core(e) => kind(e),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "usage" | "invalid_parameters" => USAGE,
            "numerical" | "no_detection" => NUMERIC,
            _ => DATA,
        }
    }
}

#[derive(Serialize)]
struct Report<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

/// One line on stderr, JSON when `json` is set.
pub fn report(e: &HubError, json: bool) {
    if json {
        let r = Report { error: e.kind(), message: e.to_string(), exit_code: e.exit_code() };
        eprintln!("{}", serde_json::to_string(&r).unwrap_or_else(|_| "{\"error\":\"internal\"}".into()));
    } else {
        eprintln!("error: {e}");
    }
}

pub fn usage_report(message: &str, json: bool) {
    report(&HubError::Usage(message.trim_end().to_string()), json);
}
