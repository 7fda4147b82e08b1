//! Exit codes. Each library error kind has its own code.

use std::fmt;

use lamina::Error;

pub const USAGE: i32 = 2;
pub const CONFIG: i32 = 3;
pub const DATA: i32 = 4;
pub const FORMAT: i32 = 5;
pub const IO: i32 = 6;
pub const SERIALIZATION: i32 = 7;
pub const SHAPE: i32 = 8;
pub const NON_FINITE: i32 = 9;
pub const AXIS: i32 = 10;
pub const LABEL: i32 = 11;
pub const BOX: i32 = 12;
pub const INDEX: i32 = 13;
pub const CLASS: i32 = 14;
pub const PAIRING: i32 = 15;
pub const RUN_DIR: i32 = 16;

/// Table printed by `--help`.
pub const TABLE: &str = "\
Exit codes:
   0  success
   2  usage error
   3  invalid configuration
   4  data error (missing scans, empty or overlapping sets)
   5  malformed file
   6  I/O error
   7  serialization error
   8  shape mismatch
   9  non-finite value
  10  invalid axis
  11  invalid label
  12  invalid crop box
  13  index out of range
  14  a required class is missing
  15  score sets do not pair up
  16  run directory is in use or holds a different run";

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Failure::new(CONFIG, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure::new(DATA, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => CONFIG,
            Error::Data(_) => DATA,
            Error::Format(_) => FORMAT,
            Error::Io(_) => IO,
            Error::Serde(_) => SERIALIZATION,
            Error::Shape(_) => SHAPE,
            Error::NonFinite(_) => NON_FINITE,
            Error::Axis { .. } => AXIS,
            Error::Label(_) => LABEL,
            Error::Box(_) => BOX,
            Error::Index(_) => INDEX,
            Error::Class(_) => CLASS,
            Error::Pairing(_) => PAIRING,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(IO, format!("I/O error: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new(SERIALIZATION, format!("serialization error: {e}"))
    }
}
