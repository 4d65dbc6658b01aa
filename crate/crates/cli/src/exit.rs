//! Stable process exit codes.

use std::fmt;

pub const CONFIG: u8 = 2;
pub const IO: u8 = 3;
pub const DIVERGENCE: u8 = 4;
pub const MISMATCH: u8 = 5;
pub const MISSING: u8 = 6;

/// An error tagged with the exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "exit {}: {:#}", self.code, self.error)
    }
}

pub fn code_for(e: &asf_core::Error) -> u8 {
    use asf_core::Error::*;
    match e {
        Spec(_) | Contract(_) => CONFIG,
        Io(_) | Format { .. } | Data(_) => IO,
        Divergence { .. } | NonFinite(_) | Numeric(_) => DIVERGENCE,
        Dimension { .. } => MISMATCH,
    }
}

impl From<asf_core::Error> for Failure {
    fn from(e: asf_core::Error) -> Self {
        Failure {
            code: code_for(&e),
            error: e.into(),
        }
    }
}

pub trait WithCode<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

pub fn fail(code: u8, msg: impl fmt::Display) -> Failure {
    Failure {
        code,
        error: anyhow::anyhow!("{msg}"),
    }
}
