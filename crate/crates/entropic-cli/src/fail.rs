//! Process-level failure classification.
//!
//! Every command funnels errors into [`Fail`], which carries the exit code:
//! 2 for configuration problems, 3 for numerical failures (an invariant
//! violated beyond tolerance, or a computation that cannot proceed), 4 when
//! an iteration refuses to converge.

use std::fmt;

#[derive(Debug)]
pub enum Fail {
    Config(String),
    Numerical(String),
    NonConvergence(String),
}

pub type Result<T> = std::result::Result<T, Fail>;

impl Fail {
    pub fn config(msg: impl Into<String>) -> Fail {
        Fail::Config(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Fail {
        Fail::Numerical(msg.into())
    }

    pub fn code(&self) -> u8 {
        match self {
            Fail::Config(_) => 2,
            Fail::Numerical(_) => 3,
            Fail::NonConvergence(_) => 4,
        }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fail::Config(m) => write!(f, "configuration error: {m}"),
            Fail::Numerical(m) => write!(f, "numerical failure: {m}"),
            Fail::NonConvergence(m) => write!(f, "did not converge: {m}"),
        }
    }
}

impl From<entropic::Error> for Fail {
    fn from(e: entropic::Error) -> Fail {
        match e {
            entropic::Error::NoConvergence { .. } | entropic::Error::BracketFailure => {
                Fail::NonConvergence(e.to_string())
            }
            _ => Fail::Numerical(e.to_string()),
        }
    }
}

/// Re-keys a library error as a configuration problem; used when the error
/// can only stem from the input data, not from the computation.
pub fn as_config(e: entropic::Error) -> Fail {
    Fail::Config(e.to_string())
}
