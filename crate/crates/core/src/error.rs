use std::fmt;

/// Coarse error category, used by the command line to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Numerical,
    Io,
    Contract,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Numerical => "numerical",
            Category::Io => "io",
            Category::Contract => "contract",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    Dimension { expected: Vec<usize>, got: Vec<usize> },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("value {value} outside range [{lo}, {hi}]")]
    Range { value: f64, lo: f64, hi: f64 },

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("non-finite value at grid index {index}")]
    NonFinite { index: usize },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) => Category::Config,
            Error::Format { .. } | Error::Parse { .. } => Category::Data,
            Error::NonFinite { .. }
            | Error::Divergence { .. }
            | Error::DegenerateDensity(_)
            | Error::Range { .. } => Category::Numerical,
            Error::Io(_) => Category::Io,
            Error::Dimension { .. } | Error::Contract(_) => Category::Contract,
        }
    }

    pub(crate) fn dim(expected: &[usize], got: &[usize]) -> Self {
        Error::Dimension { expected: expected.to_vec(), got: got.to_vec() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
