use std::fmt;

/// Coarse error class reported by the CLI and the C ABI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Numeric,
    Io,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Usage => "usage",
            Category::Numeric => "numeric",
            Category::Io => "io",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Usage(_) => Category::Usage,
            Error::Numeric(_) => Category::Numeric,
            Error::Io(_) | Error::Format(_) => Category::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Fails with a numeric error if any entry is NaN or infinite.
pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(what.to_string()))
    }
}
