use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or layer shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation needed state (a forward cache, running statistics) that is absent.
    #[error("state error: {0}")]
    State(String),

    /// Invalid hyperparameters or arguments.
    #[error("config error: {0}")]
    Config(String),

    /// A non-finite value showed up where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    /// A gradient or equivalence check could not be carried out.
    #[error("check error: {0}")]
    Check(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Prefix the message with where the error happened, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Shape(m) => Error::Shape(format!("{ctx}: {m}")),
            Error::State(m) => Error::State(format!("{ctx}: {m}")),
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Format(m) => Error::Format(format!("{ctx}: {m}")),
            Error::Check(m) => Error::Check(format!("{ctx}: {m}")),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{ctx}: {e}"))),
        }
    }
}
