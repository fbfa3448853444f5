//! Error classes and their exit codes.

use pointunet::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Other,
    Config,
    Data,
    Model,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Other => 1,
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Model => 4,
        }
    }

    /// Default class of a library error that was not tagged at the call site.
    fn of(e: &Error) -> Kind {
        match e {
            Error::Config(_) => Kind::Config,
            Error::Format { .. } | Error::Io(_) | Error::ForegroundOverflow { .. } => Kind::Data,
            Error::Diverged { .. } | Error::NonFinite { .. } | Error::MissingGrad(_) => Kind::Model,
            Error::Shape { .. } | Error::InvalidArgument(_) | Error::Backward(_) => Kind::Other,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: anyhow::Error) -> Self {
        Failure { kind, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(Kind::of(&e), e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(Kind::Other, e.into())
    }
}

/// Attaches an explicit class to an error.
pub trait Tag<T> {
    fn tag(self, kind: Kind) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn tag(self, kind: Kind) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(kind, e.into()))
    }
}
