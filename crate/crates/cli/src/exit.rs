use std::fmt;

use dpr_core::Error;

/// Failure classes with distinct process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    Config,
    Data,
    Numeric,
}

impl Failure {
    pub fn code(self) -> u8 {
        match self {
            Failure::Config => 2,
            Failure::Data => 3,
            Failure::Numeric => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Failure::Config => "configuration error",
            Failure::Data => "data error",
            Failure::Numeric => "numeric failure",
        })
    }
}

/// Attaches a failure class to errors; the outermost tag wins.
pub trait Tag<T> {
    fn tag(self, failure: Failure) -> anyhow::Result<T>;
}

impl<T, E> Tag<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn tag(self, failure: Failure) -> anyhow::Result<T> {
        self.map_err(|e| e.into().context(failure))
    }
}

/// Exit code for an error: its tag if any, otherwise inferred from the core
/// error kind. Untagged errors of unknown origin count as data errors.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failure>() {
        return f.code();
    }
    let failure = match err.downcast_ref::<Error>() {
        Some(Error::NonFinite(_)) => Failure::Numeric,
        Some(Error::Contract(_)) => Failure::Config,
        _ => Failure::Data,
    };
    failure.code()
}
