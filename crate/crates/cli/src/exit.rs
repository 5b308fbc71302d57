//! Failure classes and their process exit codes.

use std::fmt;

use repe_core::Error as CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Usage,
    Config,
    MissingInput,
    Phase,
    Io,
    BackendUnavailable,
}

impl ExitClass {
    pub const TABLE: [(ExitClass, i32, &'static str); 6] = [
        (ExitClass::Usage, 2, "bad command line"),
        (ExitClass::Config, 3, "configuration invalid or out of range"),
        (ExitClass::MissingInput, 4, "a required input of the command is absent"),
        (ExitClass::Phase, 5, "a pipeline phase failed on its inputs"),
        (ExitClass::Io, 6, "reading or writing a file failed"),
        (ExitClass::BackendUnavailable, 7, "the backend cannot run this command"),
    ];

    pub fn code(self) -> i32 {
        Self::TABLE.iter().find(|(c, _, _)| *c == self).map(|t| t.1).expect("every class is tabled")
    }
}

/// An error carrying its exit class. Anything else reaching `main` is
/// classified by [`classify`].
#[derive(Debug)]
pub struct Failure {
    pub class: ExitClass,
    pub message: String,
}

impl Failure {
    pub fn new(class: ExitClass, message: impl Into<String>) -> Self {
        Failure {
            class,
            message: message.into(),
        }
    }

    pub fn usage(m: impl Into<String>) -> Self {
        Self::new(ExitClass::Usage, m)
    }

    pub fn config(m: impl Into<String>) -> Self {
        Self::new(ExitClass::Config, m)
    }

    pub fn missing(m: impl Into<String>) -> Self {
        Self::new(ExitClass::MissingInput, m)
    }

    pub fn unavailable(m: impl Into<String>) -> Self {
        Self::new(ExitClass::BackendUnavailable, m)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn core_class(e: &CoreError) -> ExitClass {
    match e {
        CoreError::HookUnavailable(_) => ExitClass::BackendUnavailable,
        CoreError::Config(_) => ExitClass::Config,
        CoreError::Io(_) => ExitClass::Io,
        _ => ExitClass::Phase,
    }
}

/// First classified error in the chain wins; unclassified errors are phase
/// failures.
pub fn classify(err: &anyhow::Error) -> ExitClass {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.class;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return core_class(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ExitClass::Io;
        }
    }
    ExitClass::Phase
}
