//! Error kinds and their exit codes.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Bad configuration or data file.
    Input,
    /// Parameters the model rejects.
    Model,
    /// A fit that ran but did not converge.
    Fit,
    Io,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Input | Kind::Model => 2,
            Kind::Fit => 3,
            Kind::Io => 1,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Kind::Input => "input",
            Kind::Model => "model",
            Kind::Fit => "fit",
            Kind::Io => "io",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Input,
            message: message.into(),
        }
    }

    pub fn fit(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Fit,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Io,
            message: message.into(),
        }
    }
}

/// One line, `error[<kind>]: <message>`.
impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat: String = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error[{}]: {flat}", self.kind.tag())
    }
}

impl From<mate_optix::Error> for Failure {
    fn from(e: mate_optix::Error) -> Self {
        Self {
            kind: Kind::Model,
            message: e.to_string(),
        }
    }
}
