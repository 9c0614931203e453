use std::fmt;

/// Exit status classes: 1 usage, 2 data, 3 runtime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        Self { kind: Kind::Usage, message: m.into() }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self { kind: Kind::Data, message: m.into() }
    }

    pub fn runtime(m: impl Into<String>) -> Self {
        Self { kind: Kind::Runtime, message: m.into() }
    }

    pub fn code(&self) -> i32 {
        match self.kind {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Runtime => 3,
        }
    }

    /// `error: <kind>: <message>` on one line.
    pub fn line(&self) -> String {
        let kind = match self.kind {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Runtime => "runtime",
        };
        let msg: String = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error: {kind}: {msg}")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<rsat::Error> for CliError {
    fn from(e: rsat::Error) -> Self {
        let kind = match &e {
            rsat::Error::InvalidConfig(_) => Kind::Usage,
            rsat::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Kind::Data,
            e if e.is_data_error() => Kind::Data,
            _ => Kind::Runtime,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::runtime(e.to_string())
    }
}
