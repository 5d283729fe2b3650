use std::fmt::Display;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const CHECK: u8 = 3;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn usage(msg: impl Display) -> Self {
        CliError { code: USAGE, source: anyhow::anyhow!("{msg}") }
    }

    pub fn data(msg: impl Display) -> Self {
        CliError { code: DATA, source: anyhow::anyhow!("{msg}") }
    }

    pub fn check(msg: impl Display) -> Self {
        CliError { code: CHECK, source: anyhow::anyhow!("{msg}") }
    }

    pub fn context(mut self, ctx: impl Display + Send + Sync + 'static) -> Self {
        self.source = self.source.context(ctx);
        self
    }
}

impl From<pdc_refine::Error> for CliError {
    fn from(e: pdc_refine::Error) -> Self {
        let code = if matches!(e, pdc_refine::Error::Config(_)) { USAGE } else { DATA };
        CliError { code, source: e.into() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { code: DATA, source: e.into() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError { code: DATA, source: e.into() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches a context message to any error convertible to [`CliError`].
pub trait Context<T> {
    fn ctx(self, msg: impl Display + Send + Sync + 'static) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn ctx(self, msg: impl Display + Send + Sync + 'static) -> CliResult<T> {
        self.map_err(|e| e.into().context(msg))
    }
}
