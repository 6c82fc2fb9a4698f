use std::fmt;
use std::path::{Path, PathBuf};

use mpatch_core::pipeline::ExperimentConfig;
use serde::Serialize;

pub const BUILD_ID: &str = env!("MPATCH_BUILD_ID");

/// Exit codes. Clap's own usage errors (unknown subcommand, bad flag) also
/// exit with `USAGE`.
pub mod exit {
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const STAGE_ORDER: i32 = 4;
    pub const IO: i32 = 5;
    pub const FORMAT: i32 = 6;
    pub const INCOMPATIBLE: i32 = 7;
    pub const NUMERIC: i32 = 8;
}

#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub code: i32,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { kind: "config".into(), message: message.into(), code: exit::CONFIG }
    }

    pub fn stage(message: impl Into<String>) -> Self {
        CliError { kind: "stage_order".into(), message: message.into(), code: exit::STAGE_ORDER }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError { kind: "usage".into(), message: message.into(), code: exit::USAGE }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind, "message": self.message, "exit_code": self.code } }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<mpatch_core::Error> for CliError {
    fn from(e: mpatch_core::Error) -> Self {
        use mpatch_core::Error as E;
        let code = match &e {
            E::InvalidArgument(_) | E::Json(_) => exit::CONFIG,
            E::StageOrder(_) => exit::STAGE_ORDER,
            E::Io { .. } => exit::IO,
            E::BadMagic { .. } | E::Version { .. } | E::Truncated { .. } | E::Overlap { .. } | E::Header(_) => {
                exit::FORMAT
            }
            E::Incompatible(_) | E::Architecture { .. } | E::Shape { .. } => exit::INCOMPATIBLE,
            E::NonFinite(_) | E::Degenerate(_) => exit::NUMERIC,
        };
        CliError { kind: e.kind().to_string(), message: e.to_string(), code }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::config(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Resolves paths against the output directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub out: PathBuf,
}

impl Workspace {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn ensure_parent(&self, p: &Path) -> CliResult<PathBuf> {
        let full = self.path(p);
        if let Some(dir) = full.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        }
        Ok(full)
    }

    pub fn write(&self, rel: &Path, bytes: &[u8]) -> CliResult<()> {
        let full = self.ensure_parent(rel)?;
        std::fs::write(&full, bytes).map_err(|e| io_error(&full, e))
    }
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError { kind: "io".into(), message: format!("{}: {e}", path.display()), code: exit::IO }
}

/// Every report carries the command, build id, resolved config and the
/// command's own arguments.
#[derive(Serialize)]
pub struct Report<'a, A: Serialize, T: Serialize> {
    pub command: &'a str,
    pub build: &'a str,
    pub config: &'a ExperimentConfig,
    pub args: &'a A,
    pub artifacts: Vec<String>,
    pub result: T,
}

pub fn rel(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}
