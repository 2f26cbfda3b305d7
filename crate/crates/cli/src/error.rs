use std::path::PathBuf;

use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{file}{}: {message}", location(*.line, *.column))]
    Config { file: String, message: String, line: Option<usize>, column: Option<usize> },

    #[error("{path}: {message}", path = .path.display())]
    Io { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] fimspec::error::Error),
}

fn location(line: Option<usize>, column: Option<usize>) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!(":{l}:{c}"),
        (Some(l), None) => format!(":{l}"),
        _ => String::new(),
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        CliError::Io { path: path.into(), message: err.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(_) => 1,
        }
    }

    /// Machine-readable form written to stderr on failure.
    pub fn to_json(&self) -> Value {
        let mut v = match self {
            CliError::Config { file, line, column, .. } => {
                json!({ "error": "config", "file": file, "line": line, "column": column })
            }
            CliError::Io { path, .. } => json!({ "error": "io", "path": path.display().to_string() }),
            CliError::Usage(_) => json!({ "error": "usage" }),
            CliError::Core(e) => {
                let mut v = json!({ "error": e.kind() });
                if let fimspec::error::Error::Divergence { step, loss } = e {
                    v["step"] = json!(step);
                    v["loss"] = json!(if loss.is_finite() { json!(loss) } else { json!(loss.to_string()) });
                }
                v
            }
        };
        v["message"] = json!(self.to_string());
        v
    }
}
