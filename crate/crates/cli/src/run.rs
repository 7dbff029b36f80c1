use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use asd_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(Error::NonFinite(_) | Error::Degenerate(_)) => EXIT_RUNTIME,
            CliError::Core(Error::Io { source, .. }) if source.kind() != std::io::ErrorKind::NotFound => EXIT_RUNTIME,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

/// Provenance record written next to every command's output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub outputs: Vec<PathBuf>,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, config_hash: String, corpus: Option<&Path>, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            config_hash,
            corpus: corpus.map(Path::to_path_buf),
            seed,
            started_unix_s: now(),
            finished_unix_s: 0.0,
            outputs: Vec::new(),
        }
    }

    /// Writes `run_manifest.json` inside `out` when it is a directory, else
    /// `<out>.run.json` beside it.
    pub fn finish(mut self, out: &Path) -> Result<(), CliError> {
        self.finished_unix_s = now();
        let path = if out.is_dir() {
            out.join("run_manifest.json")
        } else {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".run.json");
            out.with_file_name(name)
        };
        write_json(&path, &self)
    }
}

/// Reads a JSON config, or the default when no path is given.
pub fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C, CliError> {
    path.map(read_json).transpose().map(Option::unwrap_or_default)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Parse {
            path: path.into(),
            source: e,
        }
        .into()
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.into(),
        source,
    })
}
