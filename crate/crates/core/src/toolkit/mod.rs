//! File formats and the commands that chain the pipeline stages together.
//!
//! Every command reads and writes documented files only, so any stage can be
//! rerun or replaced in isolation.

pub mod commands;
pub mod documents;
pub mod image;
pub mod model;

use std::path::Path;

use thiserror::Error;

use crate::convnet::NetError;
use crate::detector::DetectError;
use crate::forest::ForestError;
use crate::geo::GeoError;
use crate::netmap::MapError;
use crate::ridefilter::RideError;

/// Version written into every document and model header.
pub const FORMAT_VERSION: u32 = 1;

/// Environment variable capping the worker threads of `detect`.
pub const THREADS_ENV: &str = "FOREST2FCN_THREADS";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("no such file: {path}")]
    MissingFile { path: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: format version {found} is not supported (expected {expected})")]
    VersionMismatch { path: String, found: u64, expected: u32 },
    #[error("{path}: payload checksum failed ({detail})")]
    Checksum { path: String, detail: String },
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Dimension(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("{0}")]
    Verification(String),
}

impl ToolError {
    /// Stable identifier printed in front of the message.
    pub fn kind(&self) -> &'static str {
        match self {
            ToolError::MissingFile { .. } => "missing_file",
            ToolError::Io { .. } => "io_error",
            ToolError::Format { .. } => "format_error",
            ToolError::VersionMismatch { .. } => "version_mismatch",
            ToolError::Checksum { .. } => "checksum_error",
            ToolError::Config { .. } => "config_error",
            ToolError::Dimension(_) => "dimension_mismatch",
            ToolError::InvalidInput(_) => "invalid_input",
            ToolError::Verification(_) => "verification_failed",
        }
    }

    /// `error[kind]: message` on a single line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.kind(), msg)
    }

    pub(crate) fn format(path: &Path, message: impl std::fmt::Display) -> Self {
        ToolError::Format {
            path: path.display().to_string(),
            message: message.to_string(),
        }
    }

    pub(crate) fn config(path: &Path, message: impl std::fmt::Display) -> Self {
        ToolError::Config {
            path: path.display().to_string(),
            message: message.to_string(),
        }
    }
}

impl From<NetError> for ToolError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::ShapeMismatch { .. } | NetError::DimensionMismatch(_) => ToolError::Dimension(e.to_string()),
            _ => ToolError::InvalidInput(e.to_string()),
        }
    }
}

impl From<ForestError> for ToolError {
    fn from(e: ForestError) -> Self {
        match e {
            ForestError::DimensionMismatch { .. } | ForestError::InconsistentDim { .. } => {
                ToolError::Dimension(e.to_string())
            }
            _ => ToolError::InvalidInput(e.to_string()),
        }
    }
}

impl From<MapError> for ToolError {
    fn from(e: MapError) -> Self {
        match e {
            MapError::DimensionMismatch { .. } => ToolError::Dimension(e.to_string()),
            MapError::InvalidConstants { .. } => ToolError::InvalidInput(e.to_string()),
        }
    }
}

impl From<DetectError> for ToolError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::Net(n) => n.into(),
            DetectError::InvalidConfig(m) => ToolError::Config {
                path: "<config>".into(),
                message: m,
            },
            other => ToolError::Dimension(other.to_string()),
        }
    }
}

impl From<GeoError> for ToolError {
    fn from(e: GeoError) -> Self {
        ToolError::InvalidInput(e.to_string())
    }
}

impl From<RideError> for ToolError {
    fn from(e: RideError) -> Self {
        ToolError::InvalidInput(e.to_string())
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, ToolError> {
    std::fs::read(path).map_err(|e| io_error(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String, ToolError> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|_| ToolError::format(path, "not valid UTF-8"))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), ToolError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

pub(crate) fn io_error(path: &Path, e: std::io::Error) -> ToolError {
    if e.kind() == std::io::ErrorKind::NotFound {
        ToolError::MissingFile {
            path: path.display().to_string(),
        }
    } else {
        ToolError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

/// Parses a JSON document and checks its `format_version` first, so a newer
/// file fails with a version error rather than a field error.
pub(crate) fn parse_versioned_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, ToolError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ToolError::format(path, e))?;
    check_version(path, value.get("format_version").and_then(|v| v.as_u64()))?;
    serde_json::from_value(value).map_err(|e| ToolError::format(path, e))
}

pub(crate) fn check_version(path: &Path, found: Option<u64>) -> Result<(), ToolError> {
    match found {
        Some(v) if v == FORMAT_VERSION as u64 => Ok(()),
        Some(v) => Err(ToolError::VersionMismatch {
            path: path.display().to_string(),
            found: v,
            expected: FORMAT_VERSION,
        }),
        None => Err(ToolError::format(path, "missing format_version")),
    }
}
