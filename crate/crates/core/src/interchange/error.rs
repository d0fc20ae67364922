use std::fmt;

/// What went wrong with a dump record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DumpErrorKind {
    /// The underlying stream could not be read.
    Io(String),
    /// The record is not well-formed: bad JSON, wrong type, missing key.
    Syntax { path: String, message: String },
    /// The record is well-formed but breaks a type invariant.
    Invariant { path: String, message: String },
    DuplicateImageId(String),
    MissingHeader,
    UnsupportedVersion(String),
}

impl DumpErrorKind {
    /// Syntax-level failures, as opposed to invariant violations.
    pub fn is_syntax(&self) -> bool {
        matches!(
            self,
            DumpErrorKind::Syntax { .. } | DumpErrorKind::MissingHeader | DumpErrorKind::UnsupportedVersion(_)
        )
    }
}

impl fmt::Display for DumpErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DumpErrorKind::Io(e) => write!(f, "read failure: {e}"),
            DumpErrorKind::Syntax { path, message } if path.is_empty() => f.write_str(message),
            DumpErrorKind::Syntax { path, message } => write!(f, "{message} at {path}"),
            DumpErrorKind::Invariant { path, message } if path.is_empty() => f.write_str(message),
            DumpErrorKind::Invariant { path, message } => write!(f, "{message} at {path}"),
            DumpErrorKind::DuplicateImageId(id) => write!(f, "duplicate image_id \"{id}\""),
            DumpErrorKind::MissingHeader => f.write_str("missing header record"),
            DumpErrorKind::UnsupportedVersion(v) => write!(f, "unsupported format_version \"{v}\""),
        }
    }
}

/// A dump error tied to its 1-based line number (0 when no line applies).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpError {
    pub line: usize,
    pub kind: DumpErrorKind,
}

impl DumpError {
    pub(crate) fn new(line: usize, kind: DumpErrorKind) -> Self {
        Self { line, kind }
    }

    pub(crate) fn invariant(line: usize, path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(
            line,
            DumpErrorKind::Invariant {
                path: path.into(),
                message: message.into(),
            },
        )
    }
}

impl fmt::Display for DumpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.kind)
        } else {
            write!(f, "line {}: {}", self.line, self.kind)
        }
    }
}

impl std::error::Error for DumpError {}
