use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A DICOM attribute tag, printed as `(gggg,eeee)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tag(pub u16, pub u16);

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.0, self.1)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("missing required DICOM attribute {tag} in {file}")]
    MissingTag { tag: Tag, file: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid transfer function: {0}")]
    InvalidTransferFunction(String),

    #[error("preset parse error on line {line}: {msg}")]
    PresetParse { line: usize, msg: String },

    #[error("scene parse error at `{path}`{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    SceneParse {
        path: String,
        line: Option<usize>,
        msg: String,
    },

    #[error("light has no energy to sample")]
    NoEnergy,

    #[error("no completed render pass yet")]
    NotReady,

    #[error("image codec error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn scene(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::SceneParse {
            path: path.into(),
            line: None,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad input files rather than by rendering.
    pub fn is_ingest(&self) -> bool {
        matches!(
            self,
            Error::Ingest(_)
                | Error::MissingTag { .. }
                | Error::UnsupportedFormat(_)
                | Error::InvalidTransferFunction(_)
                | Error::PresetParse { .. }
                | Error::SceneParse { .. }
                | Error::Image(_)
                | Error::Io(_)
        )
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
