use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint parse error: {0}")]
    Parse(#[from] ParseError),

    #[error("structural error in layer {layer}{}: {detail}", group.map(|g| format!(", group {g}")).unwrap_or_default())]
    Structure {
        layer: usize,
        group: Option<usize>,
        detail: String,
    },

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("{phase} phase failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn structure(layer: usize, group: Option<usize>, detail: impl Into<String>) -> Self {
        Error::Structure {
            layer,
            group,
            detail: detail.into(),
        }
    }

    /// Wraps an error with the pipeline phase it came from.
    pub fn in_phase(self, phase: &'static str) -> Self {
        match self {
            Error::Phase { .. } => self,
            other => Error::Phase {
                phase,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, looking through phase tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Phase { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::Capacity(_) => 2,
            Error::Data(_) | Error::Parse(_) => 3,
            Error::Divergence(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic: expected {:?}, found {:?}", String::from_utf8_lossy(expected), String::from_utf8_lossy(found))]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload while reading {context}")]
    Truncated { context: String },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
