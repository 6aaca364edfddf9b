use std::fmt;
use std::io;

/// Unified error type for the whole framework.
///
/// Variants are deliberately specific so callers (and tests) can tell apart
/// failure modes that look similar at a glance, e.g. reading an unknown
/// variable vs. reading a known variable at an unwritten timestep.
#[derive(Debug)]
pub enum Error {
    // -- tensor / autodiff --
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    IndexOutOfRange {
        op: &'static str,
        index: i64,
        bound: usize,
    },
    NonScalarLoss {
        shape: Vec<usize>,
    },
    /// The loss tensor has no live node on the active tape (either it was
    /// computed with gradients disabled, detached, or the tape was already
    /// consumed by a previous backward pass).
    DetachedLoss,
    MissingGrad {
        param: String,
    },

    // -- workspace --
    UnknownVariable {
        name: String,
    },
    UnwrittenTimestep {
        name: String,
        t: usize,
    },
    BatchSizeMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    ItemShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// A variable has an unwritten timestep strictly before its last written
    /// one, so it cannot be stacked into a dense [T, B, ...] tensor.
    TimeGap {
        name: String,
        t: usize,
    },
    WindowOutOfRange {
        t0: usize,
        t1: usize,
        extent: usize,
    },
    BatchIndexOutOfRange {
        index: usize,
        batch_size: usize,
    },
    EmptyWorkspace,

    // -- serialization --
    BadMagic {
        got: [u8; 4],
    },
    UnsupportedVersion {
        got: u16,
    },
    TruncatedPayload,
    ChecksumMismatch,
    Format(String),
    Io(io::Error),

    // -- agents --
    EmptyContainer,
    MissingKwarg {
        key: String,
    },
    KwargType {
        key: String,
        expected: &'static str,
    },
    /// A temporal container was executed with neither `n_steps` nor
    /// `stop_variable` set.
    UnboundedTemporal,

    // -- environments / data --
    MissingAction {
        t: usize,
    },
    ActionOutOfRange {
        action: i64,
        n_actions: usize,
    },
    UnknownEnv {
        name: String,
    },
    EmptyDataset,
    BatchExceedsDataset {
        batch: usize,
        len: usize,
    },

    // -- parallel execution --
    ProbeWroteNothing,
    TimeCapacityExceeded {
        t: usize,
        t_max: usize,
    },
    AlreadyRunning,
    RunInProgress,
    WorkerFailed {
        worker: usize,
        message: String,
    },
    WorkspaceMismatch,
    /// At snapshot time some batch rows of a variable were written at a
    /// timestep while others were not.
    PartialTimestep {
        name: String,
        t: usize,
    },
    Protocol(String),

    // -- replay buffer --
    TrajectoryTooShort {
        extent: usize,
        window: usize,
    },
    VariableSetMismatch,
    EmptyBuffer,

    // -- training / config --
    InvalidConfig(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range for size {bound}")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::DetachedLoss => {
                write!(f, "backward on a detached loss (no live tape node)")
            }
            Error::MissingGrad { param } => {
                write!(f, "parameter '{param}' has no gradient")
            }
            Error::UnknownVariable { name } => write!(f, "unknown variable '{name}'"),
            Error::UnwrittenTimestep { name, t } => {
                write!(f, "variable '{name}' was never written at t={t}")
            }
            Error::BatchSizeMismatch {
                name,
                expected,
                got,
            } => write!(
                f,
                "variable '{name}': batch size {got} does not match workspace batch size {expected}"
            ),
            Error::ItemShapeMismatch {
                name,
                expected,
                got,
            } => write!(
                f,
                "variable '{name}': item shape {got:?} does not match earlier shape {expected:?}"
            ),
            Error::TimeGap { name, t } => {
                write!(f, "variable '{name}' has an unwritten gap at t={t}")
            }
            Error::WindowOutOfRange { t0, t1, extent } => {
                write!(f, "window [{t0},{t1}) out of range for time extent {extent}")
            }
            Error::BatchIndexOutOfRange { index, batch_size } => {
                write!(f, "batch index {index} out of range for batch size {batch_size}")
            }
            Error::EmptyWorkspace => write!(f, "workspace contains no variables"),
            Error::BadMagic { got } => write!(f, "bad magic bytes {got:?}"),
            Error::UnsupportedVersion { got } => write!(f, "unsupported format version {got}"),
            Error::TruncatedPayload => write!(f, "truncated payload"),
            Error::ChecksumMismatch => write!(f, "payload checksum mismatch"),
            Error::Format(msg) => write!(f, "malformed file: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::EmptyContainer => write!(f, "container requires at least one agent"),
            Error::MissingKwarg { key } => write!(f, "missing required kwarg '{key}'"),
            Error::KwargType { key, expected } => {
                write!(f, "kwarg '{key}' has the wrong type, expected {expected}")
            }
            Error::UnboundedTemporal => {
                write!(f, "temporal execution needs n_steps and/or stop_variable")
            }
            Error::MissingAction { t } => {
                write!(f, "no 'action' written at t={t} for the environment to consume")
            }
            Error::ActionOutOfRange { action, n_actions } => {
                write!(f, "action {action} outside the action space of size {n_actions}")
            }
            Error::UnknownEnv { name } => write!(f, "unknown environment '{name}'"),
            Error::EmptyDataset => write!(f, "dataset is empty"),
            Error::BatchExceedsDataset { batch, len } => {
                write!(f, "batch size {batch} exceeds dataset size {len} with wrapping disabled")
            }
            Error::ProbeWroteNothing => {
                write!(f, "probe run wrote no variables; cannot size the shared workspace")
            }
            Error::TimeCapacityExceeded { t, t_max } => {
                write!(f, "write at t={t} exceeds shared workspace capacity T_max={t_max}")
            }
            Error::AlreadyRunning => write!(f, "a remote run is already in progress"),
            Error::RunInProgress => {
                write!(f, "operation requires no remote run in progress")
            }
            Error::WorkerFailed { worker, message } => {
                write!(f, "worker {worker} failed: {message}")
            }
            Error::WorkspaceMismatch => {
                write!(f, "shared workspace does not belong to this remote agent")
            }
            Error::PartialTimestep { name, t } => {
                write!(f, "variable '{name}' is only partially written at t={t}")
            }
            Error::Protocol(msg) => write!(f, "control protocol error: {msg}"),
            Error::TrajectoryTooShort { extent, window } => {
                write!(f, "time extent {extent} is shorter than the window length {window}")
            }
            Error::VariableSetMismatch => {
                write!(f, "variable set does not match the buffer's existing contents")
            }
            Error::EmptyBuffer => write!(f, "replay buffer is empty"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
