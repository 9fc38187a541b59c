//! Runtime fault descriptors.
//!
//! Every failure that can surface through a [`crate::exec::FutureCell`] is a
//! `RuntimeError`. The enum is `Clone` because a single fault propagates to
//! every task that depends on the failed cell.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RuntimeError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("type error: {0}")]
    Type(String),

    #[error("tiling error: axis length {axis_len} is smaller than {localities} localities")]
    Tiling { axis_len: usize, localities: usize },

    #[error("unknown locality {rank} (world size {world})")]
    UnknownLocality { rank: usize, world: usize },

    #[error("generation mismatch on `{array}`: local {local}, peer {peer}")]
    GenerationMismatch { array: String, local: u64, peer: u64 },

    #[error("insufficient overlap: need {required}, tile has {found}")]
    InsufficientOverlap { required: usize, found: usize },

    #[error("label {label} out of range [0, {classes})")]
    LabelOutOfRange { label: i64, classes: usize },

    #[error("collective tag {0:#x} already active")]
    TagCollision(u64),

    #[error("transport down: {0}")]
    TransportDown(String),

    #[error("payload of {0} bytes exceeds the wire limit")]
    PayloadTooLarge(usize),

    #[error("broadcast: non-root locality {0} supplied a value")]
    MultipleRoots(usize),

    #[error("broadcast: root locality {0} supplied no value")]
    NoRoot(usize),

    #[error("scheduler is shut down")]
    SchedulerShutdown,

    #[error("resilience exhausted after {attempts} attempt(s)")]
    ResilienceExhausted { attempts: usize },

    #[error("replica divergence: parameter checksums disagree across localities")]
    ReplicaDivergence,

    #[error("arity: `{name}` takes {expected} argument(s), got {found}")]
    Arity { name: String, expected: String, found: usize },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("node {node} (`{name}`): {inner}")]
    AtNode { node: usize, name: String, inner: Box<RuntimeError> },
}

impl RuntimeError {
    /// Attach the originating execution-tree node, unless one is already set.
    pub fn at_node(self, node: usize, name: &str) -> RuntimeError {
        match self {
            RuntimeError::AtNode { .. } => self,
            other => RuntimeError::AtNode { node, name: name.to_string(), inner: Box::new(other) },
        }
    }

    /// The innermost fault, with node wrappers stripped.
    pub fn root_cause(&self) -> &RuntimeError {
        match self {
            RuntimeError::AtNode { inner, .. } => inner.root_cause(),
            other => other,
        }
    }
}

impl From<std::io::Error> for RuntimeError {
    fn from(e: std::io::Error) -> Self {
        RuntimeError::Io(e.to_string())
    }
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;
