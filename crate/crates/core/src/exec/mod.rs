//! Futurized execution: single-assignment cells, the pooled task scheduler,
//! grain-size control, and dataflow-graph evaluation.

pub mod future;
pub mod grain;
pub mod graph;
pub mod scheduler;

pub use future::{when_all, FutureCell};
pub use grain::{calibrate_grain, split_by_grain, ExecPool, REDUCE_BLOCK};
pub use graph::{evaluate, evaluate_sequential, ExecutionTree, Node, NodeId, NodeKind, PrimitiveDef, Registry};
pub use scheduler::{Scheduler, SchedulerConfig, DEFAULT_GRAIN};
