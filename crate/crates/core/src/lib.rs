//! A miniature distributed array-processing runtime: scripts compile to a
//! futurized dataflow execution tree executed SPMD across localities over
//! tiled distributed arrays, with asynchronous collectives, message
//! coalescing, deep-learning kernels, and replay/replicate fault tolerance.
//!
//! Subsystems:
//! - [`lang`]: lexer, s-expression parser, AST-to-dataflow compiler.
//! - [`exec`]: single-assignment future cells, the pooled task scheduler,
//!   grain-size control, and graph evaluation.
//! - [`comm`]: active-message transports (in-process and TCP), message
//!   coalescing, and rank-order-deterministic collectives.
//! - [`dist`]: tiled distributed arrays with overlapped tiling, halo
//!   exchange, and global gather.
//! - [`dl`]: the DNN operator set, training stages, data/spatial
//!   parallelism, and the pipeline-schedule simulator.
//! - [`resilience`]: replay/replicate execution with checksum, consensus,
//!   and validate comparators.
//! - [`runtime`]: the per-locality environment, builtin registry, and SPMD
//!   job harnesses.

pub mod comm;
pub mod counters;
pub mod dist;
pub mod dl;
pub mod error;
pub mod exec;
pub mod lang;
pub mod resilience;
pub mod runtime;
pub mod value;

pub use error::{Result, RuntimeError};
pub use value::{DenseTensor, Shape, Value};
