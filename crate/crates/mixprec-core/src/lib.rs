//! Mixed-precision bit-width planning for iterative denoising networks.
//!
//! The crate measures how strongly the layers of a denoiser depend on each
//! other across denoising timesteps (per-timestep orthogonality matrices),
//! collapses those measurements into one importance coefficient per layer,
//! and solves a budgeted bit-allocation problem so that the layers other
//! layers cannot substitute for keep more precision.
//!
//! Modules, roughly in pipeline order:
//!
//! * [`trace`]: activation-trace container plus a fixed on-disk format.
//! * [`orm`]: the orthogonality metric, per timestep, over a trace.
//! * [`aggregation`]: timestep aggregation into per-layer scores.
//! * [`allocator`]: budgeted bit-width assignment (exact and greedy).
//! * [`quantizer`]: fake quantization used to score an assignment.
//! * [`diffusion`]: a small instrumented denoiser that generates traces.
//! * [`pipeline`]: end-to-end commands shared by the CLI and the tests.
//!
//! Heavy loops are data-parallel via rayon when the `parallel` feature
//! (default) is on; results are bit-identical to the sequential fallback
//! because every floating-point reduction runs in a fixed order regardless
//! of how work is scheduled.

pub mod aggregation;
pub mod allocator;
pub mod diffusion;
pub mod orm;
pub mod pipeline;
pub mod quantizer;
pub mod report;
pub mod trace;

mod exec;

pub use exec::Execution;
