//! Zero-delay reconstruction of smooth spline signals from streamed interval data.
//!
//! An interval stream is a sequence of timestamped slabs `[y - eps, y + eps]`.
//! The reconstructor emits one polynomial section per arriving interval, with
//! no lookahead: each section is committed the moment its right endpoint
//! arrives, matches the previous section up to a configured derivative order,
//! and passes through the new interval. Three online policies choose the free
//! coefficients (a myopic minimum-curvature rule, a parametrized cost-to-go
//! rule, and a recurrent-network rule); a batch quadratic program provides the
//! anytime lower bound the online policies are measured against.
//!
//! Module map:
//! - [`core`]: domain types (intervals, configs, actions, splines).
//! - [`linalg`]: small dense matrix kernels (Cholesky, LU, QR, Jacobi).
//! - [`splinalg`]: polynomial section algebra (bases, continuity, curvature).
//! - [`policy`]: per-step quadratic costs and the closed-form slab projection.
//! - [`rti`]: the streaming reconstructor and its state machine.
//! - [`autodiff`]: reverse-mode tape used to differentiate unrolled episodes.
//! - [`batchref`]: dense QP solver and the batch minimum-curvature baseline.
//! - [`datagen`]: synthetic interval sources and dataset plumbing.
//! - [`train`]: Adam training of policy parameters over episode losses.

pub mod autodiff;
pub mod batchref;
pub mod core;
pub mod datagen;
pub mod linalg;
pub mod policy;
pub mod rti;
pub mod splinalg;
pub mod train;

/// Version of this library, for provenance records.
pub fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}
