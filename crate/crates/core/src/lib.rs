//! Plane instance parsing for explicit 3D Gaussian fields.
//!
//! The crate is organized as a pipeline:
//!
//! * [`field`] holds the Gaussian primitive, camera and scene types plus PLY / JSON I/O.
//! * [`synth`] generates planar test scenes with ground-truth plane ids and
//!   over-segmented per-view masks.
//! * [`renderer`] is a CPU splatting renderer producing color, normal, depth and
//!   descriptor maps together with the per-pixel blend weights.
//! * [`segfusion`] merges raw 2D segments into plane-consistent labels with a
//!   region adjacency graph.
//! * [`learn`] fits the per-view closed-form regression, takes gradient steps on
//!   descriptors and normals and runs the recurrent mean-shift.
//! * [`geometry`] provides exact KNN, local planar alignment and Laplacian smoothing.
//! * [`gmt`] builds the Gaussian mixture tree whose root children are plane instances.
//! * [`metrics`] scores partitions (RI, VOI, SC) and geometry (accuracy / completeness).
//! * [`pipeline`] wires everything together behind a strict JSON config.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the `parallel`
//! feature is enabled and plain iterators otherwise. Every parallel stage collects
//! results in index order, so outputs do not depend on the thread count.

pub mod error;
pub mod field;
pub mod geometry;
pub mod gmt;
pub mod imageio;
pub mod learn;
pub mod linalg;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod renderer;
pub mod segfusion;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
pub use field::{CameraView, GaussianPrimitive, GtPlane, Scene};
