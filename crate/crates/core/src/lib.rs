//! Pseudo-LiDAR curation for extrapolated sensor views.
//!
//! The crate covers the full path from recorded scans to supervision for
//! laterally shifted viewpoints:
//!
//! * [`geom`]: poses and spherical coordinates.
//! * [`sensor`]: frames, sensor intrinsics, range-map projection and
//!   rasterization.
//! * [`curation`]: multi-frame fusion, view transformation, occlusion
//!   curling and incidence-based intensity adjustment.
//! * [`dropout`]: region-of-interest dropout masks and opacity compensation.
//! * [`splat`]: a forward spherical Gaussian range-map renderer.
//! * [`metrics`]: depth error, Chamfer distance, intensity RMSE and ray-drop
//!   accuracy.
//! * [`cli`]: the `lidar-evs` command-line front end.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod curation;
pub mod dropout;
pub mod fixtures;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod sensor;
pub mod spatial;
pub mod splat;

pub use geom::{Point, Pose, SphericalPoint};
pub use sensor::{Cell, LidarFrame, RangeMap, SensorModel};
