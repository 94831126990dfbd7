//! Monte Carlo laboratory for three-dimensional Brownian loop soups.
//!
//! Samples Brownian paths and loop soups, computes soup clusters under a
//! tolerance-`h` contact relation, and estimates generalized non-intersection
//! probabilities, their exponents, separation statistics and cut-box counts.

pub mod analysis;
pub mod cluster;
pub mod cutpoints;
pub mod error;
pub mod estimators;
pub mod geometry;
pub mod io;
pub mod path;
pub mod rng;
pub mod soup;
pub mod spatial;
pub mod stats;

pub use error::{Error, Result};
pub use geometry::{Aabb, Annulus, Ball, Cone, Cube, LocalScale, LogSphere, Point3};
pub use path::{SampledPath, StopReason, StoppedPath};
pub use rng::RngStream;
pub use soup::{BrownianLoop, LoopSoup, SoupConfig};
pub use spatial::polyline_min_distance;
