//! Reconstruction of smooth B-spline surfaces from noisy, unordered point
//! clouds.
//!
//! The crate is organised bottom-up:
//!
//! - [`spline`]: knot vectors, Cox-de Boor basis, surface evaluation and sampling.
//! - [`dataset`]: synthetic training corpus with zero-padded control grids.
//! - [`bsa`]: least-squares B-spline surface approximation baseline.
//! - [`model`]: k-NN graph network with dictionary refinement that predicts a
//!   padded control grid, and extraction of the variable-size grid from it.
//! - [`train`]: weighted loss, hand-derived gradients, Adam and the training loop.
//! - [`metrics`]: EMD, density-aware Chamfer, normal consistency.
//! - [`pipeline`]: file formats, reconstruction, OBJ export and evaluation reports.

// `!(x > y)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsa;
pub mod config;
pub mod dataset;
mod error;
pub mod geom;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod spline;
pub mod train;

pub use error::{Error, Result};
pub use geom::Point3;
pub use spline::{BSplineSurface, ControlGrid, KnotVector, PointCloud};
