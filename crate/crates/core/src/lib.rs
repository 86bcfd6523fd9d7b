//! Joint point cloud denoising and normal filtering.
//!
//! A patch network reads a noisy neighborhood together with its raw normals,
//! picks the points most likely to share the center's tangent plane, and
//! regresses both a displacement for the center and a filtered normal. The
//! crate also covers synthetic training data, the three-term training
//! objective, iterative inference and the evaluation metrics.
//!
//! ```no_run
//! use pcdnf::dataset::{add_gaussian_noise, generate_shape, ShapeKind, ShapeSpec};
//! use pcdnf::inference::denoise_cloud;
//! use pcdnf::network::{NetConfig, NetworkParams};
//!
//! let clean = generate_shape(&ShapeSpec::new(ShapeKind::Cube, 2000, 1)).unwrap();
//! let sample = add_gaussian_noise(&clean, 0.01, 2).unwrap();
//! let cfg = NetConfig::default();
//! let params = NetworkParams::init(&cfg, 0);
//! let outputs = denoise_cloud(&sample.noisy, &params, &cfg, 1, 0).unwrap();
//! assert_eq!(outputs[0].len(), 2000);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{PointCloud, Vec3};
