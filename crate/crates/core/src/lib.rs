//! Long-range pixel tracking performed in 3D.
//!
//! Query pixels are lifted to 3D through depth, every frame is encoded as a
//! triplane feature field, and 3D trajectories are refined iteratively by
//! a spatio-temporal transformer with an as-rigid-as-possible training
//! constraint. Includes a deterministic synthetic RGBD data generator and
//! the full evaluation metric suite.

pub mod autodiff;
pub mod geometry;

pub use geometry::{CameraIntrinsics, DepthBinning, DepthMap, Point3, PointSet3D};
