//! Multi-dataset LiDAR 3D object detection at desk scale.
//!
//! The pipeline harmonizes point clouds from several datasets (range
//! cropping and origin shifts), encodes them into bird's-eye-view feature
//! maps with a shared pillar backbone, normalizes features with
//! dataset-specific statistics, fuses the per-dataset maps through a
//! coupling/recoupling module and decodes boxes with one head per dataset.
//!
//! Modules, bottom-up:
//! - [`tensor`]: fp64 tensors and a reverse-mode gradient tape.
//! - [`geometry`]: ranges, boxes, origin shifts and rotated IoU.
//! - [`datasets`]: KITTI readers, taxonomy mapping, synthetic domains.
//! - [`encoder`]: pillarization and the shared BEV backbone.
//! - [`norm`]: dataset-specific statistics normalization.
//! - [`coupling`]: BEV feature coupling and recoupling.
//! - [`head`]: center heads, losses and decoding.
//! - [`train`]: schedule, optimizer, evaluation, checkpoints, ablations.

pub mod config;
pub mod coupling;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod head;
pub mod norm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Box3D, PointCloud, Range3D};
pub use tensor::{Graph, Tensor, Var};
