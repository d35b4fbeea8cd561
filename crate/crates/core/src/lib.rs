//! Anatomical segmentation from heterogeneous, multi-center labels.
//!
//! The crate trains and evaluates three model families on chest-radiograph
//! style data where each center annotates a different subset of structures:
//! a landmark model with a graph-convolutional decoder whose loss is masked
//! by label availability, a naive multiclass UNet, and a UNet trained with
//! independent per-structure heads and availability masking.
//!
//! Numerical code is generic over [`Scalar`]; `*32` / `*64` aliases at the
//! crate root pin the precision.

pub mod anatomy;
pub mod data;
pub mod error;
pub mod grid;
pub mod harness;
pub mod latent;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod raster;
mod util;

pub use heteroseg_autograd::Scalar;

pub use anatomy::{
    availability_mask, build_contour_adjacency, build_layout, ContourTopology, LabelAvailability, LandmarkSet,
    Structure, StructureLayout,
};
pub use error::{Error, Result};
pub use grid::{BinaryMask, Grid};
pub use metrics::{dice, hausdorff, landmark_mse, MetricReport, MetricRow};
pub use models::{Model, ModelKind, PixelMode, Setting};
pub use raster::{fill_contours, StructureMasks};

pub type LandmarkSet32 = LandmarkSet<f32>;
pub type LandmarkSet64 = LandmarkSet<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
