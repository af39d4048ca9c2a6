//! Deterministic numerical kernels shared by the model, prior extraction and blending.

mod grid;
mod matrix;
mod morph;

pub use grid::{conv2d_same, quantile, renorm, BinaryGrid, GaussianKernel, Grid2D};
pub use matrix::{matmul, matmul_bt, row_softmax, FeatureMatrix};
pub use morph::{connected_components, dilate3x3, morph_reconstruct, Connectivity, Labels};

pub(crate) use matrix::softmax_in_place;
