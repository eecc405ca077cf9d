//! Unsupervised depth estimation from focal stacks.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aif;
pub mod config;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod optics;
pub mod render;

pub use error::{Error, Result};
pub use image::{convolve2d, DepthMap, DepthRange, Image, Kernel};
pub use optics::{default_schedule, FocusSchedule, LensConfig};
pub use render::{render_slice, render_slice_adjoint, render_stack, DepthGradientMap, FocalStack};
