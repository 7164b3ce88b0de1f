//! Residual diffusion for satellite precipitation bias correction and downscaling.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod crc64;
pub mod edm;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod tensor;
