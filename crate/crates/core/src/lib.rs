// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod semunits;
pub mod timeline;
pub mod toyworld;
pub mod tpe;
pub mod vecmath;
