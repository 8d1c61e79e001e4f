#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod ablate;
pub mod autograd;
pub mod codec;
pub mod conditions;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod infer;
pub mod io;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
