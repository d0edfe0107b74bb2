// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod data;
pub mod error;
pub mod gridsearch;
pub mod mechanisms;
pub mod models;
pub mod numeric;
pub mod strategies;
pub mod trainer;

pub use error::{Error, Result};
