// `!(x >= 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod cli;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod losses;
pub mod network;
pub mod numerics;
pub mod training;
