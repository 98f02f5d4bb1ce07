//! Limited-precision fixed-point arithmetic with stochastic rounding,
//! fixed-point network training, and a cycle-level systolic-array GEMM
//! simulator.

pub mod fxp;
pub mod data;
pub mod experiment;
pub mod fxtensor;
pub mod net;
pub mod rng;
pub mod sysarray;
