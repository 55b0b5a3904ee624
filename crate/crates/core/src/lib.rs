//! Kolmogorov-Arnold networks with Dropout and DropKAN regularization.

pub mod adam;
pub mod autograd;
pub mod data;
pub mod drop;
pub mod error;
pub mod layer;
pub mod loss;
pub mod network;
pub mod rng;
pub mod spline;
pub mod train;
pub mod verify;
pub mod experiments;
