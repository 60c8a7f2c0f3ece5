//! Visuo-motor deep dynamic network: leaky-integrator convolutional vision,
//! a slow recurrent PFC layer and multiple-timescale motor layers, trained by
//! backpropagation through time on a synthetic gesture-to-grasp task.

pub mod analysis;
pub mod envtask;
pub mod error;
pub mod experiment;
pub mod network;
pub mod numerics;
pub mod training;

pub use error::{Result, VmdnnError};
