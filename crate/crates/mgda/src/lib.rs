//! Multi-gradient descent training for physics-informed neural
//! networks, with macroscopic (LWR) and microscopic (IDM car-following)
//! traffic-flow tasks.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod losses;
pub mod moo;
pub mod physics;
pub mod pipeline;
pub mod train;
pub mod nets;
pub mod vecmath;
