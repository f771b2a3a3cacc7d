//! Simulation-backed Fourier ptychography: forward optics, sensor noise,
//! reverse-mode differentiation, iterative reconstruction, and joint
//! illumination/network training, with a small CLI on top.

pub mod arrayfile;
pub mod autodiff;
pub mod cli;
pub mod cnn;
pub mod config;
pub mod error;
pub mod fft;
pub mod metrics;
pub mod noise;
pub mod optics;
pub mod phantom;
pub mod recon;
pub mod report;
pub mod runconfig;
pub mod train;

pub use config::OpticsConfig;
pub use error::{FpmError, Result};
