//! Multi-task learning with homoscedastic task uncertainty.
//!
//! - [`cli`]: the `mtl` command-line tool.
//! - [`diffcore`]: scalar reverse-mode differentiation and a finite-difference check.
//! - [`losses`]: task losses and log-variance weighting.
//! - [`scenes`]: synthetic scenes with class, inverse depth and instance labels.
//! - [`hough_instance`]: OPTICS clustering of centroid votes.
//! - [`metrics`]: IoU, depth errors and instance partition scores.
//! - [`trainer`]: toy multi-task network, optimizer and experiment drivers.

pub mod cli;
pub mod diffcore;
pub mod hough_instance;
pub mod losses;
pub mod metrics;
pub mod scenes;
pub mod textio;
pub mod trainer;
