//! Simulation and processing pipeline for autonomous WiFi fingerprint
//! surveys with a mobile robot.
//!
//! The stages, in pipeline order:
//!
//! * [`gridmap`]: occupancy grids, thresholding, inflation, distance transform
//! * [`segmentation`]: free-space decomposition into regular regions
//! * [`pathplan`]: principal-axis boustrophedon survey plans
//! * [`rfsim`]: dual-band RF world and survey simulator with time/energy model
//! * [`recovery`]: lost-signal recovery from the other band via SVR
//! * [`anomaly`]: GP regression, largest-normalized-residual test, repair
//! * [`fpmap`]: GP fingerprint maps, Bayes/KNN/particle-filter localization
//! * [`pipeline`]: configuration and end-to-end orchestration

pub mod anomaly;
pub mod error;
pub mod gridmap;
pub mod pathplan;
pub mod pipeline;
pub mod recovery;
pub mod segmentation;
pub mod fixtures;
pub mod fpmap;
pub mod rfsim;
pub mod rng;

pub use error::{Error, Result};
