//! Configuration, persistence, calibration and stage orchestration.

pub mod calibrate;
pub mod config;
pub mod io;
pub mod manifest;
pub mod stages;

pub use calibrate::{calibrate, Calibration, CalibrationGroup, ResponseFit};
pub use config::{PipelineConfig, CONFIG_SCHEMA, ENV_PREFIX};
pub use manifest::{ManifestEntry, RunManifest};
pub use stages::{Pipeline, Stage};
