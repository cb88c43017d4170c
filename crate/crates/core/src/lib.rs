//! Amortized coverage-path planning for material dispensing.
//!
//! A process network maps a rasterized target area to a six-point dispense
//! path. It is trained without labels through a frozen, differentiable
//! quality model; a deterministic flow simulator serves as ground truth.

pub mod config;
pub mod datagen;
pub mod flow;
pub mod geometry;
pub mod models;
pub mod parallel;
pub mod quality;
pub mod raster;
pub mod render;
pub mod training;

pub use config::{Config, ConfigError};
pub use flow::{compress, deposit, simulate, CompressedState, DepositField, FlowConfig, FlowError};
pub use geometry::{DispensePath, GeometryError, GridSpec, Point, Polyline, TargetArea};
pub use quality::{evaluate, find_voids, ObjectiveWeights, QualityReport};
pub use raster::Mask;
