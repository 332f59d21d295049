//! ANN-to-SNN conversion with integrate-and-fire neurons, firing-threshold
//! search and post-conversion calibration.

pub mod analysis;
pub mod ann;
pub mod calibration;
pub mod data;
pub mod error;
pub mod io;
pub mod snn;
pub mod tensor;
pub mod threshold;

pub use ann::{BatchNorm, Layer, LayerKind, Network};
pub use calibration::{CalibrationConfig, Pipeline};
pub use data::Dataset;
pub use error::{Error, FormatError, Result};
pub use snn::{RoundMode, SimOptions, Simulation, SpikingNetwork};
pub use tensor::{ConvGeometry, Tensor};
pub use threshold::{Threshold, ThresholdMode, ThresholdPolicy};
