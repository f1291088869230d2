//! Bussgang-linearized Kalman filtering for one-bit quantized observations.
//!
//! Filters ([`filters`]) track a state from the signs of dithered
//! comparators ([`quantizer`]); [`bknet`] learns the correction gain with a
//! small recurrent network; [`experiment`] runs the evaluation grid.

pub mod bknet;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod filters;
pub mod linalg;
pub mod quantizer;
pub mod ssmodel;

pub use bknet::{GainNetwork, NetworkConfig, TrainConfig};
pub use datagen::{mse_db, NoiseSpec, SequenceDataset, SequencePair};
pub use error::{Error, Result};
pub use experiment::{report_to_table, run_experiment, ExperimentConfig, ExperimentVariant, Mismatch, Report};
pub use filters::{run_filter, Diagnostics, FilterRun, FilterState, PriorBundle, Variant};
pub use quantizer::{AdcBank, ProjectionOperator};
pub use ssmodel::{LorenzParams, SharedModel, StateSpaceModel};
