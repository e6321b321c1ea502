//! Command-line harness for training, evaluating and ablating the
//! segmentation model.

pub mod ablate;
pub mod commands;
pub mod config;
