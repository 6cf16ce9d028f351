pub mod anchor;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod neural_stl;
pub mod normalization;
pub mod numerics;
pub mod tc_patch;
pub mod training;

pub use error::{Error, Result};
