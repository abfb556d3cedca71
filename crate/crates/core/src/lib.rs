//! Predicts how long a person takes to find a target element on a webpage
//! screenshot.
//!
//! The crate bundles a small autodiff kernel ([`tensor`]), the trial schema
//! and a synthetic task generator ([`dataset`]), structured feature
//! extraction ([`features`]), the attentional CNN ([`model`]), the
//! statistical toolkit ([`analytics`]), evaluation metrics ([`evaluation`])
//! and checkpoint/HTTP serving ([`service`]).

pub mod analytics;
pub mod cli;
pub mod dataset;
pub mod evaluation;
pub mod features;
pub mod gradsuite;
pub mod model;
pub mod service;
pub mod tensor;
