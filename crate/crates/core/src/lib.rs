//! Evidential multi-label classification with consistency-based
//! semi-supervised losses and aleatoric-uncertainty active learning.

pub mod active;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod evidential;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod special;
pub mod trainer;
