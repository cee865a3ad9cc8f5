//! Experiment driver: config files, corpus generation, training, decoding,
//! evaluation and hyperparameter sweeps.

pub mod commands;
pub mod config;
pub mod sweep;
