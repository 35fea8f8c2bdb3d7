//! Command-line front end for cell search, training and evaluation.

pub mod commands;
pub mod config;
