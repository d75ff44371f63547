//! Command line and HTTP front ends for partsdf models.

pub mod api;
pub mod cli;
pub mod exit;
