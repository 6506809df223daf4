//! Pipeline commands and the teleoperation service for grid-world
//! object-goal navigation.

pub mod cli;
pub mod commands;
pub mod error;
pub mod server;
pub mod teleop;
