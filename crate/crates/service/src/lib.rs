//! Command-line tools and the HTTP session service for interactive
//! segmentation refinement.

pub mod cli;
pub mod config;
pub mod error;
pub mod registry;
pub mod server;
pub mod store;
