//! Persistence and interchange: tensor archives, configuration files, and
//! figure/curve exporters. All on-disk formats are little-endian and
//! platform-independent.

pub mod archive;
pub mod config;
pub mod panels;
