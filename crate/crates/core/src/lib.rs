//! Cycle-abstract simulator of store-buffer leakage on Intel-style cores.

pub mod aes;
pub mod cli;
pub mod covert;
pub mod memory;
pub mod pipeline;
pub mod profile;
pub mod scenarios;
pub mod store_buffer;
pub mod victims;
