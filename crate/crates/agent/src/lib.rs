//! Runnable endpoints for two-factor encrypted storage: the device daemon and
//! command-line client, the local approval console API, scripted adversary
//! scenarios and the key-derivation benchmark.

pub mod bench;
pub mod config;
pub mod console;
pub mod scenario;
