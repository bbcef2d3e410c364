//! Deterministic simulation of a firmware-over-the-air update stack for a
//! small automotive ECU network.

pub mod bootflow;
pub mod can;
pub mod cli;
pub mod delta;
pub mod flash;
pub mod integrity;
pub mod lka;
pub mod nvstore;
pub mod orchestrator;
pub mod scenario;
pub mod sim;
pub mod time;
pub mod uds;
