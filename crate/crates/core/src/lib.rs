//! Federated co-simulation and hardware-in-the-loop kit for cross-site
//! energy-lab experiments.

pub mod command;
pub mod compare;
pub mod experiment;
pub mod hub;
pub mod model;
pub mod netem;
pub mod plant;
pub mod registry;
pub mod scenarios;
pub mod sync;
pub mod trace;
