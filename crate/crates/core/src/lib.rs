//! Discrete-event model of a TSN-5G-TSN downlink with TAS dejittering.

pub mod analysis;
pub mod bridge;
pub mod config;
pub mod gate;
pub mod harness;
pub mod model;
pub mod planner;
pub mod sim;
pub mod time;

pub use time::{Macrotick, TimeNs};
