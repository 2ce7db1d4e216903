//! Local transactive energy market clearing.
//!
//! Sellers and buyers respond to a broadcast price with their private
//! welfare-maximizing quantities; a coordinator moves the price along the
//! supply/demand mismatch and adds network price signals derived from a
//! direct load-flow model of the radial feeder. Independent reference
//! solvers live in [`oracle`].

pub mod agents;
pub mod coordinator;
mod error;
pub mod network;
pub mod oracle;
pub mod powerflow;
pub mod scenario_io;

pub use agents::{total_welfare, BuyerParams, SellerParams};
pub use coordinator::{clear_market, ClearingConfig, ClearingResult, MarketState, SignalMode};
pub use error::{Error, Result};
pub use network::{BusId, Line, Network};
pub use powerflow::{solve_power_flow, PowerFlowSolution};
pub use scenario_io::Scenario;
