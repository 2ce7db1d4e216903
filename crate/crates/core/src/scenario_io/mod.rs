//! Scenarios: construction, random generation, JSON persistence, and the
//! CSV writers for clearing traces and sweeps.

mod generate;
mod sweep;
mod trace;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{BuyerParams, SellerParams};
use crate::error::{Error, Result};
use crate::network::{BusId, Network};

pub use generate::{generate_scenario, DrawRanges, FeederSpec, Layout};
pub use sweep::{parse_seller_counts, sweep_sellers, write_sweep, SweepRow};
pub use trace::{write_players, write_trace, PLAYER_HEADER, TRACE_HEADER};

/// A single local market: feeder plus the players attached to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub network: Network,
    pub sellers: Vec<SellerParams>,
    pub buyers: Vec<BuyerParams>,
    #[serde(default)]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.sellers.is_empty() || self.buyers.is_empty() {
            return Err(Error::Validation(
                "a market needs at least one seller and one buyer".into(),
            ));
        }
        let buses: HashSet<BusId> = self.network.buses.iter().copied().collect();
        let nodes = self
            .sellers
            .iter()
            .map(|s| s.node)
            .chain(self.buyers.iter().map(|b| b.node));
        for node in nodes {
            if !buses.contains(&node) {
                return Err(Error::Validation(format!(
                    "player attached to {node}, which is not a load bus of the network"
                )));
            }
        }
        for s in &self.sellers {
            s.validate()?;
        }
        for b in &self.buyers {
            b.validate()?;
        }
        Ok(())
    }

    pub fn seller_nodes(&self) -> Vec<BusId> {
        self.sellers.iter().map(|s| s.node).collect()
    }

    pub fn buyer_nodes(&self) -> Vec<BusId> {
        self.buyers.iter().map(|b| b.node).collect()
    }

    /// Intersection of the aggregate supply and demand ranges, if non-empty.
    pub fn feasibility_window(&self) -> Option<(f64, f64)> {
        let s_lo: f64 = self.sellers.iter().map(|s| s.s_min).sum();
        let s_hi: f64 = self.sellers.iter().map(|s| s.s_max).sum();
        let d_lo: f64 = self.buyers.iter().map(|b| b.d_min).sum();
        let d_hi: f64 = self.buyers.iter().map(|b| b.d_max).sum();
        let lo = s_lo.max(d_lo);
        let hi = s_hi.min(d_hi);
        (lo <= hi).then_some((lo, hi))
    }

    /// Total maximum demand, kW.
    pub fn max_demand(&self) -> f64 {
        self.buyers.iter().map(|b| b.d_max).sum()
    }
}

/// Parses and validates a scenario document.
///
/// Parse errors carry the path of the offending field, e.g. `sellers[3].a`.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut de = serde_json::Deserializer::from_str(text);
    let scenario: Scenario = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        Error::Parse {
            path,
            message: e.into_inner().to_string(),
        }
    })?;
    de.end().map_err(|e| Error::Parse {
        path: ".".into(),
        message: e.to_string(),
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenario(&text)
}

pub fn scenario_to_json(scenario: &Scenario) -> String {
    serde_json::to_string_pretty(scenario).expect("scenario serialization is infallible")
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = scenario_to_json(scenario);
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a `bus,withdrawal_kw` CSV into a per-bus withdrawal vector for
/// `network`. Buses absent from the file get zero; repeated buses sum.
pub fn parse_injections(text: &str, network: &Network) -> Result<Vec<f64>> {
    let topo = network.topology()?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "bus" || &headers[1] != "withdrawal_kw" {
        return Err(Error::Parse {
            path: "header".into(),
            message: "expected `bus,withdrawal_kw`".into(),
        });
    }
    let mut p = vec![0.0; topo.bus_count()];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize, name: &str| -> Result<&str> {
            record.get(i).ok_or_else(|| Error::Parse {
                path: format!("row {}.{name}", row + 1),
                message: "missing value".into(),
            })
        };
        let bus: u32 = field(0, "bus")?.parse().map_err(|e| Error::Parse {
            path: format!("row {}.bus", row + 1),
            message: format!("{e}"),
        })?;
        let kw: f64 = field(1, "withdrawal_kw")?
            .parse()
            .map_err(|e| Error::Parse {
                path: format!("row {}.withdrawal_kw", row + 1),
                message: format!("{e}"),
            })?;
        if !kw.is_finite() {
            return Err(Error::Parse {
                path: format!("row {}.withdrawal_kw", row + 1),
                message: "not finite".into(),
            });
        }
        let idx = topo
            .bus_index(BusId(bus))
            .ok_or(Error::UnknownNode(BusId(bus)))?;
        p[idx] += kw;
    }
    Ok(p)
}
