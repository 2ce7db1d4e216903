//! Radial feeder description and its rooted-tree view.

use std::collections::HashMap;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of a network node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bus {}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub from: BusId,
    pub to: BusId,
    /// Series resistance, p.u.
    pub r: f64,
    /// Series reactance, p.u.
    pub x: f64,
    /// Upper flow limit, kW.
    pub f_max: f64,
    /// Lower flow limit, kW. Defaults to `-f_max` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_min: Option<f64>,
}

impl Line {
    pub fn impedance(&self) -> Complex64 {
        Complex64::new(self.r, self.x)
    }

    pub fn f_min(&self) -> f64 {
        self.f_min.unwrap_or(-self.f_max)
    }
}

/// A radial distribution feeder rooted at the slack bus.
///
/// `buses` excludes the slack bus; its order fixes the column order of every
/// bus-indexed vector and matrix. `lines` order fixes the row order of
/// line-indexed ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    pub slack: BusId,
    /// Slack bus voltage as `[re, im]`, p.u.
    pub slack_voltage: Complex64,
    pub buses: Vec<BusId>,
    pub lines: Vec<Line>,
    pub v_min: f64,
    pub v_max: f64,
    /// kVA
    pub base_power: f64,
    /// kV
    pub base_voltage: f64,
}

/// Where a line's sending end sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upstream {
    Slack,
    Bus(usize),
}

/// Rooted-tree view of a validated [`Network`], all in index space.
#[derive(Debug, Clone)]
pub struct Topology {
    /// Bus index of the receiving (far-from-slack) end of each line.
    pub line_to_bus: Vec<usize>,
    /// Sending end of each line.
    pub line_upstream: Vec<Upstream>,
    /// Index of the line feeding each bus.
    pub feeder_line: Vec<usize>,
    /// Buses in breadth-first order from the slack.
    pub order: Vec<usize>,
    /// Number of lines between the slack and each bus.
    pub depth: Vec<usize>,
    index: HashMap<BusId, usize>,
}

impl Topology {
    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn bus_count(&self) -> usize {
        self.feeder_line.len()
    }

    /// Parent bus index, `None` when the parent is the slack.
    pub fn parent(&self, bus: usize) -> Option<usize> {
        match self.line_upstream[self.feeder_line[bus]] {
            Upstream::Slack => None,
            Upstream::Bus(p) => Some(p),
        }
    }

    /// Lines on the unique slack→bus path, starting at the bus.
    pub fn path_to_slack(&self, bus: usize) -> impl Iterator<Item = usize> + '_ {
        let mut cur = Some(bus);
        std::iter::from_fn(move || {
            let b = cur?;
            cur = self.parent(b);
            Some(self.feeder_line[b])
        })
    }
}

impl Network {
    /// Checks limits and base quantities, then builds the rooted tree.
    pub fn validate(&self) -> Result<()> {
        if !self.v_min.is_finite() || !self.v_max.is_finite() || self.v_min >= self.v_max {
            return Err(Error::Validation(format!(
                "voltage limits need v_min < v_max, got [{}, {}]",
                self.v_min, self.v_max
            )));
        }
        if !(self.base_power > 0.0 && self.base_voltage > 0.0)
            || !self.base_power.is_finite()
            || !self.base_voltage.is_finite()
        {
            return Err(Error::Validation("base quantities must be positive".into()));
        }
        if !self.slack_voltage.is_finite() || self.slack_voltage.norm() == 0.0 {
            return Err(Error::Validation(
                "slack voltage must be finite and nonzero".into(),
            ));
        }
        for (l, line) in self.lines.iter().enumerate() {
            let z = line.impedance();
            if !z.is_finite() || z.norm() == 0.0 {
                return Err(Error::Validation(format!(
                    "line {l} has zero or non-finite impedance"
                )));
            }
            if !line.f_max.is_finite() || line.f_max <= 0.0 {
                return Err(Error::Validation(format!("line {l} needs f_max > 0")));
            }
            let f_min = line.f_min();
            if !f_min.is_finite() || f_min > 0.0 {
                return Err(Error::Validation(format!("line {l} needs f_min ≤ 0")));
            }
        }
        self.topology().map(|_| ())
    }

    /// Roots the line set at the slack bus.
    ///
    /// Fails unless the lines form a spanning tree over the slack and every
    /// listed bus.
    pub fn topology(&self) -> Result<Topology> {
        let n = self.buses.len();
        let mut index = HashMap::with_capacity(n);
        for (i, &id) in self.buses.iter().enumerate() {
            if id == self.slack {
                return Err(Error::Topology(format!(
                    "{id} is the slack bus and cannot be listed"
                )));
            }
            if index.insert(id, i).is_some() {
                return Err(Error::Topology(format!("{id} listed twice")));
            }
        }
        // node n == slack
        let node_of = |id: BusId| -> Result<usize> {
            if id == self.slack {
                Ok(n)
            } else {
                index.get(&id).copied().ok_or(Error::UnknownNode(id))
            }
        };
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + 1];
        for (l, line) in self.lines.iter().enumerate() {
            let (u, v) = (node_of(line.from)?, node_of(line.to)?);
            if u == v {
                return Err(Error::Topology(format!("line {l} is a self-loop")));
            }
            adjacency[u].push((v, l));
            adjacency[v].push((u, l));
        }
        if self.lines.len() != n {
            return Err(Error::Topology(format!(
                "network not radial: {} lines for {} buses",
                self.lines.len(),
                n
            )));
        }

        let mut line_to_bus = vec![usize::MAX; n];
        let mut line_upstream = vec![Upstream::Slack; n];
        let mut feeder_line = vec![usize::MAX; n];
        let mut depth = vec![0; n];
        let mut order = Vec::with_capacity(n);
        let mut seen = vec![false; n + 1];
        seen[n] = true;
        let mut queue = std::collections::VecDeque::from([n]);
        while let Some(u) = queue.pop_front() {
            for &(v, l) in &adjacency[u] {
                if seen[v] {
                    continue;
                }
                seen[v] = true;
                line_to_bus[l] = v;
                line_upstream[l] = if u == n {
                    Upstream::Slack
                } else {
                    Upstream::Bus(u)
                };
                feeder_line[v] = l;
                depth[v] = if u == n { 1 } else { depth[u] + 1 };
                order.push(v);
                queue.push_back(v);
            }
        }
        if order.len() != n {
            // n lines over n + 1 nodes that do not reach everything contain a cycle
            return Err(Error::Topology(
                "network not radial: some buses are unreachable from the slack".into(),
            ));
        }
        Ok(Topology {
            line_to_bus,
            line_upstream,
            feeder_line,
            order,
            depth,
            index,
        })
    }

    /// Chain feeder `slack → 1 → 2 → … → n` with identical lines.
    pub fn chain(n: usize, impedance: Complex64, f_max: f64) -> Network {
        let lines = (1..=n as u32)
            .map(|k| Line {
                from: BusId(k - 1),
                to: BusId(k),
                r: impedance.re,
                x: impedance.im,
                f_max,
                f_min: None,
            })
            .collect();
        Network {
            slack: BusId(0),
            slack_voltage: Complex64::new(1.0, 0.0),
            buses: (1..=n as u32).map(BusId).collect(),
            lines,
            v_min: 0.95,
            v_max: 1.05,
            base_power: 100.0,
            base_voltage: 0.4,
        }
    }
}
