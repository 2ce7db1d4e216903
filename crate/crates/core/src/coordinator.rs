//! The market coordinator ("data center").
//!
//! Each round it broadcasts the clearing price plus per-player network
//! signals, collects best responses, runs a load flow on the resulting bus
//! withdrawals, turns limit violations into price signals, and moves the
//! clearing price against the supply/demand mismatch.
//!
//! Voltage signals go to sellers (the one electrically nearest to the
//! violating bus); congestion signals go to the buyers downstream of the
//! congested line. In [`SignalMode::Integral`] every bus and line keeps a
//! non-negative multiplier that accumulates the per-round signal and relaxes
//! back to zero once its limit is slack.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::agents::{BuyerParams, SellerParams};
use crate::error::{Error, Result};
use crate::network::{BusId, Network, Topology};
use crate::powerflow::{self, PowerFlowModel, PowerFlowSolution};
use crate::scenario_io::Scenario;

/// How network signals evolve between rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalMode {
    /// Per-bus and per-line multipliers accumulate the round's signal and
    /// are projected onto their sign constraint.
    #[default]
    Integral,
    /// Signals are recomputed from the current violations only.
    Stateless,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClearingConfig {
    /// Price step, $/kWh per kW of mismatch.
    pub xi: f64,
    /// Voltage signal coefficient.
    pub sigma_v: f64,
    /// Congestion signal coefficient, per kW.
    pub sigma_f: f64,
    /// Initial clearing price, $/kWh.
    pub lambda0: f64,
    /// Balance tolerance in kW; `None` means 0.1 % of total maximum demand.
    pub eps_balance: Option<f64>,
    /// Price-change tolerance, $/kWh. Stopping leaves a mismatch of up to
    /// `eps_price / xi` kW, which prices into welfare at about `λ` per kW.
    pub eps_price: f64,
    pub max_iterations: usize,
    pub network_signals: bool,
    pub signal_mode: SignalMode,
    /// Voltage band slack for the convergence test, p.u.
    pub voltage_tolerance: f64,
    /// Flow slack for the convergence test, as a fraction of `f_max`.
    pub flow_tolerance: f64,
    /// Consecutive rounds of growing, sign-flipping mismatch that count as
    /// divergence.
    pub divergence_window: usize,
}

impl Default for ClearingConfig {
    fn default() -> Self {
        Self {
            xi: 0.01,
            sigma_v: 1.0,
            sigma_f: 0.001,
            lambda0: 20.0,
            eps_balance: None,
            eps_price: 1e-8,
            max_iterations: 5000,
            network_signals: true,
            signal_mode: SignalMode::Integral,
            voltage_tolerance: 1e-3,
            flow_tolerance: 0.005,
            divergence_window: 50,
        }
    }
}

impl ClearingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.xi) {
            return Err(Error::Contract(format!(
                "xi must be positive, got {}",
                self.xi
            )));
        }
        if !positive(self.eps_price) || self.eps_balance.is_some_and(|e| !positive(e)) {
            return Err(Error::Contract("tolerances must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Contract("max_iterations must be at least 1".into()));
        }
        if !self.lambda0.is_finite() || self.lambda0 < 0.0 {
            return Err(Error::Contract(
                "lambda0 must be a finite non-negative price".into(),
            ));
        }
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !non_negative(self.sigma_v)
            || !non_negative(self.sigma_f)
            || !non_negative(self.voltage_tolerance)
            || !non_negative(self.flow_tolerance)
        {
            return Err(Error::Contract(
                "signal coefficients and limit tolerances must be non-negative".into(),
            ));
        }
        if self.divergence_window == 0 {
            return Err(Error::Contract(
                "divergence_window must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn balance_tolerance(&self, scenario: &Scenario) -> f64 {
        self.eps_balance.unwrap_or(1e-3 * scenario.max_demand())
    }
}

/// Coordinator state at the start of round `k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketState {
    pub lambda: f64,
    /// Voltage signal per seller, $/kWh.
    pub omega_signal: Vec<f64>,
    /// Congestion signal per buyer, $/kWh.
    pub rho_signal: Vec<f64>,
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
    pub k: usize,
}

/// One round of the clearing loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Price broadcast this round.
    pub lambda: f64,
    pub total_supply: f64,
    pub total_demand: f64,
    /// `total_supply − total_demand`, kW.
    pub mismatch: f64,
    pub min_voltage: f64,
    pub max_voltage: f64,
    /// Largest `|F_l|` relative to the limit on its side, percent.
    pub max_line_loading_pct: f64,
    /// Signals computed this round (applied next round), after balancing.
    pub omega_total: f64,
    pub rho_total: f64,
    /// `Σϖ − Σρ` after balancing.
    pub transfer_imbalance: f64,
    /// Whether the congestion signals were rescaled to balance transfers.
    pub transfers_scaled: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClearingResult {
    pub lambda_star: f64,
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRecord>,
    pub final_solution: PowerFlowSolution,
    /// Signals in force when the allocations above were computed.
    pub final_state: MarketState,
}

impl ClearingResult {
    pub fn total_supply(&self) -> f64 {
        self.supply.iter().sum()
    }

    pub fn total_demand(&self) -> f64 {
        self.demand.iter().sum()
    }

    /// Per-round transfer imbalance `Σϖ − Σρ`.
    pub fn transfer_imbalance(&self) -> impl Iterator<Item = f64> + '_ {
        self.trace.iter().map(|t| t.transfer_imbalance)
    }
}

/// Projected dual step: excess supply lowers the price, excess demand raises it.
pub fn update_price(lambda: f64, total_supply: f64, total_demand: f64, xi: f64) -> f64 {
    (lambda - xi * (total_supply - total_demand)).max(0.0)
}

/// Sum of `|z|` along the tree path between two buses.
fn electrical_distance(network: &Network, topo: &Topology, mut u: usize, mut v: usize) -> f64 {
    let mut dist = 0.0;
    let hop = |bus: usize| network.lines[topo.feeder_line[bus]].impedance().norm();
    while topo.depth[u] > topo.depth[v] {
        dist += hop(u);
        u = topo.parent(u).expect("deeper bus has a parent bus");
    }
    while topo.depth[v] > topo.depth[u] {
        dist += hop(v);
        v = topo.parent(v).expect("deeper bus has a parent bus");
    }
    while u != v {
        dist += hop(u) + hop(v);
        match (topo.parent(u), topo.parent(v)) {
            (Some(pu), Some(pv)) => {
                u = pu;
                v = pv;
            }
            // both hung off the slack at depth 1
            _ => break,
        }
    }
    dist
}

fn nearest_in(
    network: &Network,
    topo: &Topology,
    bus: usize,
    seller_bus: &[usize],
) -> Option<usize> {
    seller_bus
        .iter()
        .enumerate()
        .map(|(i, &sb)| {
            (
                electrical_distance(network, topo, bus, sb),
                network.buses[sb],
                i,
            )
        })
        .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)))
        .map(|(_, _, i)| i)
}

/// Seller electrically nearest to `violating_node` by path impedance;
/// ties go to the lower bus identifier.
pub fn nearest_seller(
    network: &Network,
    violating_node: BusId,
    sellers: &[SellerParams],
) -> Result<usize> {
    if sellers.is_empty() {
        return Err(Error::Contract(
            "no sellers to route a voltage signal to".into(),
        ));
    }
    let topo = network.topology()?;
    let bus = topo
        .bus_index(violating_node)
        .ok_or(Error::UnknownNode(violating_node))?;
    let seller_nodes: Vec<BusId> = sellers.iter().map(|s| s.node).collect();
    let seller_bus = powerflow::resolve_nodes(&topo, &seller_nodes)?;
    Ok(nearest_in(network, &topo, bus, &seller_bus).expect("sellers is non-empty"))
}

/// Per-round voltage signal for one bus: negative above `v_max`, positive
/// below `v_min`, zero inside the band.
fn voltage_signal(magnitude: f64, network: &Network, lambda: f64, sigma_v: f64) -> f64 {
    if magnitude > network.v_max {
        sigma_v * lambda * (network.v_max - magnitude)
    } else if magnitude < network.v_min {
        sigma_v * lambda * (network.v_min - magnitude)
    } else {
        0.0
    }
}

/// Routes each voltage violation to the nearest seller; violations mapped
/// to the same seller accumulate.
pub fn voltage_price_signals(
    solution: &PowerFlowSolution,
    network: &Network,
    lambda: f64,
    sigma_v: f64,
    sellers: &[SellerParams],
) -> Result<Vec<f64>> {
    let mut omega = vec![0.0; sellers.len()];
    for (&bus, v) in network.buses.iter().zip(&solution.voltages) {
        let signal = voltage_signal(v.norm(), network, lambda, sigma_v);
        if signal != 0.0 {
            omega[nearest_seller(network, bus, sellers)?] += signal;
        }
    }
    Ok(omega)
}

/// Congestion surcharge `sigma_f·lambda·(F − f_max)` for every overloaded
/// line, charged to each buyer downstream of it.
pub fn congestion_price_signals(
    solution: &PowerFlowSolution,
    ptdf: &DMatrix<f64>,
    network: &Network,
    lambda: f64,
    sigma_f: f64,
    buyers: &[BuyerParams],
) -> Result<Vec<f64>> {
    let topo = network.topology()?;
    let buyer_nodes: Vec<BusId> = buyers.iter().map(|b| b.node).collect();
    let buyer_bus = powerflow::resolve_nodes(&topo, &buyer_nodes)?;
    let surcharge: Vec<f64> = network
        .lines
        .iter()
        .zip(&solution.line_flows)
        .map(|(line, &f)| {
            if f > line.f_max {
                sigma_f * lambda * (f - line.f_max)
            } else {
                0.0
            }
        })
        .collect();
    Ok(route_line_signals(&surcharge, ptdf, &buyer_bus))
}

fn route_line_signals(per_line: &[f64], ptdf: &DMatrix<f64>, buyer_bus: &[usize]) -> Vec<f64> {
    buyer_bus
        .iter()
        .map(|&bus| {
            per_line
                .iter()
                .enumerate()
                .filter(|&(l, _)| ptdf[(l, bus)] == 1.0)
                .map(|(_, s)| s)
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferBalance {
    pub omega: Vec<f64>,
    pub rho: Vec<f64>,
    /// `Σϖ − Σρ` after adjustment.
    pub imbalance: f64,
    pub scaled: bool,
}

/// Rescales the congestion signals so that sellers' and buyers' transfers
/// cancel, when both are active with the same sign.
pub fn balance_transfers(omega: &[f64], rho: &[f64]) -> TransferBalance {
    let omega_sum: f64 = omega.iter().sum();
    let rho_sum: f64 = rho.iter().sum();
    if omega_sum != 0.0 && rho_sum != 0.0 {
        let beta = omega_sum / rho_sum;
        if beta > 0.0 && beta.is_finite() {
            let rho: Vec<f64> = rho.iter().map(|r| r * beta).collect();
            let imbalance = omega_sum - rho.iter().sum::<f64>();
            return TransferBalance {
                omega: omega.to_vec(),
                rho,
                imbalance,
                scaled: true,
            };
        }
    }
    TransferBalance {
        omega: omega.to_vec(),
        rho: rho.to_vec(),
        imbalance: omega_sum - rho_sum,
        scaled: false,
    }
}

/// Bus/line multipliers and the routing tables that map them onto players.
struct NetworkSignals {
    mode: SignalMode,
    sigma_v: f64,
    sigma_f: f64,
    /// Nearest seller for each bus.
    bus_seller: Vec<usize>,
    buyer_bus: Vec<usize>,
    over_voltage: Vec<f64>,
    under_voltage: Vec<f64>,
    congestion: Vec<f64>,
}

impl NetworkSignals {
    fn new(
        model: &PowerFlowModel<'_>,
        seller_bus: &[usize],
        buyer_bus: &[usize],
        config: &ClearingConfig,
    ) -> Self {
        let network = model.network();
        let topo = model.topology();
        let n = topo.bus_count();
        let bus_seller = (0..n)
            .map(|bus| nearest_in(network, topo, bus, seller_bus).expect("at least one seller"))
            .collect();
        Self {
            mode: config.signal_mode,
            sigma_v: config.sigma_v,
            sigma_f: config.sigma_f,
            bus_seller,
            buyer_bus: buyer_bus.to_vec(),
            over_voltage: vec![0.0; n],
            under_voltage: vec![0.0; n],
            congestion: vec![0.0; network.lines.len()],
        }
    }

    /// Updates the multipliers from the current solution and returns the
    /// routed per-seller and per-buyer signals.
    fn update(
        &mut self,
        model: &PowerFlowModel<'_>,
        solution: &PowerFlowSolution,
        lambda: f64,
        n_sellers: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let network = model.network();
        let (sv, sf) = (self.sigma_v * lambda, self.sigma_f * lambda);
        for (bus, v) in solution.voltages.iter().enumerate() {
            let mag = v.norm();
            match self.mode {
                SignalMode::Integral => {
                    self.over_voltage[bus] =
                        (self.over_voltage[bus] + sv * (network.v_max - mag)).min(0.0);
                    self.under_voltage[bus] =
                        (self.under_voltage[bus] + sv * (network.v_min - mag)).max(0.0);
                }
                SignalMode::Stateless => {
                    self.over_voltage[bus] = (sv * (network.v_max - mag)).min(0.0);
                    self.under_voltage[bus] = (sv * (network.v_min - mag)).max(0.0);
                }
            }
        }
        for (l, (line, &f)) in network.lines.iter().zip(&solution.line_flows).enumerate() {
            let step = sf * (f - line.f_max);
            self.congestion[l] = match self.mode {
                SignalMode::Integral => (self.congestion[l] + step).max(0.0),
                SignalMode::Stateless => step.max(0.0),
            };
        }

        let mut omega = vec![0.0; n_sellers];
        for (bus, &seller) in self.bus_seller.iter().enumerate() {
            omega[seller] += self.over_voltage[bus] + self.under_voltage[bus];
        }
        let rho = route_line_signals(&self.congestion, model.bibc(), &self.buyer_bus);
        (omega, rho)
    }
}

fn max_line_loading_pct(network: &Network, solution: &PowerFlowSolution) -> f64 {
    network
        .lines
        .iter()
        .zip(&solution.line_flows)
        .map(|(line, &f)| {
            let limit = if f >= 0.0 { line.f_max } else { -line.f_min() };
            if limit > 0.0 {
                100.0 * f.abs() / limit
            } else if f == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

/// Limits the price signals can act on: the voltage band on both sides and
/// the upper flow limit.
fn within_controlled_limits(
    network: &Network,
    solution: &PowerFlowSolution,
    config: &ClearingConfig,
) -> bool {
    let voltage_ok = solution.voltage_magnitudes().all(|v| {
        v <= network.v_max + config.voltage_tolerance
            && v >= network.v_min - config.voltage_tolerance
    });
    let flow_ok = network
        .lines
        .iter()
        .zip(&solution.line_flows)
        .all(|(line, &f)| f <= line.f_max * (1.0 + config.flow_tolerance));
    voltage_ok && flow_ok
}

/// Runs the distributed clearing loop to convergence or the iteration cap.
///
/// Non-convergence is not an error: the result carries `converged == false`
/// and the full trace.
pub fn clear_market(scenario: &Scenario, config: &ClearingConfig) -> Result<ClearingResult> {
    scenario.validate()?;
    config.validate()?;
    if scenario.feasibility_window().is_none() {
        return Err(Error::Infeasible(
            "aggregate supply and demand ranges do not overlap".into(),
        ));
    }
    let network = &scenario.network;
    let model = PowerFlowModel::new(network)?;
    let topo = model.topology();
    let seller_bus = powerflow::resolve_nodes(topo, &scenario.seller_nodes())?;
    let buyer_bus = powerflow::resolve_nodes(topo, &scenario.buyer_nodes())?;
    let mut signals = NetworkSignals::new(&model, &seller_bus, &buyer_bus, config);
    let eps_balance = config.balance_tolerance(scenario);

    let (n_s, n_b) = (scenario.sellers.len(), scenario.buyers.len());
    let mut state = MarketState {
        lambda: config.lambda0,
        omega_signal: vec![0.0; n_s],
        rho_signal: vec![0.0; n_b],
        supply: vec![0.0; n_s],
        demand: vec![0.0; n_b],
        k: 0,
    };
    let mut trace = Vec::new();
    let mut growth_run = 0usize;
    let mut last_mismatch = 0.0f64;

    loop {
        let lambda = state.lambda;
        for (i, seller) in scenario.sellers.iter().enumerate() {
            state.supply[i] = seller.best_response(lambda + state.omega_signal[i]);
        }
        for (j, buyer) in scenario.buyers.iter().enumerate() {
            state.demand[j] = buyer.best_response(lambda + state.rho_signal[j]);
        }
        let total_supply: f64 = state.supply.iter().sum();
        let total_demand: f64 = state.demand.iter().sum();
        let mismatch = total_supply - total_demand;

        let withdrawals = powerflow::net_withdrawals(
            topo.bus_count(),
            &state.supply,
            &state.demand,
            &seller_bus,
            &buyer_bus,
        )?;
        let solution = model.solve(&withdrawals)?;

        let balance = if config.network_signals {
            let (omega, rho) = signals.update(&model, &solution, lambda, n_s);
            balance_transfers(&omega, &rho)
        } else {
            balance_transfers(&[], &[])
        };
        let next_lambda = update_price(lambda, total_supply, total_demand, config.xi);

        trace.push(TraceRecord {
            iteration: state.k,
            lambda,
            total_supply,
            total_demand,
            mismatch,
            min_voltage: solution.min_voltage(),
            max_voltage: solution.max_voltage(),
            max_line_loading_pct: max_line_loading_pct(network, &solution),
            omega_total: balance.omega.iter().sum(),
            rho_total: balance.rho.iter().sum(),
            transfer_imbalance: balance.imbalance,
            transfers_scaled: balance.scaled,
        });

        let converged = mismatch.abs() <= eps_balance
            && (next_lambda - lambda).abs() <= config.eps_price
            && (!config.network_signals || within_controlled_limits(network, &solution, config));
        let iterations = state.k + 1;
        if converged || iterations >= config.max_iterations {
            return Ok(ClearingResult {
                lambda_star: lambda,
                supply: state.supply.clone(),
                demand: state.demand.clone(),
                iterations,
                converged,
                trace,
                final_solution: solution,
                final_state: state,
            });
        }

        // step-size trouble shows as a growing overshoot that flips sign each
        // round; a one-sided drift while network multipliers ramp is not it
        if mismatch.abs() > last_mismatch.abs() && mismatch * last_mismatch < 0.0 {
            growth_run += 1;
            if growth_run >= config.divergence_window {
                return Err(Error::StepSize {
                    xi: config.xi,
                    iterations: growth_run,
                });
            }
        } else {
            growth_run = 0;
        }
        last_mismatch = mismatch;

        state.lambda = next_lambda;
        if config.network_signals {
            state.omega_signal = balance.omega;
            state.rho_signal = balance.rho;
        }
        state.k += 1;
    }
}
