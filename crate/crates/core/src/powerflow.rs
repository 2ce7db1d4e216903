//! Direct load flow for radial feeders.
//!
//! Branch currents follow from bus currents through the downstream-incidence
//! matrix (BIBC), and bus voltage drops follow from branch currents through
//! the path-impedance matrix (BCBV). Their product `DLF = BCBV · BIBC` is
//! constant for a topology, so each fixed-point step is one mat-vec.
//!
//! Sign convention: bus powers are net *withdrawals* (buyers positive,
//! sellers negative) and `V = V0 − DLF · I_withdrawal`, so load depresses
//! the voltage and generation raises it. Reactive power is zero throughout.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{BusId, Network, Topology, Upstream};

/// Fixed-point convergence threshold on `max |V^{t+1} − V^t|`, p.u.
pub const TOLERANCE: f64 = 1e-8;
/// Fixed-point iteration cap.
pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerFlowSolution {
    /// Bus voltages in `Network::buses` order, p.u.
    pub voltages: Vec<Complex64>,
    /// Branch currents in `Network::lines` order, flowing away from the slack, p.u.
    pub branch_currents: Vec<Complex64>,
    /// Active power at each line's sending end, kW.
    pub line_flows: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Last fixed-point step size (or mismatch, for iterative oracles), p.u.
    pub residual: f64,
}

impl PowerFlowSolution {
    pub fn voltage_magnitudes(&self) -> impl Iterator<Item = f64> + '_ {
        self.voltages.iter().map(|v| v.norm())
    }

    pub fn min_voltage(&self) -> f64 {
        self.voltage_magnitudes().fold(f64::INFINITY, f64::min)
    }

    pub fn max_voltage(&self) -> f64 {
        self.voltage_magnitudes().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Node-injection to branch-current matrix, `lines × buses`.
///
/// Entry `(l, n)` is 1 when bus `n` lies downstream of line `l`.
pub fn build_bibc(network: &Network) -> Result<DMatrix<f64>> {
    Ok(bibc_from(&network.topology()?))
}

fn bibc_from(topo: &Topology) -> DMatrix<f64> {
    let n = topo.bus_count();
    let mut bibc = DMatrix::zeros(n, n);
    for bus in 0..n {
        for line in topo.path_to_slack(bus) {
            bibc[(line, bus)] = 1.0;
        }
    }
    bibc
}

/// Branch-current to bus-voltage matrix, `buses × lines`.
///
/// Entry `(n, l)` is the impedance of line `l` when it lies on the slack→n path.
pub fn build_bcbv(network: &Network) -> Result<DMatrix<Complex64>> {
    let topo = network.topology()?;
    Ok(bcbv_from(network, &topo))
}

fn bcbv_from(network: &Network, topo: &Topology) -> DMatrix<Complex64> {
    let n = topo.bus_count();
    let mut bcbv = DMatrix::zeros(n, n);
    for bus in 0..n {
        for line in topo.path_to_slack(bus) {
            bcbv[(bus, line)] = network.lines[line].impedance();
        }
    }
    bcbv
}

/// `DLF = BCBV · BIBC`, mapping bus withdrawal currents to voltage drops.
pub fn build_dlf(network: &Network) -> Result<DMatrix<Complex64>> {
    let topo = network.topology()?;
    Ok(dlf_from(network, &topo))
}

fn dlf_from(network: &Network, topo: &Topology) -> DMatrix<Complex64> {
    let bibc = bibc_from(topo).map(|v| Complex64::new(v, 0.0));
    bcbv_from(network, topo) * bibc
}

/// Radial PTDF, `lines × buses`: sensitivity of each line flow to a
/// withdrawal at each bus. In a tree every unit withdrawn downstream of a
/// line crosses it, so the matrix equals the BIBC pattern.
pub fn compute_ptdf(network: &Network) -> Result<DMatrix<f64>> {
    build_bibc(network)
}

/// Net withdrawal per bus (kW): buyers add their demand, sellers subtract
/// their supply, co-located players sum.
pub fn injections_from_market(
    network: &Network,
    supply: &[f64],
    demand: &[f64],
    seller_nodes: &[BusId],
    buyer_nodes: &[BusId],
) -> Result<Vec<f64>> {
    let topo = network.topology()?;
    let sellers = resolve_nodes(&topo, seller_nodes)?;
    let buyers = resolve_nodes(&topo, buyer_nodes)?;
    net_withdrawals(topo.bus_count(), supply, demand, &sellers, &buyers)
}

pub(crate) fn resolve_nodes(topo: &Topology, nodes: &[BusId]) -> Result<Vec<usize>> {
    nodes
        .iter()
        .map(|&id| topo.bus_index(id).ok_or(Error::UnknownNode(id)))
        .collect()
}

pub(crate) fn net_withdrawals(
    bus_count: usize,
    supply: &[f64],
    demand: &[f64],
    seller_bus: &[usize],
    buyer_bus: &[usize],
) -> Result<Vec<f64>> {
    if supply.len() != seller_bus.len() || demand.len() != buyer_bus.len() {
        return Err(Error::Contract(
            "allocation lengths do not match player nodes".into(),
        ));
    }
    let mut p = vec![0.0; bus_count];
    for (&d, &bus) in demand.iter().zip(buyer_bus) {
        p[bus] += d;
    }
    for (&s, &bus) in supply.iter().zip(seller_bus) {
        p[bus] -= s;
    }
    Ok(p)
}

/// A feeder with its load-flow matrices prepared once.
#[derive(Debug, Clone)]
pub struct PowerFlowModel<'a> {
    network: &'a Network,
    topo: Topology,
    bibc: DMatrix<f64>,
    dlf: DMatrix<Complex64>,
}

impl<'a> PowerFlowModel<'a> {
    pub fn new(network: &'a Network) -> Result<Self> {
        network.validate()?;
        let topo = network.topology()?;
        let bibc = bibc_from(&topo);
        let dlf = dlf_from(network, &topo);
        Ok(Self {
            network,
            topo,
            bibc,
            dlf,
        })
    }

    pub fn network(&self) -> &Network {
        self.network
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    /// Downstream-incidence (= radial PTDF) matrix.
    pub fn bibc(&self) -> &DMatrix<f64> {
        &self.bibc
    }

    pub fn dlf(&self) -> &DMatrix<Complex64> {
        &self.dlf
    }

    /// Solves for bus voltages given net withdrawals in kW, from a flat start.
    pub fn solve(&self, withdrawals_kw: &[f64]) -> Result<PowerFlowSolution> {
        let n = self.topo.bus_count();
        if withdrawals_kw.len() != n {
            return Err(Error::Contract(format!(
                "{} withdrawals for {} buses",
                withdrawals_kw.len(),
                n
            )));
        }
        if withdrawals_kw.iter().any(|p| !p.is_finite()) {
            return Err(Error::Contract("withdrawals must be finite".into()));
        }
        let base = self.network.base_power;
        let p_pu: Vec<f64> = withdrawals_kw.iter().map(|p| p / base).collect();
        let v0 = self.network.slack_voltage;

        let mut v = DVector::from_element(n, v0);
        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        while iterations < MAX_ITERATIONS {
            iterations += 1;
            let current = withdrawal_currents(&p_pu, &v);
            let drop = &self.dlf * current;
            let next = drop.map(|dv| v0 - dv);
            residual = (&next - &v).iter().map(|d| d.norm()).fold(0.0, f64::max);
            v = next;
            if !residual.is_finite() {
                break;
            }
            if residual <= TOLERANCE {
                return Ok(self.finish(v, &p_pu, iterations, residual));
            }
        }
        Err(Error::PowerFlowDiverged {
            iterations,
            residual,
        })
    }

    fn finish(
        &self,
        v: DVector<Complex64>,
        p_pu: &[f64],
        iterations: usize,
        residual: f64,
    ) -> PowerFlowSolution {
        let current = withdrawal_currents(p_pu, &v);
        let bibc = self.bibc.map(|x| Complex64::new(x, 0.0));
        let branch = bibc * current;
        let voltages: Vec<Complex64> = v.iter().copied().collect();
        let branch_currents: Vec<Complex64> = branch.iter().copied().collect();
        let line_flows = sending_end_flows(self.network, &self.topo, &voltages, &branch_currents);
        PowerFlowSolution {
            voltages,
            branch_currents,
            line_flows,
            converged: true,
            iterations,
            residual,
        }
    }
}

fn withdrawal_currents(p_pu: &[f64], v: &DVector<Complex64>) -> DVector<Complex64> {
    DVector::from_iterator(
        p_pu.len(),
        p_pu.iter()
            .zip(v.iter())
            .map(|(&p, &vn)| (Complex64::new(p, 0.0) / vn).conj()),
    )
}

/// `F_l = Re(V_send · conj(B_l))` in kW.
pub(crate) fn sending_end_flows(
    network: &Network,
    topo: &Topology,
    voltages: &[Complex64],
    branch_currents: &[Complex64],
) -> Vec<f64> {
    branch_currents
        .iter()
        .enumerate()
        .map(|(l, b)| {
            let v_send = match topo.line_upstream[l] {
                Upstream::Slack => network.slack_voltage,
                Upstream::Bus(u) => voltages[u],
            };
            (v_send * b.conj()).re * network.base_power
        })
        .collect()
}

/// One-shot solve; builds the matrices on every call.
pub fn solve_power_flow(network: &Network, withdrawals_kw: &[f64]) -> Result<PowerFlowSolution> {
    PowerFlowModel::new(network)?.solve(withdrawals_kw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageViolation {
    pub bus: BusId,
    pub magnitude: f64,
    /// Positive above `v_max`, negative below `v_min`.
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowViolation {
    pub line: usize,
    pub flow: f64,
    /// Positive above `f_max`, negative below `f_min`.
    pub excess: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LimitReport {
    pub voltage: Vec<VoltageViolation>,
    pub flow: Vec<FlowViolation>,
}

impl LimitReport {
    pub fn is_empty(&self) -> bool {
        self.voltage.is_empty() && self.flow.is_empty()
    }
}

/// Lists every bus voltage magnitude and line flow outside its limits.
pub fn check_limits(solution: &PowerFlowSolution, network: &Network) -> LimitReport {
    let mut report = LimitReport::default();
    for (&bus, v) in network.buses.iter().zip(&solution.voltages) {
        let magnitude = v.norm();
        let excess = if magnitude > network.v_max {
            magnitude - network.v_max
        } else if magnitude < network.v_min {
            magnitude - network.v_min
        } else {
            continue;
        };
        report.voltage.push(VoltageViolation {
            bus,
            magnitude,
            excess,
        });
    }
    for (l, (line, &flow)) in network.lines.iter().zip(&solution.line_flows).enumerate() {
        let excess = if flow > line.f_max {
            flow - line.f_max
        } else if flow < line.f_min() {
            flow - line.f_min()
        } else {
            continue;
        };
        report.flow.push(FlowViolation {
            line: l,
            flow,
            excess,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Line;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn star(za: Complex64, zb: Complex64) -> Network {
        let mut net = Network::chain(2, za, 100.0);
        net.lines[1].from = BusId(0);
        net.lines[1].r = zb.re;
        net.lines[1].x = zb.im;
        net
    }

    fn chain2(z1: Complex64, z2: Complex64) -> Network {
        let mut net = Network::chain(2, z1, 100.0);
        net.lines[1].r = z2.re;
        net.lines[1].x = z2.im;
        net
    }

    #[test]
    fn bibc_examples() {
        let chain = chain2(c(0.01, 0.02), c(0.03, 0.04));
        assert_eq!(
            build_bibc(&chain).unwrap(),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])
        );
        let single = Network::chain(1, c(0.01, 0.0), 100.0);
        assert_eq!(
            build_bibc(&single).unwrap(),
            DMatrix::from_element(1, 1, 1.0)
        );
        let star = star(c(0.01, 0.0), c(0.02, 0.0));
        assert_eq!(build_bibc(&star).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn bcbv_and_dlf_examples() {
        let (z1, z2) = (c(0.01, 0.02), c(0.03, 0.04));
        let chain = chain2(z1, z2);
        let zero = c(0.0, 0.0);
        assert_eq!(
            build_bcbv(&chain).unwrap(),
            DMatrix::from_row_slice(2, 2, &[z1, zero, z1, z2])
        );
        assert_eq!(
            build_dlf(&chain).unwrap(),
            DMatrix::from_row_slice(2, 2, &[z1, z1, z1, z1 + z2])
        );

        let single = Network::chain(1, z1, 100.0);
        assert_eq!(
            build_bcbv(&single).unwrap(),
            DMatrix::from_element(1, 1, z1)
        );
        assert_eq!(build_dlf(&single).unwrap(), DMatrix::from_element(1, 1, z1));

        let star = star(z1, z2);
        let diag = DMatrix::from_row_slice(2, 2, &[z1, zero, zero, z2]);
        assert_eq!(build_bcbv(&star).unwrap(), diag);
        assert_eq!(build_dlf(&star).unwrap(), diag);
    }

    #[test]
    fn dlf_is_identical_across_calls() {
        let net = Network::chain(12, c(0.003, 0.007), 100.0);
        let a = build_dlf(&net).unwrap();
        let b = build_dlf(&net).unwrap();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits()));
    }

    #[test]
    fn ptdf_examples() {
        let chain = chain2(c(0.01, 0.0), c(0.01, 0.0));
        assert_eq!(
            compute_ptdf(&chain).unwrap(),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])
        );
        let star = star(c(0.01, 0.0), c(0.02, 0.0));
        assert_eq!(compute_ptdf(&star).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn injections_examples() {
        let net = Network::chain(2, c(0.01, 0.0), 100.0);
        let p = injections_from_market(&net, &[3.0], &[3.0], &[BusId(2)], &[BusId(1)]).unwrap();
        assert_eq!(p, vec![3.0, -3.0]);
        let p = injections_from_market(&net, &[], &[], &[], &[]).unwrap();
        assert_eq!(p, vec![0.0, 0.0]);
        let p = injections_from_market(&net, &[], &[2.0, 1.5], &[], &[BusId(2), BusId(2)]).unwrap();
        assert_eq!(p, vec![0.0, 3.5]);
        assert!(matches!(
            injections_from_market(&net, &[1.0], &[], &[BusId(7)], &[]),
            Err(Error::UnknownNode(BusId(7)))
        ));
    }

    #[test]
    fn two_bus_closed_form() {
        // V = 1 − 0.01·0.1/V  ⇒  V² − V + 0.001 = 0
        let net = Network::chain(1, c(0.01, 0.0), 100.0);
        let sol = solve_power_flow(&net, &[10.0]).unwrap();
        let expected = (1.0 + (1.0f64 - 0.004).sqrt()) / 2.0;
        assert!((sol.voltages[0].re - expected).abs() < 1e-9);
        assert!(sol.voltages[0].im.abs() < 1e-12);
        assert!((expected - 0.998999).abs() < 1e-6);
        assert!(sol.converged);
    }

    #[test]
    fn no_load_is_flat() {
        let mut net = Network::chain(5, c(0.01, 0.02), 100.0);
        net.slack_voltage = c(0.99, 0.0);
        let sol = solve_power_flow(&net, &[0.0; 5]).unwrap();
        assert!(sol.voltages.iter().all(|&v| v == net.slack_voltage));
        assert!(sol.line_flows.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn bus_power_consistency() {
        let net = Network::chain(6, c(0.01, 0.01), 100.0);
        let p = [5.0, -3.0, 2.0, -8.0, 4.0, 1.0];
        let sol = solve_power_flow(&net, &p).unwrap();
        let topo = net.topology().unwrap();
        for (bus, &withdrawn) in p.iter().enumerate() {
            // KCL: withdrawal current = feeding branch current minus child branch currents
            let mut withdrawal = sol.branch_currents[topo.feeder_line[bus]];
            for (l, up) in topo.line_upstream.iter().enumerate() {
                if *up == Upstream::Bus(bus) {
                    withdrawal -= sol.branch_currents[l];
                }
            }
            let injection = -withdrawal;
            let s = (sol.voltages[bus] * injection.conj()).re;
            assert!(
                (s + withdrawn / net.base_power).abs() < 1e-6,
                "bus {bus}: {s}"
            );
        }
    }

    #[test]
    fn withdrawal_depresses_and_injection_raises() {
        let net = Network::chain(4, c(0.01, 0.01), 100.0);
        let load = solve_power_flow(&net, &[3.0, 1.0, 2.0, 4.0]).unwrap();
        assert!(load.voltage_magnitudes().all(|v| v <= 1.0));
        let gen = solve_power_flow(&net, &[-3.0, -1.0, -2.0, -4.0]).unwrap();
        assert!(gen.voltage_magnitudes().all(|v| v >= 1.0));
    }

    #[test]
    fn divergence_reported() {
        // 10 p.u. through 0.5 p.u. impedance has no solution
        let net = Network::chain(1, c(0.5, 0.5), 100.0);
        match solve_power_flow(&net, &[1000.0]) {
            Err(Error::PowerFlowDiverged { iterations, .. }) => {
                assert!(iterations <= MAX_ITERATIONS)
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn limit_report_examples() {
        let mut net = Network::chain(2, c(0.01, 0.0), 100.0);
        net.v_max = 1.0;
        let ok = PowerFlowSolution {
            voltages: vec![c(0.99, 0.0), c(0.98, 0.0)],
            branch_currents: vec![c(0.0, 0.0); 2],
            line_flows: vec![50.0, 20.0],
            converged: true,
            iterations: 1,
            residual: 0.0,
        };
        assert!(check_limits(&ok, &net).is_empty());

        let mut bad = ok.clone();
        bad.voltages[1] = c(1.02, 0.0);
        bad.line_flows[0] = 110.0;
        let report = check_limits(&bad, &net);
        assert_eq!(report.voltage.len(), 1);
        assert_eq!(report.voltage[0].bus, BusId(2));
        assert!((report.voltage[0].excess - 0.02).abs() < 1e-12);
        assert_eq!(report.flow.len(), 1);
        assert!((report.flow[0].excess - 10.0).abs() < 1e-12);

        let mut low = ok;
        low.voltages[0] = c(0.9, 0.0);
        low.line_flows[1] = -120.0;
        let report = check_limits(&low, &net);
        assert!((report.voltage[0].excess + 0.05).abs() < 1e-12);
        assert!((report.flow[0].excess + 20.0).abs() < 1e-12);
    }

    #[test]
    fn explicit_lower_flow_limit() {
        let mut net = Network::chain(1, c(0.01, 0.0), 100.0);
        net.lines[0] = Line {
            f_min: Some(-10.0),
            ..net.lines[0].clone()
        };
        let sol = solve_power_flow(&net, &[-20.0]).unwrap();
        let report = check_limits(&sol, &net);
        assert_eq!(report.flow.len(), 1);
        assert!(report.flow[0].excess < -9.0);
    }
}
