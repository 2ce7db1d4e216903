//! Reference solvers that share no code path with the distributed loop or
//! the direct load flow: price bisection on aggregate excess supply,
//! exhaustive grid search over allocations, and bus-admittance Gauss-Seidel.

use num_complex::Complex64;

use crate::agents::total_welfare;
use crate::error::{Error, Result};
use crate::network::{Network, Upstream};
use crate::powerflow::{sending_end_flows, PowerFlowSolution};
use crate::scenario_io::Scenario;

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedSolution {
    pub lambda: f64,
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
}

fn excess_supply(scenario: &Scenario, lambda: f64) -> f64 {
    let supply: f64 = scenario
        .sellers
        .iter()
        .map(|s| s.best_response(lambda))
        .sum();
    let demand: f64 = scenario
        .buyers
        .iter()
        .map(|b| b.best_response(lambda))
        .sum();
    supply - demand
}

/// Welfare-maximizing clearing with full knowledge of every player's
/// parameters, found by bisecting the (nondecreasing) excess supply in price.
pub fn centralized_clear(scenario: &Scenario) -> Result<CentralizedSolution> {
    scenario.validate()?;
    let seller_top = scenario
        .sellers
        .iter()
        .map(|s| s.b + 2.0 * s.a * s.s_max)
        .fold(f64::NEG_INFINITY, f64::max);
    let buyer_top = scenario
        .buyers
        .iter()
        .map(|b| b.omega)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (0.0, seller_top.max(buyer_top) + 1.0);

    let (e_lo, e_hi) = (excess_supply(scenario, lo), excess_supply(scenario, hi));
    if e_lo > 0.0 || e_hi < 0.0 {
        return Err(Error::Infeasible(format!(
            "excess supply has no sign change on [0, {hi}]: E(0) = {e_lo}, E(hi) = {e_hi}"
        )));
    }
    let mut lambda = if e_lo == 0.0 { lo } else { hi };
    if e_lo != 0.0 && e_hi != 0.0 {
        loop {
            let mid = 0.5 * (lo + hi);
            let e = excess_supply(scenario, mid);
            if e.abs() <= 1e-6 || hi - lo <= 1e-9 {
                lambda = mid;
                break;
            }
            if e > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    Ok(CentralizedSolution {
        lambda,
        supply: scenario
            .sellers
            .iter()
            .map(|s| s.best_response(lambda))
            .collect(),
        demand: scenario
            .buyers
            .iter()
            .map(|b| b.best_response(lambda))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceSolution {
    pub welfare: f64,
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
}

/// Practical cap on the number of enumerated grid points.
pub const BRUTE_FORCE_CAP: f64 = 1e7;

fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=count).map(|k| lo + k as f64 * step).collect()
}

/// Exhaustive search over grid allocations that balance supply and demand
/// to within half a step. Intended for a handful of players.
///
/// Every player but the last buyer is enumerated; the last buyer takes the
/// grid point closest to the residual. Ties keep the first point found.
pub fn brute_force_clear(scenario: &Scenario, grid_step: f64) -> Result<BruteForceSolution> {
    scenario.validate()?;
    if !grid_step.is_finite() || grid_step <= 0.0 {
        return Err(Error::Contract("grid step must be positive".into()));
    }
    let (n_s, n_b) = (scenario.sellers.len(), scenario.buyers.len());
    let mut axes: Vec<Vec<f64>> = scenario
        .sellers
        .iter()
        .map(|s| (s.s_min, s.s_max))
        .chain(scenario.buyers.iter().map(|b| (b.d_min, b.d_max)))
        .map(|(lo, hi)| grid(lo, hi, grid_step))
        .collect();
    let last = axes.pop().expect("at least one buyer");
    let points: f64 = axes.iter().map(|a| a.len() as f64).product();
    if points > BRUTE_FORCE_CAP {
        return Err(Error::GridTooLarge {
            points,
            cap: BRUTE_FORCE_CAP,
        });
    }
    let last_buyer = &scenario.buyers[n_b - 1];

    let mut best: Option<BruteForceSolution> = None;
    let mut index = vec![0usize; axes.len()];
    let mut supply = vec![0.0; n_s];
    let mut demand = vec![0.0; n_b];
    'outer: loop {
        for (k, &i) in index.iter().enumerate() {
            if k < n_s {
                supply[k] = axes[k][i];
            } else {
                demand[k - n_s] = axes[k][i];
            }
        }
        let residual = supply.iter().sum::<f64>() - demand[..n_b - 1].iter().sum::<f64>();
        let k = ((residual - last_buyer.d_min) / grid_step).round();
        if k >= 0.0 && (k as usize) < last.len() {
            let d = last[k as usize];
            if (residual - d).abs() <= grid_step / 2.0 {
                demand[n_b - 1] = d;
                let welfare = total_welfare(&scenario.sellers, &scenario.buyers, &supply, &demand)?;
                if best.as_ref().is_none_or(|b| welfare > b.welfare) {
                    best = Some(BruteForceSolution {
                        welfare,
                        supply: supply.clone(),
                        demand: demand.clone(),
                    });
                }
            }
        }
        // odometer increment, last axis fastest
        for pos in (0..index.len()).rev() {
            index[pos] += 1;
            if index[pos] < axes[pos].len() {
                continue 'outer;
            }
            index[pos] = 0;
        }
        break;
    }
    best.ok_or_else(|| Error::Infeasible("no balanced allocation on the grid".into()))
}

/// Sweep cap for [`gauss_seidel_power_flow`].
pub const GAUSS_SEIDEL_MAX_SWEEPS: usize = 10_000;
/// Bus power mismatch at which Gauss-Seidel stops, p.u.
pub const GAUSS_SEIDEL_TOLERANCE: f64 = 1e-10;

/// Solves the bus power balance `V_n · conj((Y V)_n) = −P_n` by
/// accelerated Gauss-Seidel sweeps over the bus admittance matrix, from a
/// flat start.
/// Withdrawals are in kW, as for the direct load flow.
pub fn gauss_seidel_power_flow(
    network: &Network,
    withdrawals_kw: &[f64],
) -> Result<PowerFlowSolution> {
    network.validate()?;
    let topo = network.topology()?;
    let n = topo.bus_count();
    if withdrawals_kw.len() != n {
        return Err(Error::Contract(format!(
            "{} withdrawals for {} buses",
            withdrawals_kw.len(),
            n
        )));
    }
    let v0 = network.slack_voltage;
    // node n is the slack
    let mut neighbours: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); n + 1];
    for (l, line) in network.lines.iter().enumerate() {
        let y = line.impedance().inv();
        let down = topo.line_to_bus[l];
        let up = match topo.line_upstream[l] {
            Upstream::Slack => n,
            Upstream::Bus(u) => u,
        };
        neighbours[down].push((up, y));
        neighbours[up].push((down, y));
    }
    let self_admittance: Vec<Complex64> = neighbours
        .iter()
        .map(|adj| adj.iter().map(|&(_, y)| y).sum())
        .collect();
    let injection: Vec<Complex64> = withdrawals_kw
        .iter()
        .map(|p| Complex64::new(-p / network.base_power, 0.0))
        .collect();

    // acceleration factor: the optimal over-relaxation for a path as long as
    // the deepest branch; 1 (plain Gauss-Seidel) when every bus hangs off
    // the slack
    let depth = topo.depth.iter().copied().max().unwrap_or(1) as f64;
    let alpha = 2.0 / (1.0 + (std::f64::consts::PI / (depth + 1.0)).sin());

    let mut v = vec![v0; n + 1];
    let mut mismatch = f64::INFINITY;
    for sweep in 1..=GAUSS_SEIDEL_MAX_SWEEPS {
        for &bus in &topo.order {
            let coupled: Complex64 = neighbours[bus].iter().map(|&(m, y)| y * v[m]).sum();
            let update = ((injection[bus] / v[bus]).conj() + coupled) / self_admittance[bus];
            let old = v[bus];
            v[bus] = old + alpha * (update - old);
        }
        mismatch = (0..n)
            .map(|bus| {
                let current = self_admittance[bus] * v[bus]
                    - neighbours[bus]
                        .iter()
                        .map(|&(m, y)| y * v[m])
                        .sum::<Complex64>();
                (v[bus] * current.conj() - injection[bus]).norm()
            })
            .fold(0.0, f64::max);
        if !mismatch.is_finite() {
            break;
        }
        if mismatch <= GAUSS_SEIDEL_TOLERANCE {
            let voltages = v[..n].to_vec();
            let branch_currents: Vec<Complex64> = network
                .lines
                .iter()
                .enumerate()
                .map(|(l, line)| {
                    let up = match topo.line_upstream[l] {
                        Upstream::Slack => v0,
                        Upstream::Bus(u) => v[u],
                    };
                    (up - v[topo.line_to_bus[l]]) / line.impedance()
                })
                .collect();
            let line_flows = sending_end_flows(network, &topo, &voltages, &branch_currents);
            return Ok(PowerFlowSolution {
                voltages,
                branch_currents,
                line_flows,
                converged: true,
                iterations: sweep,
                residual: mismatch,
            });
        }
    }
    Err(Error::PowerFlowDiverged {
        iterations: GAUSS_SEIDEL_MAX_SWEEPS,
        residual: mismatch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{BuyerParams, SellerParams};
    use crate::network::BusId;
    use crate::powerflow::solve_power_flow;
    use proptest::prelude::*;

    fn market(sellers: Vec<SellerParams>, buyers: Vec<BuyerParams>) -> Scenario {
        let n = sellers.len() + buyers.len();
        Scenario {
            network: Network::chain(n, Complex64::new(0.001, 0.001), 100.0),
            sellers,
            buyers,
            label: String::new(),
            seed: None,
        }
    }

    fn seller(a: f64, b: f64, lo: f64, hi: f64, node: u32) -> SellerParams {
        SellerParams {
            a,
            b,
            gamma: 0.0,
            s_min: lo,
            s_max: hi,
            node: BusId(node),
        }
    }

    fn buyer(omega: f64, delta: f64, lo: f64, hi: f64, node: u32) -> BuyerParams {
        BuyerParams {
            omega,
            delta,
            d_min: lo,
            d_max: hi,
            node: BusId(node),
        }
    }

    fn one_by_one() -> Scenario {
        market(
            vec![seller(0.5, 5.0, 0.0, 10.0, 2)],
            vec![buyer(15.0, 0.5, 0.0, 20.0, 1)],
        )
    }

    #[test]
    fn centralized_one_by_one() {
        let sol = centralized_clear(&one_by_one()).unwrap();
        assert!((sol.lambda - 10.0).abs() < 1e-6);
        assert!((sol.supply[0] - 5.0).abs() < 1e-6);
        assert!((sol.demand[0] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn centralized_symmetric_pair() {
        // marginal cost 4 + s, marginal utility 12 − d: cross at s = d = 4, price 8
        let s = market(
            vec![seller(0.5, 4.0, 0.0, 10.0, 2)],
            vec![buyer(12.0, 0.5, 0.0, 10.0, 1)],
        );
        let sol = centralized_clear(&s).unwrap();
        assert!((sol.lambda - 8.0).abs() < 1e-6);
    }

    #[test]
    fn centralized_infeasible() {
        let mut s = one_by_one();
        // buyer never wants more than 1 kW even at price zero; seller must deliver 3
        s.buyers[0].omega = 1.0;
        s.sellers[0].s_min = 3.0;
        assert!(matches!(centralized_clear(&s), Err(Error::Infeasible(_))));
    }

    #[test]
    fn brute_force_one_by_one() {
        let sol = brute_force_clear(&one_by_one(), 0.01).unwrap();
        assert!((sol.supply[0] - 5.0).abs() < 1e-9);
        assert!((sol.demand[0] - 5.0).abs() < 1e-9);
        assert!((sol.welfare - 25.0).abs() < 1e-9);
    }

    #[test]
    fn brute_force_degenerate_bounds() {
        let s = market(
            vec![seller(0.5, 5.0, 3.0, 3.0, 2)],
            vec![buyer(15.0, 0.5, 3.0, 3.0, 1)],
        );
        let sol = brute_force_clear(&s, 0.01).unwrap();
        assert_eq!((sol.supply[0], sol.demand[0]), (3.0, 3.0));
    }

    #[test]
    fn brute_force_errors() {
        let s = market(
            vec![seller(0.5, 5.0, 6.0, 8.0, 2)],
            vec![buyer(15.0, 0.5, 1.0, 2.0, 1)],
        );
        assert!(matches!(
            brute_force_clear(&s, 0.01),
            Err(Error::Infeasible(_))
        ));

        let big = market(
            vec![
                seller(0.5, 5.0, 0.0, 100.0, 3),
                seller(0.5, 5.0, 0.0, 100.0, 4),
            ],
            vec![
                buyer(15.0, 0.5, 0.0, 100.0, 1),
                buyer(15.0, 0.5, 0.0, 100.0, 2),
            ],
        );
        assert!(matches!(
            brute_force_clear(&big, 0.01),
            Err(Error::GridTooLarge { .. })
        ));
    }

    #[test]
    fn centralized_matches_brute_force_two_by_two() {
        let s = market(
            // optimum near λ = 7.6, s = (4.50, 3.28), d = (5.33, 2.44), all interior
            vec![seller(0.4, 4.0, 4.0, 5.0, 3), seller(0.7, 3.0, 2.8, 3.8, 4)],
            vec![buyer(14.0, 0.6, 4.8, 5.8, 1), buyer(12.0, 0.9, 2.0, 3.0, 2)],
        );
        let central = centralized_clear(&s).unwrap();
        let central_welfare =
            total_welfare(&s.sellers, &s.buyers, &central.supply, &central.demand).unwrap();
        let brute = brute_force_clear(&s, 0.01).unwrap();
        assert!(brute.welfare <= central_welfare + 1e-9);
        assert!(central_welfare - brute.welfare <= 1e-3);
    }

    #[test]
    fn gauss_seidel_two_bus() {
        let net = Network::chain(1, Complex64::new(0.01, 0.0), 100.0);
        let sol = gauss_seidel_power_flow(&net, &[10.0]).unwrap();
        let expected = (1.0 + (1.0f64 - 0.004).sqrt()) / 2.0;
        assert!((sol.voltages[0].re - expected).abs() < 1e-9);
    }

    #[test]
    fn gauss_seidel_flat_start_no_load() {
        let net = Network::chain(4, Complex64::new(0.01, 0.02), 100.0);
        let sol = gauss_seidel_power_flow(&net, &[0.0; 4]).unwrap();
        assert!(sol
            .voltages
            .iter()
            .all(|v| (v - net.slack_voltage).norm() < 1e-12));
    }

    #[test]
    fn gauss_seidel_matches_direct_on_mixed_chain() {
        let net = Network::chain(3, Complex64::new(0.01, 0.01), 100.0);
        let p = [4.0, -6.0, 3.0];
        let gs = gauss_seidel_power_flow(&net, &p).unwrap();
        let dlf = solve_power_flow(&net, &p).unwrap();
        for (a, b) in gs.voltages.iter().zip(&dlf.voltages) {
            assert!((a - b).norm() <= 1e-8, "{a} vs {b}");
        }
        for (a, b) in gs.line_flows.iter().zip(&dlf.line_flows) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn excess_supply_nondecreasing(
            a in proptest::collection::vec(0.0..1.0f64, 3),
            b in proptest::collection::vec(2.0..9.0f64, 3),
            omega in proptest::collection::vec(10.0..18.0f64, 3),
            delta in proptest::collection::vec(0.1..1.0f64, 3),
            p1 in 0.0..30.0f64,
            p2 in 0.0..30.0f64,
        ) {
            let sellers = (0..3).map(|i| seller(a[i], b[i], 1.0, 4.0, 4 + i as u32)).collect();
            let buyers = (0..3).map(|j| buyer(omega[j], delta[j], 1.0, 4.0, 1 + j as u32)).collect();
            let s = market(sellers, buyers);
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(excess_supply(&s, lo) <= excess_supply(&s, hi));
        }
    }
}
