use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Scenario;
use crate::agents::{BuyerParams, SellerParams};
use crate::error::{Error, Result};
use crate::network::{BusId, Network};

/// Which end of the chain feeder the buyers occupy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Buyers on buses `1..=n_buyers`, sellers behind them at the far end.
    #[default]
    BuyersNearSlack,
    /// Sellers on buses `1..=n_sellers`, buyers at the far end.
    SellersNearSlack,
}

/// Uniform chain feeder used by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederSpec {
    /// Per-line series impedance, p.u.
    pub impedance: Complex64,
    /// Slack bus voltage magnitude, p.u.
    pub slack_voltage: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Per-line flow limit, kW.
    pub f_max: f64,
    pub base_power: f64,
    pub base_voltage: f64,
    pub layout: Layout,
}

impl Default for FeederSpec {
    fn default() -> Self {
        Self {
            impedance: Complex64::new(0.001, 0.001),
            slack_voltage: 0.982,
            v_min: 0.95,
            v_max: 1.05,
            f_max: 100.0,
            base_power: 100.0,
            base_voltage: 0.4,
            layout: Layout::BuyersNearSlack,
        }
    }
}

/// Intervals the player parameters are drawn from, uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawRanges {
    pub a: (f64, f64),
    pub b: (f64, f64),
    pub omega: (f64, f64),
    pub delta: (f64, f64),
    /// Supply and demand bounds `[min, max]` shared by every player, kW.
    pub power: (f64, f64),
}

impl Default for DrawRanges {
    fn default() -> Self {
        Self {
            a: (0.01, 0.9),
            b: (3.0, 8.0),
            omega: (13.0, 17.0),
            delta: (0.1, 0.9),
            power: (2.0, 4.0),
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws a market of `n_sellers + n_buyers` players on a chain feeder with
/// one player per bus. The same arguments always give the same scenario.
pub fn generate_scenario(
    n_sellers: usize,
    n_buyers: usize,
    seed: u64,
    feeder: &FeederSpec,
    ranges: &DrawRanges,
) -> Result<Scenario> {
    if n_sellers == 0 || n_buyers == 0 {
        return Err(Error::Contract(format!(
            "need at least one seller and one buyer, got {n_sellers} and {n_buyers}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_sellers + n_buyers;
    let (seller_first, buyer_first) = match feeder.layout {
        Layout::BuyersNearSlack => (n_buyers as u32 + 1, 1),
        Layout::SellersNearSlack => (1, n_sellers as u32 + 1),
    };

    let sellers = (0..n_sellers as u32)
        .map(|i| SellerParams {
            a: draw(&mut rng, ranges.a),
            b: draw(&mut rng, ranges.b),
            gamma: 0.0,
            s_min: ranges.power.0,
            s_max: ranges.power.1,
            node: BusId(seller_first + i),
        })
        .collect();
    let buyers = (0..n_buyers as u32)
        .map(|j| BuyerParams {
            omega: draw(&mut rng, ranges.omega),
            delta: draw(&mut rng, ranges.delta),
            d_min: ranges.power.0,
            d_max: ranges.power.1,
            node: BusId(buyer_first + j),
        })
        .collect();

    let mut network = Network::chain(n, feeder.impedance, feeder.f_max);
    network.slack_voltage = Complex64::new(feeder.slack_voltage, 0.0);
    network.v_min = feeder.v_min;
    network.v_max = feeder.v_max;
    network.base_power = feeder.base_power;
    network.base_voltage = feeder.base_voltage;

    let scenario = Scenario {
        network,
        sellers,
        buyers,
        label: format!("chain-{n_sellers}s-{n_buyers}b-seed{seed}"),
        seed: Some(seed),
    };
    scenario.validate()?;
    Ok(scenario)
}
