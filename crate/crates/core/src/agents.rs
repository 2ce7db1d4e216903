//! Market players: quadratic-cost sellers and saturating-utility buyers.
//!
//! Both kinds of player keep their coefficients private. The only thing a
//! player ever reveals is its best-response quantity to an effective price.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::BusId;

/// Private parameters of a seller with cost `a·s² + b·s + gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SellerParams {
    /// Cost curvature, $/kWh per kW.
    pub a: f64,
    /// Marginal cost intercept, $/kWh.
    pub b: f64,
    /// Fixed cost, $.
    pub gamma: f64,
    /// Minimum supply, kW.
    pub s_min: f64,
    /// Maximum supply, kW.
    pub s_max: f64,
    pub node: BusId,
}

/// Private parameters of a buyer with utility `omega·d − delta·d²`, flat
/// beyond the saturation point `omega / (2·delta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuyerParams {
    /// Marginal utility intercept, $/kWh.
    pub omega: f64,
    /// Utility curvature, $/kWh per kW.
    pub delta: f64,
    /// Minimum demand, kW.
    pub d_min: f64,
    /// Maximum demand, kW.
    pub d_max: f64,
    pub node: BusId,
}

fn check_quantity(q: f64, what: &str) -> Result<()> {
    if q.is_nan() || q < 0.0 {
        return Err(Error::Domain(format!(
            "{what} must be non-negative, got {q}"
        )));
    }
    Ok(())
}

impl SellerParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.a, self.b, self.gamma, self.s_min, self.s_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation(format!(
                "seller at {} has non-finite parameters",
                self.node
            )));
        }
        if self.a < 0.0 || self.gamma < 0.0 || self.s_min < 0.0 || self.s_min > self.s_max {
            return Err(Error::Validation(format!(
                "seller at {} needs a ≥ 0, gamma ≥ 0 and 0 ≤ s_min ≤ s_max",
                self.node
            )));
        }
        Ok(())
    }

    /// Production cost of supplying `s` kW.
    pub fn cost(&self, s: f64) -> Result<f64> {
        check_quantity(s, "supply")?;
        Ok(self.a * s * s + self.b * s + self.gamma)
    }

    /// Supply maximizing `s·price − cost(s)` over `[s_min, s_max]`.
    ///
    /// A linear-cost seller (`a == 0`) is bang-bang: full output strictly
    /// above its marginal cost, minimum output otherwise.
    pub fn best_response(&self, effective_price: f64) -> f64 {
        if self.a > 0.0 {
            ((effective_price - self.b) / (2.0 * self.a)).clamp(self.s_min, self.s_max)
        } else if effective_price > self.b {
            self.s_max
        } else {
            self.s_min
        }
    }

    /// Private welfare `s·price − cost(s)` at the given supply.
    pub fn surplus(&self, s: f64, effective_price: f64) -> Result<f64> {
        Ok(s * effective_price - self.cost(s)?)
    }
}

impl BuyerParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.omega, self.delta, self.d_min, self.d_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation(format!(
                "buyer at {} has non-finite parameters",
                self.node
            )));
        }
        if self.omega < 0.0 || self.delta <= 0.0 || self.d_min < 0.0 || self.d_min > self.d_max {
            return Err(Error::Validation(format!(
                "buyer at {} needs omega ≥ 0, delta > 0 and 0 ≤ d_min ≤ d_max",
                self.node
            )));
        }
        Ok(())
    }

    /// Consumption at which utility stops increasing.
    pub fn saturation(&self) -> f64 {
        self.omega / (2.0 * self.delta)
    }

    /// Utility of consuming `d` kW. The plateau value `omega² / (4·delta)`
    /// keeps the function continuous at the saturation point.
    pub fn utility(&self, d: f64) -> Result<f64> {
        check_quantity(d, "demand")?;
        if d < self.saturation() {
            Ok(self.omega * d - self.delta * d * d)
        } else {
            Ok(self.omega * self.omega / (4.0 * self.delta))
        }
    }

    /// Demand maximizing `utility(d) − d·price` over `[d_min, d_max]`.
    ///
    /// At a zero price every point of the plateau is optimal and the
    /// saturation point (the smallest of them) is returned. A negative price
    /// pays the buyer to consume, so it takes `d_max`.
    pub fn best_response(&self, effective_price: f64) -> f64 {
        let unconstrained = if effective_price > 0.0 {
            (self.omega - effective_price) / (2.0 * self.delta)
        } else if effective_price == 0.0 {
            self.saturation()
        } else {
            self.d_max
        };
        unconstrained.clamp(self.d_min, self.d_max)
    }

    /// Private welfare `utility(d) − d·price` at the given demand.
    pub fn surplus(&self, d: f64, effective_price: f64) -> Result<f64> {
        Ok(self.utility(d)? - d * effective_price)
    }
}

/// Social welfare `Σ U_j(d_j) − Σ C_i(s_i)`.
pub fn total_welfare(
    sellers: &[SellerParams],
    buyers: &[BuyerParams],
    supply: &[f64],
    demand: &[f64],
) -> Result<f64> {
    if sellers.len() != supply.len() || buyers.len() != demand.len() {
        return Err(Error::Contract(format!(
            "allocation lengths ({}, {}) do not match player counts ({}, {})",
            supply.len(),
            demand.len(),
            sellers.len(),
            buyers.len()
        )));
    }
    let mut welfare = 0.0;
    for (buyer, &d) in buyers.iter().zip(demand) {
        welfare += buyer.utility(d)?;
    }
    for (seller, &s) in sellers.iter().zip(supply) {
        welfare -= seller.cost(s)?;
    }
    Ok(welfare)
}
