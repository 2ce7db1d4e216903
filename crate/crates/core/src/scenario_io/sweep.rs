use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::{generate_scenario, DrawRanges, FeederSpec};
use crate::coordinator::{clear_market, ClearingConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n_sellers: usize,
    pub n_buyers: usize,
    pub seed: u64,
    pub lambda_star: f64,
    pub iterations: usize,
    pub runtime_s: f64,
    pub converged: bool,
}

/// Parses `start:end:step` (inclusive) or a comma-separated list.
pub fn parse_seller_counts(spec: &str) -> Result<Vec<usize>> {
    let bad = |message: String| Error::Parse {
        path: "counts".into(),
        message,
    };
    let number = |s: &str| -> Result<usize> {
        s.trim()
            .parse::<usize>()
            .map_err(|e| bad(format!("`{}`: {e}", s.trim())))
    };
    let counts = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let [start, end, step] = parts.as_slice() else {
            return Err(bad(format!("expected start:end:step, got `{spec}`")));
        };
        let (start, end, step) = (number(start)?, number(end)?, number(step)?);
        if step == 0 || start > end {
            return Err(bad(format!("empty or unbounded range `{spec}`")));
        }
        (start..=end).step_by(step).collect()
    } else {
        spec.split(',').map(number).collect::<Result<Vec<_>>>()?
    };
    if counts.is_empty() {
        return Err(bad("no counts given".into()));
    }
    Ok(counts)
}

/// Clears one generated market per `(count, seed)` with `count` sellers out
/// of `total_players`. Rows are ordered by count, then seed.
pub fn sweep_sellers(
    total_players: usize,
    seller_counts: &[usize],
    seeds: &[u64],
    feeder: &FeederSpec,
    ranges: &DrawRanges,
    config: &ClearingConfig,
) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = seller_counts
        .iter()
        .find(|&&c| c == 0 || c >= total_players)
    {
        return Err(Error::Contract(format!(
            "seller count {bad} leaves no sellers or no buyers among {total_players} players"
        )));
    }
    let mut rows = Vec::with_capacity(seller_counts.len() * seeds.len());
    for &n_sellers in seller_counts {
        for &seed in seeds {
            let n_buyers = total_players - n_sellers;
            let scenario = generate_scenario(n_sellers, n_buyers, seed, feeder, ranges)?;
            let started = Instant::now();
            let result = clear_market(&scenario, config)?;
            rows.push(SweepRow {
                n_sellers,
                n_buyers,
                seed,
                lambda_star: result.lambda_star,
                iterations: result.iterations,
                runtime_s: started.elapsed().as_secs_f64(),
                converged: result.converged,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
