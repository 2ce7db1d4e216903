use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::Scenario;
use crate::coordinator::ClearingResult;
use crate::error::{Error, Result};

pub const TRACE_HEADER: [&str; 11] = [
    "iteration",
    "lambda",
    "total_supply_kw",
    "total_demand_kw",
    "mismatch_kw",
    "min_voltage_pu",
    "max_voltage_pu",
    "max_line_loading_pct",
    "omega_total",
    "rho_total",
    "transfer_imbalance",
];

pub const PLAYER_HEADER: [&str; 5] = [
    "player_id",
    "role",
    "node",
    "allocation_kw",
    "effective_price",
];

/// Writes one CSV row per clearing round. A trailing `# converged=...`
/// comment line follows a non-empty trace.
pub fn write_trace(result: &ClearingResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(TRACE_HEADER)?;
    for t in &result.trace {
        writer.write_record([
            t.iteration.to_string(),
            t.lambda.to_string(),
            t.total_supply.to_string(),
            t.total_demand.to_string(),
            t.mismatch.to_string(),
            t.min_voltage.to_string(),
            t.max_voltage.to_string(),
            t.max_line_loading_pct.to_string(),
            t.omega_total.to_string(),
            t.rho_total.to_string(),
            t.transfer_imbalance.to_string(),
        ])?;
    }
    let mut file = writer
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    if !result.trace.is_empty() {
        writeln!(
            file,
            "# converged={},iterations={}",
            result.converged, result.iterations
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Final allocation and effective price of every player.
pub fn write_players(
    result: &ClearingResult,
    scenario: &Scenario,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(PLAYER_HEADER)?;
    let state = &result.final_state;
    for (i, seller) in scenario.sellers.iter().enumerate() {
        writer.write_record([
            format!("s{i}"),
            "seller".into(),
            seller.node.0.to_string(),
            result.supply[i].to_string(),
            (state.lambda + state.omega_signal[i]).to_string(),
        ])?;
    }
    for (j, buyer) in scenario.buyers.iter().enumerate() {
        writer.write_record([
            format!("b{j}"),
            "buyer".into(),
            buyer.node.0.to_string(),
            result.demand[j].to_string(),
            (state.lambda + state.rho_signal[j]).to_string(),
        ])?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordinator::{clear_market, ClearingConfig};
    use crate::scenario_io::{generate_scenario, DrawRanges, FeederSpec};

    fn run(max_iterations: usize) -> (Scenario, ClearingResult) {
        let s = generate_scenario(3, 3, 5, &FeederSpec::default(), &DrawRanges::default()).unwrap();
        let config = ClearingConfig {
            max_iterations,
            ..ClearingConfig::default()
        };
        let r = clear_market(&s, &config).unwrap();
        (s, r)
    }

    #[test]
    fn trace_rows_match_iterations() {
        let (_, r) = run(5000);
        assert!(r.converged);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace(&r, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRACE_HEADER.join(","));
        assert_eq!(lines.len(), r.iterations + 2);
        assert!(lines.last().unwrap().starts_with("# converged=true"));
        let last_row: Vec<&str> = lines[lines.len() - 2].split(',').collect();
        let mismatch: f64 = last_row[4].parse().unwrap();
        assert!(mismatch.abs() <= ClearingConfig::default().balance_tolerance(&run(1).0));
    }

    #[test]
    fn unconverged_trace_is_flagged() {
        let (_, r) = run(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace(&r, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.trim_end().ends_with("# converged=false,iterations=3"));
    }

    #[test]
    fn empty_trace_is_header_only() {
        let (_, mut r) = run(1);
        r.trace.clear();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace(&r, &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            TRACE_HEADER.join(",") + "\n"
        );
    }

    #[test]
    fn player_file_lists_everyone() {
        let (s, r) = run(5000);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("players.csv");
        write_players(&r, &s, &path).unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        assert_eq!(reader.headers().unwrap(), PLAYER_HEADER.as_slice());
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 6);
        assert_eq!(&rows[0][1], "seller");
        assert_eq!(&rows[3][1], "buyer");
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let (_, r) = run(1);
        let err = write_trace(&r, "/nonexistent-dir/trace.csv").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
