use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use localmarket::oracle::{centralized_clear, gauss_seidel_power_flow};
use localmarket::powerflow::{MAX_ITERATIONS, TOLERANCE};
use localmarket::scenario_io::{
    generate_scenario, load_scenario, parse_injections, parse_seller_counts, save_scenario,
    sweep_sellers, write_players, write_sweep, write_trace, DrawRanges, FeederSpec, Layout,
};
use localmarket::{clear_market, solve_power_flow, ClearingConfig, Error};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAMBDA_GAP: f64 = 1e-3;
const ALLOCATION_GAP: f64 = 1e-2;
const LOAD_FLOW_GAP: f64 = 1e-8;

fn defaults_table() -> String {
    let c = ClearingConfig::default();
    let f = FeederSpec::default();
    let r = DrawRanges::default();
    format!(
        "Defaults:
  clearing    xi={}  lambda0={}  sigma_v={}  sigma_f={}  max_iter={}
              eps_balance=0.1% of total max demand  eps_price={:e}
              voltage band slack={} p.u.  flow slack={}%  divergence window={}
  feeder      line z={}+j{} p.u.  slack |V|={}  v_min={}  v_max={}  f_max={} kW
              base {} kVA / {} kV  layout=buyers-near-slack
  draws       a=[{}, {}]  b=[{}, {}]  omega=[{}, {}]  delta=[{}, {}]
              power bounds=[{}, {}] kW (sweep: [0, {}] kW)
  load flow   tolerance={:e} p.u.  max iterations={}
  compare     |dlambda| <= {:e}  max allocation gap <= {:e} kW
  exit codes  0 success, 1 input or usage error, 2 numerical non-convergence",
        c.xi,
        c.lambda0,
        c.sigma_v,
        c.sigma_f,
        c.max_iterations,
        c.eps_price,
        c.voltage_tolerance,
        100.0 * c.flow_tolerance,
        c.divergence_window,
        f.impedance.re,
        f.impedance.im,
        f.slack_voltage,
        f.v_min,
        f.v_max,
        f.f_max,
        f.base_power,
        f.base_voltage,
        r.a.0,
        r.a.1,
        r.b.0,
        r.b.1,
        r.omega.0,
        r.omega.1,
        r.delta.0,
        r.delta.1,
        r.power.0,
        r.power.1,
        r.power.1,
        TOLERANCE,
        MAX_ITERATIONS,
        LAMBDA_GAP,
        ALLOCATION_GAP,
    )
}

#[derive(Parser)]
#[command(
    name = "localmarket",
    version,
    about = "Local energy market clearing with network-aware price signals",
    after_help = defaults_table()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clear a market and print the outcome
    Clear {
        scenario: PathBuf,
        #[command(flatten)]
        clearing: ClearingArgs,
        /// Per-iteration trace CSV
        #[arg(long)]
        trace_csv: Option<PathBuf>,
        /// Final per-player allocation CSV
        #[arg(long)]
        players_csv: Option<PathBuf>,
    },
    /// Draw a random market on a chain feeder and save it
    Generate {
        #[arg(long)]
        sellers: usize,
        #[arg(long)]
        buyers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        feeder: FeederArgs,
        /// Lower supply/demand bound for every player, kW
        #[arg(long, default_value_t = DrawRanges::default().power.0)]
        min_power: f64,
        /// Upper supply/demand bound for every player, kW
        #[arg(long, default_value_t = DrawRanges::default().power.1)]
        max_power: f64,
    },
    /// Check the distributed clearing against the centralized optimum
    Compare {
        scenario: PathBuf,
        #[command(flatten)]
        clearing: ClearingArgs,
    },
    /// Clear generated markets over a range of seller counts
    Sweep {
        #[arg(long, default_value_t = 50)]
        total: usize,
        /// `start:end:step` or a comma-separated list
        #[arg(long, default_value = "5:45:5")]
        counts: String,
        /// Number of seeds per count, starting at 0
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        feeder: FeederArgs,
        #[command(flatten)]
        clearing: ClearingArgs,
        #[arg(long, default_value_t = 0.0)]
        min_power: f64,
        #[arg(long, default_value_t = DrawRanges::default().power.1)]
        max_power: f64,
    },
    /// Compare the direct load flow with Gauss-Seidel on a scenario's feeder
    PowerflowCheck {
        scenario: PathBuf,
        /// `zero`, `random`, or a `bus,withdrawal_kw` CSV path
        #[arg(long, default_value = "zero")]
        injections: String,
        /// Seed for `--injections random`
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct ClearingArgs {
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    eps_balance: Option<f64>,
    #[arg(long)]
    eps_price: Option<f64>,
    #[arg(long)]
    sigma_v: Option<f64>,
    #[arg(long)]
    sigma_f: Option<f64>,
    #[arg(long, value_enum)]
    network_signals: Option<Switch>,
}

impl ClearingArgs {
    fn config(&self) -> ClearingConfig {
        let d = ClearingConfig::default();
        ClearingConfig {
            xi: self.xi.unwrap_or(d.xi),
            lambda0: self.lambda0.unwrap_or(d.lambda0),
            max_iterations: self.max_iter.unwrap_or(d.max_iterations),
            eps_balance: self.eps_balance.or(d.eps_balance),
            eps_price: self.eps_price.unwrap_or(d.eps_price),
            sigma_v: self.sigma_v.unwrap_or(d.sigma_v),
            sigma_f: self.sigma_f.unwrap_or(d.sigma_f),
            network_signals: self
                .network_signals
                .map_or(d.network_signals, |s| matches!(s, Switch::On)),
            ..d
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    BuyersNearSlack,
    SellersNearSlack,
}

#[derive(Args)]
struct FeederArgs {
    /// Line resistance, p.u.
    #[arg(long, default_value_t = FeederSpec::default().impedance.re)]
    line_r: f64,
    /// Line reactance, p.u.
    #[arg(long, default_value_t = FeederSpec::default().impedance.im)]
    line_x: f64,
    /// Slack bus voltage magnitude, p.u.
    #[arg(long, default_value_t = FeederSpec::default().slack_voltage)]
    slack_voltage: f64,
    #[arg(long, default_value_t = FeederSpec::default().v_min)]
    v_min: f64,
    #[arg(long, default_value_t = FeederSpec::default().v_max)]
    v_max: f64,
    /// Per-line flow limit, kW
    #[arg(long, default_value_t = FeederSpec::default().f_max)]
    f_max: f64,
    #[arg(long, value_enum, default_value = "buyers-near-slack")]
    layout: LayoutArg,
}

impl FeederArgs {
    fn spec(&self) -> FeederSpec {
        FeederSpec {
            impedance: Complex64::new(self.line_r, self.line_x),
            slack_voltage: self.slack_voltage,
            v_min: self.v_min,
            v_max: self.v_max,
            f_max: self.f_max,
            layout: match self.layout {
                LayoutArg::BuyersNearSlack => Layout::BuyersNearSlack,
                LayoutArg::SellersNearSlack => Layout::SellersNearSlack,
            },
            ..FeederSpec::default()
        }
    }
}

fn ranges(min_power: f64, max_power: f64) -> DrawRanges {
    DrawRanges {
        power: (min_power, max_power),
        ..DrawRanges::default()
    }
}

/// Exit status of a finished command.
enum Outcome {
    Ok,
    NotConverged,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::PowerFlowDiverged { .. } | Error::StepSize { .. } => 2,
        _ => 1,
    }
}

fn cmd_clear(
    path: &Path,
    clearing: &ClearingArgs,
    trace_csv: Option<&Path>,
    players_csv: Option<&Path>,
) -> Result<Outcome, Error> {
    let scenario = load_scenario(path)?;
    let config = clearing.config();
    let started = Instant::now();
    let result = clear_market(&scenario, &config)?;
    let runtime = started.elapsed().as_secs_f64();
    println!("lambda_star={}", result.lambda_star);
    println!("total_supply_kw={}", result.total_supply());
    println!("total_demand_kw={}", result.total_demand());
    println!("iterations={}", result.iterations);
    println!("converged={}", result.converged);
    println!("min_voltage_pu={}", result.final_solution.min_voltage());
    println!("max_voltage_pu={}", result.final_solution.max_voltage());
    println!("runtime_s={runtime:.6}");
    if let Some(p) = trace_csv {
        write_trace(&result, p)?;
    }
    if let Some(p) = players_csv {
        write_players(&result, &scenario, p)?;
    }
    Ok(if result.converged {
        Outcome::Ok
    } else {
        Outcome::NotConverged
    })
}

fn cmd_compare(path: &Path, clearing: &ClearingArgs) -> Result<Outcome, Error> {
    let scenario = load_scenario(path)?;
    let config = ClearingConfig {
        network_signals: false,
        ..clearing.config()
    };
    let central = centralized_clear(&scenario)?;
    let dist = clear_market(&scenario, &config)?;
    let d_lambda = (dist.lambda_star - central.lambda).abs();
    let gap = dist
        .supply
        .iter()
        .zip(&central.supply)
        .chain(dist.demand.iter().zip(&central.demand))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let agree = dist.converged && d_lambda <= LAMBDA_GAP && gap <= ALLOCATION_GAP;
    println!("lambda_distributed={}", dist.lambda_star);
    println!("lambda_centralized={}", central.lambda);
    println!("lambda_diff={d_lambda:e}");
    println!("max_allocation_gap_kw={gap:e}");
    println!("converged={}", dist.converged);
    println!("agree={agree}");
    Ok(if agree {
        Outcome::Ok
    } else {
        Outcome::NotConverged
    })
}

fn cmd_powerflow_check(path: &Path, injections: &str, seed: u64) -> Result<Outcome, Error> {
    let scenario = load_scenario(path)?;
    let network = &scenario.network;
    let n = network.buses.len();
    let withdrawals = match injections {
        "zero" => vec![0.0; n],
        "random" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.random_range(-4.0..6.0)).collect()
        }
        csv_path => {
            let text = std::fs::read_to_string(csv_path).map_err(|source| Error::Io {
                path: csv_path.into(),
                source,
            })?;
            parse_injections(&text, network)?
        }
    };
    let dlf = solve_power_flow(network, &withdrawals)?;
    let gs = gauss_seidel_power_flow(network, &withdrawals)?;
    let diff = dlf
        .voltages
        .iter()
        .zip(&gs.voltages)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    println!("buses={n}");
    println!("dlf_iterations={}", dlf.iterations);
    println!("gauss_seidel_sweeps={}", gs.iterations);
    println!("max_voltage_diff_pu={diff:e}");
    Ok(if diff <= LOAD_FLOW_GAP {
        Outcome::Ok
    } else {
        Outcome::NotConverged
    })
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::Clear {
            scenario,
            clearing,
            trace_csv,
            players_csv,
        } => cmd_clear(
            &scenario,
            &clearing,
            trace_csv.as_deref(),
            players_csv.as_deref(),
        ),
        Command::Generate {
            sellers,
            buyers,
            seed,
            out,
            feeder,
            min_power,
            max_power,
        } => {
            let s = generate_scenario(
                sellers,
                buyers,
                seed,
                &feeder.spec(),
                &ranges(min_power, max_power),
            )?;
            save_scenario(&s, &out)?;
            println!("label={}", s.label);
            println!("buses={}", s.network.buses.len());
            println!("out={}", out.display());
            Ok(Outcome::Ok)
        }
        Command::Compare { scenario, clearing } => cmd_compare(&scenario, &clearing),
        Command::Sweep {
            total,
            counts,
            seeds,
            out,
            feeder,
            clearing,
            min_power,
            max_power,
        } => {
            let counts = parse_seller_counts(&counts)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let rows = sweep_sellers(
                total,
                &counts,
                &seeds,
                &feeder.spec(),
                &ranges(min_power, max_power),
                &clearing.config(),
            )?;
            write_sweep(&rows, &out)?;
            println!("rows={}", rows.len());
            println!("converged={}", rows.iter().filter(|r| r.converged).count());
            println!("out={}", out.display());
            Ok(Outcome::Ok)
        }
        Command::PowerflowCheck {
            scenario,
            injections,
            seed,
        } => cmd_powerflow_check(&scenario, &injections, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
