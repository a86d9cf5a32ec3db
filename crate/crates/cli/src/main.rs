use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use cbf_deadlock::deadlock::{
    cat_b_parametrized, classify_three_robot, collinear_family, family_report, three_robot_family_cat_a,
    three_robot_family_cat_b,
};
use cbf_deadlock::graphenum::{census_table, MAX_ADMISSIBLE};
use cbf_deadlock::sim::{audit_log, export_log, load_log, simulate, LogFormat, Scenario, Termination};
use cbf_deadlock::{Error, GoalSpec, Params, Result, Vec2, WorldState};
use clap::{Parser, Subcommand, ValueEnum};

/// Deadlock analysis and resolution for CBF-QP multirobot control.
#[derive(Parser)]
#[command(name = "cbf-deadlock", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file and export the trajectory log.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Construct an analytical deadlock state and report its verification.
    Families {
        #[arg(value_enum)]
        family: Family,
        /// Collinear family parameter, or the chain angle for `three-b-param`.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        theta: Option<f64>,
        /// Goal radius (three robots) or half goal distance (two robots).
        #[arg(long = "R", alias = "r")]
        r: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        kp: f64,
        #[arg(long, default_value_t = 3.0)]
        kv: f64,
        #[arg(long, default_value_t = 0.5)]
        ds: f64,
        /// Acceleration limit shared by all robots.
        #[arg(long, default_value_t = 5.0)]
        accel: f64,
    },
    /// Print the deadlock-configuration enumeration table.
    Census {
        #[arg(long, default_value_t = 4)]
        n_max: usize,
        #[arg(long, default_value_t = 200)]
        attempts: usize,
        #[arg(long, default_value_t = 0.5)]
        ds: f64,
    },
    /// Audit a JSON trajectory log for safety and KKT consistency.
    Verify { log: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Two,
    #[value(name = "threeA")]
    ThreeA,
    #[value(name = "threeB")]
    ThreeB,
    #[value(name = "threeB-param")]
    ThreeBParam,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Solver(e.to_string()))?;
    writeln!(std::io::stdout(), "{text}").map_err(|source| Error::Io { path: "<stdout>".into(), source })
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run { scenario, out, format } => run(&scenario, out, format),
        Command::Families { family, alpha, theta, r, kp, kv, ds, accel } => {
            families(family, alpha, theta, r, kp, kv, ds, accel)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Census { n_max, attempts, ds } => {
            if n_max == 0 || n_max > MAX_ADMISSIBLE {
                return Err(Error::OutOfRange(format!("--n-max must lie in 1..={MAX_ADMISSIBLE}")));
            }
            if attempts == 0 {
                return Err(Error::OutOfRange("--attempts must be >= 1".into()));
            }
            println!("{:>3} {:>8} {:>10} {:>11} {:>6}", "N", "upper", "connected", "admissible", "lower");
            for row in census_table(n_max, ds, attempts)? {
                println!("{:>3} {:>8} {:>10} {:>11} {:>6}", row.n, row.upper, row.connected, row.admissible, row.lower);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { log } => {
            let log = load_log(&log)?;
            let rep = audit_log(&log)?;
            print_json(&rep)?;
            Ok(if rep.passes(-1e-3, 1e-8) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn run(path: &std::path::Path, out: Option<PathBuf>, format: Format) -> Result<ExitCode> {
    let scenario = Scenario::load(path)?;
    let outcome = simulate(&scenario);
    if let Some(out) = &out {
        let fmt = match format {
            Format::Csv => LogFormat::Csv,
            Format::Json => LogFormat::Json,
        };
        export_log(&outcome.log, fmt, out)?;
    }
    let summary = serde_json::json!({
        "termination": outcome.log.termination,
        "steps": outcome.log.records.len(),
        "events": outcome.log.events,
        "final_state": outcome.log.final_world(),
    });
    print_json(&summary)?;
    match outcome.abort {
        Some(e) => Err(e),
        None => {
            debug_assert!(!matches!(outcome.log.termination, Termination::Aborted { .. }));
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn families(
    family: Family,
    alpha: Option<f64>,
    theta: Option<f64>,
    r: Option<f64>,
    kp: f64,
    kv: f64,
    ds: f64,
    accel: f64,
) -> Result<()> {
    let (params, world, goals) = match family {
        Family::Two => {
            let params = Params::uniform(kp, kv, ds, accel, 2)?;
            let half = r.unwrap_or(1.0);
            let goals = GoalSpec::new(vec![Vec2::new(-half, 0.0), Vec2::new(half, 0.0)])?;
            let st = collinear_family(&goals, &params, alpha.unwrap_or(0.5))?;
            (params, WorldState::new(st.to_vec()), goals)
        }
        Family::ThreeA => {
            let params = Params::uniform(kp, kv, ds, accel, 3)?;
            let (w, g) = three_robot_family_cat_a(&params, r.unwrap_or(2.0))?;
            (params, w, g)
        }
        Family::ThreeB => {
            let params = Params::uniform(kp, kv, ds, accel, 3)?;
            let (w, g) = three_robot_family_cat_b(&params, r.unwrap_or(2.0))?;
            (params, w, g)
        }
        Family::ThreeBParam => {
            let params = Params::uniform(kp, kv, ds, accel, 3)?;
            let (w, g) =
                cat_b_parametrized(&params, r.unwrap_or(2.0), theta.unwrap_or(-PI / 12.0), alpha.unwrap_or(PI / 3.0))?;
            (params, w, g)
        }
    };
    let report = family_report(&world, &goals, &params)?;
    let category = if world.len() == 3 { Some(classify_three_robot(&world, params.ds, 1e-6 * params.ds)?) } else { None };
    print_json(&serde_json::json!({ "category": category, "report": report }))
}
