use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fccbf::bench::{self, DesignRecord, Verdict};
use fccbf::error::Error;
use fccbf::scenario::load_scenario;

/// Safety filters with a convergence deadline: design feasible gains,
/// simulate scenarios, and re-check the exported artifacts.
#[derive(Parser)]
#[command(name = "fccbf", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate every run of a scenario and export CSV/JSON artifacts
    Run {
        /// Scenario TOML file
        scenario: PathBuf,
        /// Output directory (default: out/<scenario name>)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the random-init seed (rejected for fixed-init scenarios)
        #[arg(long)]
        seed: Option<u64>,
        /// Override the integration step
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Print the feasible gain interval and the validity report
    Design {
        /// Scenario TOML file
        scenario: PathBuf,
    },
    /// Re-check the invariants of a previously exported output directory
    Verify {
        /// Directory written by `fccbf run`
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> fccbf::Result<u8> {
    match cli.cmd {
        Cmd::Run { scenario, out, seed, dt } => {
            let mut sc = load_scenario(&scenario)?;
            if let Some(seed) = seed {
                sc.set_seed(seed)?;
            }
            if let Some(dt) = dt {
                sc.set_dt(dt)?;
            }
            let out_dir = out.unwrap_or_else(|| PathBuf::from("out").join(&sc.name));
            let result = bench::run_batch(&sc)?;
            bench::export(&result, &out_dir)?;

            for rec in &result.summary.runs {
                let detail = match &rec.error {
                    Some(e) => format!("error: {e}"),
                    None => format!(
                        "h(t_f) = {}, min_b = {}, goal at {}",
                        rec.h_at_tf.map_or_else(|| "-".into(), bench::fmt_g),
                        rec.min_b.map_or_else(|| "-".into(), bench::fmt_g),
                        rec.goal_reached_time.map_or_else(|| "never".into(), bench::fmt_g),
                    ),
                };
                println!("run {:>3} [{}] {} — {}", rec.index, rec.controller, rec.verdict, detail);
            }
            println!(
                "{} run(s) exported to {} — overall {}",
                result.summary.runs.len(),
                out_dir.display(),
                result.summary.verdict
            );
            Ok(if result.summary.verdict == Verdict::Pass { 0 } else { 1 })
        }
        Cmd::Design { scenario } => {
            let sc = load_scenario(&scenario)?;
            let resolved = sc.resolve()?;
            let (Some(interval), Some(report)) =
                (resolved.design_interval.clone(), resolved.design_report.clone())
            else {
                return Err(Error::Config(
                    "this scenario has no gain design to report (no deadline-constrained \
                     controller, or the reference init already satisfies the goal)"
                        .into(),
                ));
            };
            let record = DesignRecord {
                interval: Some(interval.clone()),
                report: Some(report.clone()),
                reference_init: resolved.reference_init.map(|x| x.iter().copied().collect()),
            };
            println!("{}", serde_json::to_string_pretty(&record).expect("serializable record"));
            Ok(u8::from(!(interval.nonempty && report.pointwise_pass)))
        }
        Cmd::Verify { out } => {
            let checked = bench::verify_outputs(&out)?;
            println!("verified {checked} run(s) in {} — all checks passed", out.display());
            Ok(0)
        }
    }
}
