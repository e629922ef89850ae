use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aoi_core::aggregator::Policy;
use aoi_core::harness::{
    emit_plots, load_models, parse_scenario, run_experiment, save_models, sweep, train_pipeline, write_run_outputs,
    write_sweep_outputs, ForecastSource, HarnessError, Scenario,
};
use aoi_core::predictor::PredictorKind;

/// Environment variable naming the directory all outputs go under.
const OUTPUT_ROOT_VAR: &str = "AOI_OUTPUT_ROOT";
const DEFAULT_SCENARIO: &str = include_str!("../../scenarios/default.toml");

#[derive(Parser)]
#[command(name = "aoi-sim", version, about = "Predictive AoI service aggregation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one policy over one seeded scenario.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "predictive")]
        policy: Policy,
        #[arg(long)]
        seed: Option<u64>,
        /// Use the trace's true future instead of trained models.
        #[arg(long)]
        oracle: bool,
    },
    /// Train and save the per-kind AoI predictors of a scenario.
    Train {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "recurrent")]
        model: PredictorKind,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare policies across ego speeds and seeds.
    Sweep {
        /// Defaults to the bundled default scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "15,20,25,30", value_delimiter = ',')]
        speeds: Vec<f64>,
        #[arg(long, default_value = "all")]
        policies: String,
        /// `a..b` (inclusive) or a comma list.
        #[arg(long, default_value = "1..3")]
        seeds: String,
        #[arg(long)]
        oracle: bool,
    },
    /// Render SVG charts from report.csv / comparison.csv in a directory.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("out"), PathBuf::from)
}

/// ISO-8601 run time; honours SOURCE_DATE_EPOCH for reproducible files.
fn timestamp() -> String {
    let at = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0))
        .unwrap_or_else(chrono::Utc::now);
    at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn parse_policies(s: &str) -> Result<Vec<Policy>, String> {
    if s == "all" {
        return Ok(Policy::ALL.to_vec());
    }
    s.split(',')
        .map(|p| p.trim().parse::<Policy>().map_err(|e| e.to_string()))
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let bad = |e: std::num::ParseIntError| format!("bad seed list `{s}`: {e}");
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(bad)?;
        let b: u64 = b.trim_start_matches('=').trim().parse().map_err(bad)?;
        if b < a {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(bad)).collect()
}

fn model_dir(scenario: &Scenario) -> PathBuf {
    output_root().join("models").join(&scenario.name)
}

/// Trained models for the scenario, training them first when absent.
fn forecast_for(scenario: &Scenario, oracle: bool) -> Result<ForecastSource, HarnessError> {
    if oracle {
        return Ok(ForecastSource::Oracle);
    }
    let kind = scenario.predictor.model;
    let dir = model_dir(scenario);
    if let Some(bank) = load_models(scenario, kind, &dir)? {
        return Ok(ForecastSource::Models(bank));
    }
    eprintln!("no {kind} models in {}; training them now", dir.display());
    let trained = train_pipeline(scenario, kind, scenario.seed)?;
    save_models(&trained, &dir)?;
    Ok(ForecastSource::Models(trained.bank(scenario.predictor.l_pred_ms)))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("report types serialize");
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Simulate {
            scenario,
            policy,
            seed,
            oracle,
        } => {
            let sc = parse_scenario(&scenario).map_err(|e| e.to_string())?;
            let seed = seed.unwrap_or(sc.seed);
            let forecast = if policy == Policy::Predictive {
                Some(forecast_for(&sc, oracle).map_err(|e| e.to_string())?)
            } else {
                None
            };
            let (stream, exp) = run_experiment(&sc, policy, seed, forecast.as_ref()).map_err(|e| e.to_string())?;
            let dir = output_root()
                .join(sc.output_dir.as_deref().unwrap_or(&sc.name))
                .join(format!("{policy}-seed{seed}"));
            write_run_outputs(&dir, &stream, &exp.outcome, &exp.report, &timestamp()).map_err(|e| e.to_string())?;
            let r = &exp.report;
            println!(
                "{policy} seed {seed}: DSSR {:.2}%  latency {:.1} ms (sequencing {:.0}%)  AoI ok {:.1}%  stream {}",
                r.mean_dssr,
                r.mean_latency,
                100.0 * r.sequencing_share,
                r.aoi_satisfaction,
                &exp.outcome.stream_hash[..16]
            );
            println!("wrote {}", dir.display());
        }
        Command::Train { scenario, model, seed } => {
            let mut sc = parse_scenario(&scenario).map_err(|e| e.to_string())?;
            sc.predictor.model = model;
            let seed = seed.unwrap_or(sc.seed);
            let trained = train_pipeline(&sc, model, seed).map_err(|e| e.to_string())?;
            let dir = model_dir(&sc);
            let paths = save_models(&trained, &dir).map_err(|e| e.to_string())?;
            println!("trace rows: {}", trained.trace_rows);
            for m in &trained.models {
                println!(
                    "{} h={}: train rows {} test rows {}  MAE {:.2} ms  accuracy {:.1}%  params {}",
                    m.node_kind,
                    m.model.horizon,
                    m.train_rows,
                    m.test_rows,
                    m.eval.mae_ms,
                    m.eval.accuracy_pct,
                    m.eval.parameter_count
                );
            }
            let summary: Vec<_> = trained
                .models
                .iter()
                .map(|m| (m.node_kind, &m.model.train_report, &m.eval))
                .collect();
            write_json(&dir.join(format!("{model}-train.json")), &summary).map_err(|e| e.to_string())?;
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Sweep {
            scenario,
            speeds,
            policies,
            seeds,
            oracle,
        } => {
            let sc = match scenario {
                Some(p) => parse_scenario(&p).map_err(|e| e.to_string())?,
                None => Scenario::from_toml(DEFAULT_SCENARIO).map_err(|e| e.to_string())?,
            };
            let policies = parse_policies(&policies)?;
            let seeds = parse_seeds(&seeds)?;
            let forecast = if policies.contains(&Policy::Predictive) {
                Some(forecast_for(&sc, oracle).map_err(|e| e.to_string())?)
            } else {
                None
            };
            let result = sweep(&sc, &speeds, &policies, &seeds, forecast.as_ref()).map_err(|e| e.to_string())?;
            let dir = output_root()
                .join(sc.output_dir.as_deref().unwrap_or(&sc.name))
                .join("sweep");
            write_sweep_outputs(&dir, &result, &timestamp()).map_err(|e| e.to_string())?;
            for c in &result.cells {
                eprintln!(
                    "cell speed {} seed {} {}: stream {}",
                    c.speed_mps, c.seed, c.policy, c.stream_hash
                );
            }
            println!(
                "{:>6} {:>12} {:>9} {:>11} {:>10}",
                "speed", "policy", "DSSR %", "latency ms", "vs ref %"
            );
            for r in &result.table.rows {
                println!(
                    "{:>6} {:>12} {:>9.2} {:>11.1} {:>10}",
                    r.speed_bucket_mps,
                    r.policy,
                    r.mean_dssr.unwrap_or(f64::NAN),
                    r.mean_latency,
                    r.latency_reduction_pct.map_or("-".into(), |v| format!("{v:.1}"))
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::Plot { input, out } => {
            let out = out.unwrap_or_else(|| input.clone());
            for p in emit_plots(&input, &out).map_err(|e| e.to_string())? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
