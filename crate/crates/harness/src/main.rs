use bls_harness::config::{FitSpec, WindowSpec};
use bls_harness::run::{estimate_series, fit_series, read_config, read_replicas, RunOptions, RESULTS_FILE};
use bls_harness::{Experiment, HarnessError, Result, RunConfig, RunManifest};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bls", version, about = "Monte Carlo laboratory for 3D Brownian loop soups")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicas: Option<u64>,
        #[arg(long)]
        first_replica: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Merge finished runs over disjoint replica ranges.
    Merge {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run the built-in oracle suite.
    Validate {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Fit exponents from an estimate run.
    Fit {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        r_min: f64,
        #[arg(long)]
        r_max: Option<f64>,
        #[arg(long, default_value_t = 20)]
        min_avoiding: u64,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 10.0)]
        band_tol: f64,
    },
    /// Print a run's manifest and results.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            replicas,
            first_replica,
            out,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.experiment.set_seed(s);
            }
            if let Some(n) = replicas {
                cfg.experiment.set_replicas(n);
            }
            if let Some(f) = first_replica {
                cfg.first_replica = f;
            }
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(cfg.experiment.name()));
            let m = bls_harness::run(
                &cfg,
                &RunOptions {
                    out: out.clone(),
                    resume,
                    threads: cli.threads,
                    max_chunks: None,
                },
            )?;
            eprintln!(
                "{} finished in {:.1}s, replicas {:?}, outputs in {}",
                m.experiment,
                m.wall_seconds,
                m.completed,
                out.display()
            );
            Ok(())
        }
        Command::Merge { out, runs } => {
            let m = bls_harness::merge(&runs, &out)?;
            eprintln!("merged replicas {:?} into {}", m.completed, out.display());
            Ok(())
        }
        Command::Validate { seed } => {
            let checks = match cli.threads {
                Some(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| HarnessError::Config(e.to_string()))?
                    .install(|| bls_harness::validate::run_checks(seed)),
                None => bls_harness::validate::run_checks(seed),
            };
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(HarnessError::Validation(format!("{failed} checks failed")));
            }
            Ok(())
        }
        Command::Fit {
            run,
            r_min,
            r_max,
            min_avoiding,
            bootstrap,
            band_tol,
        } => {
            let cfg = read_config(&run)?;
            let estimate = match cfg.experiment {
                Experiment::EstimateP(c) => c,
                Experiment::Fit(f) | Experiment::Continuity(f) => f.estimate,
                other => {
                    return Err(HarnessError::Config(format!("cannot fit a {} run", other.name())));
                }
            };
            let spec = FitSpec {
                estimate,
                window: WindowSpec {
                    r_min,
                    r_max,
                    min_avoiding,
                    bootstrap,
                },
                band_tol,
            };
            let mut data = read_replicas(&run)?;
            data.sort_by_key(|d| d.replica());
            let series = estimate_series(&spec.estimate, &data);
            let entries = fit_series(&spec, &series);
            let path = run.join("fit.jsonl");
            let mut text = String::new();
            for e in &entries {
                text.push_str(&serde_json::to_string(e).expect("fit serializes"));
                text.push('\n');
                match &e.fit {
                    Some(f) => println!(
                        "alpha={} k={} lambda={}: xi={:.4} [{:.4}, {:.4}] band ratio {:.2}",
                        e.alpha,
                        e.k,
                        e.lambda,
                        f.xi_hat,
                        f.ci_low,
                        f.ci_high,
                        e.band.as_ref().map_or(f64::NAN, |b| b.ratio)
                    ),
                    None => println!("alpha={} k={} lambda={}: {}", e.alpha, e.k, e.lambda, e.error.as_deref().unwrap_or("")),
                }
            }
            std::fs::write(&path, text).map_err(|e| HarnessError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            Ok(())
        }
        Command::Report { run } => {
            let m = RunManifest::load(&run)?.ok_or_else(|| HarnessError::Config(format!("{} has no manifest", run.display())))?;
            println!("{}", serde_json::to_string_pretty(&m).expect("manifest serializes"));
            let p = run.join(RESULTS_FILE);
            if let Ok(text) = std::fs::read_to_string(&p) {
                for line in text.lines() {
                    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| HarnessError::Malformed {
                        path: p.display().to_string(),
                        reason: e.to_string(),
                    })?;
                    println!("{}", v["result"]);
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
