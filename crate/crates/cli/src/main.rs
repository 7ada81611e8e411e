use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lowrank_bn::exec::Execution;
use lowrank_bn::experiment::{run_sweep, ExperimentConfig, ExperimentError};
use lowrank_bn::learn::{get_parents, LearnError, LearnerConfig};
use lowrank_bn::markov_blanket::{estimate_moments, exact_moments, recover_blankets, MbOptions, MbResult};
use lowrank_bn::network::BayesNet;
use lowrank_bn::oracle::{sample_observational, BlackBox, Dataset, OracleConfig};
use lowrank_bn::recovery::ThresholdMode;
use lowrank_bn::Error;

#[derive(Parser)]
#[command(name = "lowrank-bn", version, about = "Structure learning for rank-2 binary Bayesian networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random network and write it as JSON.
    Generate {
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Bound on Markov blanket sizes.
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 0.02)]
        gamma_min: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw observational samples from a network.
    Sample {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover parent sets through black-box queries.
    Learn {
        #[arg(long)]
        network: PathBuf,
        /// Learner settings as TOML; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        c: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Answer queries exactly instead of by sampling.
        #[arg(long)]
        exact: bool,
        /// Restrict queries to blankets estimated from this dataset.
        #[arg(long, conflicts_with = "exact_blankets")]
        blankets_from: Option<PathBuf>,
        /// Restrict queries to blankets computed from exact moments.
        #[arg(long)]
        exact_blankets: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-round probe log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Recover Markov blankets from observational moments.
    Mb {
        #[arg(long, required_unless_present = "data")]
        network: Option<PathBuf>,
        #[arg(long, conflicts_with = "network")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        tau: f64,
        #[arg(long)]
        largest_gap: bool,
        /// Moment accuracy, for the perturbation diagnostic.
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a seeded sweep described by a TOML file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_or_print(path: Option<&Path>, body: &str) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, body).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn blankets_text(results: &[MbResult]) -> String {
    results.iter().map(MbResult::to_text).collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { n, k, gamma_min, seed, out } => {
            let bn = BayesNet::random(n, k, gamma_min, seed)?;
            bn.save(&out)?;
            eprintln!("wrote {} ({} nodes, {} edges)", out.display(), bn.n(), bn.dag().edge_count());
        }
        Command::Sample { network, count, seed, out } => {
            let bn = BayesNet::load(&network)?;
            sample_observational(&bn, count, seed).save(&out)?;
        }
        Command::Learn {
            network,
            config,
            c,
            seed,
            exact,
            blankets_from,
            exact_blankets,
            out,
            log,
        } => {
            let bn = BayesNet::load(&network)?;
            let mut cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|source| Error::Io { path: p.clone(), source })?;
                    LearnerConfig::from_toml(&text)?
                }
                None => LearnerConfig::default(),
            };
            cfg.c = c.unwrap_or(cfg.c);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let moments = match (blankets_from, exact_blankets) {
                (Some(p), _) => Some(estimate_moments(&Dataset::load(p)?)?),
                (None, true) => Some(exact_moments(&bn)?),
                (None, false) => None,
            };
            let blankets = match moments {
                Some(m) => Some(
                    recover_blankets(&m, &MbOptions::default(), cfg.execution)?
                        .iter()
                        .map(|r| r.mb)
                        .collect::<Vec<_>>(),
                ),
                None => None,
            };
            let oracle = if exact {
                OracleConfig::exact()
            } else {
                OracleConfig::sampled(1, cfg.seed)
            };
            let bb = BlackBox::new(&bn, oracle)?;
            let outcome = match get_parents(&bb, &cfg, blankets.as_deref()) {
                Ok(o) => o,
                Err(e) => {
                    // a stalled run still leaves a usable partial map
                    if let LearnError::Stall { partial, rounds, .. } = &e {
                        if let Some(p) = &log {
                            let text: String = rounds.iter().map(|r| r.to_string()).collect();
                            write_or_print(Some(p), &text)?;
                        }
                        write_or_print(out.as_deref(), &partial.to_text())?;
                    }
                    return Err(e.into());
                }
            };
            if let Some(p) = &log {
                write_or_print(Some(p), &outcome.log_text())?;
            }
            write_or_print(out.as_deref(), &outcome.parents.to_text())?;
            eprintln!("{}", outcome.ledger);
        }
        Command::Mb {
            network,
            data,
            tau,
            largest_gap,
            eps,
            out,
        } => {
            let moments = match (network, data) {
                (_, Some(d)) => estimate_moments(&Dataset::load(d)?)?,
                (Some(n), None) => exact_moments(&BayesNet::load(n)?)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            let opts = MbOptions {
                threshold: if largest_gap {
                    ThresholdMode::LargestGap
                } else {
                    ThresholdMode::Absolute { tau }
                },
                ridge: None,
                eps,
            };
            let results = recover_blankets(&moments, &opts, Execution::Parallel)?;
            write_or_print(out.as_deref(), &blankets_text(&results))?;
        }
        Command::Sweep { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| ExperimentError::Config("no output directory: pass --out or set output_dir".into()))?;
            let result = run_sweep(&cfg)?;
            for p in result.write_tables(&dir)? {
                eprintln!("wrote {}", p.display());
            }
            print!("{}", result.averages_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error\tkind={}\tmessage={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
