use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use sabre_core::harness::{
    estimate_disagreement_coefficient, run_experiment, summarize_dir, verify_policy_cover, Algorithm,
    ExperimentSpec, LabelTable, OracleChoice, Preset,
};
use sabre_core::mdp::{DeterministicPolicy, TabularMdp, TabularPolicy};
use sabre_core::oracle::{serve_oracle, LabelQueue};
use sabre_core::rng;

#[derive(Parser)]
#[command(name = "sabre", about = "Safe RL with actively queried safety labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run SABRE.
    RunSabre(RunArgs),
    /// Run the naive label-as-you-go baseline.
    RunBaseline(RunArgs),
    /// Run the learner without any safety mask.
    RunUnsafe(RunArgs),
    /// Run an experiment whose labels come from people over HTTP.
    ServeOracle {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Check complexity assumptions on small random instances.
    Diagnose {
        #[command(subcommand)]
        what: Diagnose,
    },
    /// Rebuild summary.csv and fig2-panels.csv from the metrics in a directory.
    Summarize {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        bucket: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Theorem,
    PaperExperiment,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec (JSON); missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds or a half-open range like `1000..1005`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// `simulated`, or an `http://host:port` address at which to serve the
    /// queue that people answer.
    #[arg(long, default_value = "simulated")]
    oracle: String,
    /// File that keeps pending queries across restarts (human oracle only).
    #[arg(long)]
    queue_file: Option<PathBuf>,
    /// Seconds to wait for a batch of human labels.
    #[arg(long, default_value_t = 3600)]
    label_timeout: u64,
}

#[derive(Subcommand)]
enum Diagnose {
    /// Build the per-state maximizing cover of all deterministic policies
    /// and check it on random tabular instances.
    Cover {
        #[arg(long, default_value_t = 4)]
        states: usize,
        #[arg(long, default_value_t = 2)]
        actions: usize,
        #[arg(long, default_value_t = 2)]
        horizon: usize,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 200)]
        subsets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Disagreement coefficient of threshold labelings under the uniform
    /// policy of a random tabular instance.
    Theta {
        #[arg(long, default_value_t = 50)]
        states: usize,
        #[arg(long, default_value_t = 2)]
        actions: usize,
        #[arg(long, default_value_t = 3)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range {s}");
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|x| x.trim().parse::<u64>().with_context(|| format!("bad seed {x:?}")))
        .collect()
}

fn parse_addr(s: &str) -> Result<SocketAddr> {
    let host = s.strip_prefix("http://").unwrap_or(s).trim_end_matches('/');
    host.to_socket_addrs()?
        .next()
        .with_context(|| format!("cannot resolve {s}"))
}

fn load_spec(args: &RunArgs, algorithm: Algorithm) -> Result<ExperimentSpec> {
    let mut spec: ExperimentSpec = match &args.config {
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => ExperimentSpec::default(),
    };
    spec.algorithm = algorithm;
    if let Some(s) = &args.seeds {
        spec.seeds = parse_seeds(s)?;
    }
    if let Some(out) = &args.out {
        spec.out = Some(out.clone());
    }
    if let Some(p) = args.preset {
        spec.preset = match p {
            PresetArg::Theorem => Preset::Theorem,
            PresetArg::PaperExperiment => Preset::PaperExperiment,
        };
        spec.sabre = None;
    }
    spec.validate()?;
    Ok(spec)
}

fn run(args: &RunArgs, algorithm: Algorithm, serve_at: Option<&str>) -> Result<()> {
    let spec = load_spec(args, algorithm)?;
    let serve_at = match (serve_at, args.oracle.as_str()) {
        (Some(addr), _) => Some(addr.to_string()),
        (None, "simulated") => None,
        (None, url) => Some(url.to_string()),
    };
    let (choice, _server) = match serve_at {
        None => (OracleChoice::Simulated, None),
        Some(addr) => {
            let queue = match &args.queue_file {
                Some(path) => LabelQueue::persistent(path)?,
                None => LabelQueue::new(),
            };
            let server = serve_oracle(parse_addr(&addr)?, queue.clone())?;
            println!("labeling service at {}", server.url());
            let timeout = Duration::from_secs(args.label_timeout);
            (OracleChoice::Human { queue, timeout }, Some(server))
        }
    };
    let report = run_experiment(&spec, &choice)?;
    for o in &report.outcomes {
        let last = &o.rows[o.rows.len().saturating_sub(500)..];
        let ret = last.iter().map(|r| r.episode_return).sum::<f64>() / last.len().max(1) as f64;
        let t = &o.totals;
        println!(
            "{} seed {}: final-500 return {ret:.3}, unsafe actions {}, oracle calls {} of {} pairs",
            algorithm.name(),
            o.seed,
            t.unsafe_actions,
            t.oracle_calls,
            t.pairs
        );
    }
    if let Some(dir) = &spec.out {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn diagnose(what: &Diagnose) -> Result<()> {
    match *what {
        Diagnose::Cover {
            states,
            actions,
            horizon,
            instances,
            subsets,
            seed,
        } => {
            let mut r = rng::seeded(seed);
            let policies = DeterministicPolicy::enumerate(states, actions, horizon, |_, _| true);
            let mut failures = 0;
            for i in 0..instances {
                let mdp = TabularMdp::random(states, actions, horizon, &mut r)?;
                let report = verify_policy_cover(&mdp, &policies, subsets, &mut r)?;
                if !report.valid || report.cover.len() > states {
                    failures += 1;
                }
                println!(
                    "instance {i}: cover size {}, worst gap {:.3e}, {}",
                    report.cover.len(),
                    report.worst_gap,
                    if report.valid { "valid" } else { "INVALID" }
                );
            }
            println!("{failures} of {instances} instances failed");
            if failures > 0 {
                bail!("policy cover check failed");
            }
        }
        Diagnose::Theta {
            states,
            actions,
            horizon,
            seed,
        } => {
            let mut r = rng::seeded(seed);
            let mdp = TabularMdp::random(states, actions, horizon, &mut r)?;
            let policy = TabularPolicy::uniform(states, actions, horizon);
            let table = |t: usize| -> LabelTable {
                (0..states).map(|s| (0..actions).map(|a| a == 0 || s >= t).collect()).collect()
            };
            let class: Vec<LabelTable> = (0..=states).map(table).collect();
            let truth = table(r.random_range(0..=states));
            let radii: Vec<f64> = (0..12).map(|k| 0.5f64.powi(k)).collect();
            let theta = estimate_disagreement_coefficient(&mdp, &policy, &class, &truth, &radii)?;
            println!("disagreement coefficient {theta:.4}");
        }
    }
    Ok(())
}

fn summarize(out: &Path, bucket: usize) -> Result<()> {
    for (algorithm, rows) in summarize_dir(out, bucket)? {
        if let Some(last) = rows.last() {
            println!(
                "{algorithm}: {} buckets, last return {:.3} ± {:.3}, calls {:.1}",
                rows.len(),
                last.return_mean,
                last.return_sem,
                last.calls_mean
            );
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match &Cli::parse().command {
        Command::RunSabre(args) => run(args, Algorithm::Sabre, None),
        Command::RunBaseline(args) => run(args, Algorithm::NaiveBaseline, None),
        Command::RunUnsafe(args) => run(args, Algorithm::UnsafeBlackbox, None),
        Command::ServeOracle { addr, run: args } => run(args, Algorithm::Sabre, Some(addr)),
        Command::Diagnose { what } => diagnose(what),
        Command::Summarize { out, bucket } => summarize(out, *bucket),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists_and_ranges() {
        assert_eq!(parse_seeds("1000..1003").unwrap(), vec![1000, 1001, 1002]);
        assert_eq!(parse_seeds("4, 2,9").unwrap(), vec![4, 2, 9]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn oracle_addresses() {
        assert_eq!(parse_addr("http://127.0.0.1:9000/").unwrap().port(), 9000);
        assert_eq!(parse_addr("127.0.0.1:80").unwrap().port(), 80);
    }
}
