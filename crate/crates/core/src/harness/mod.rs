//! Experiment runner: seeded runs of SABRE and the two baselines, per-episode
//! metrics files, bucketed summaries, and small-instance diagnostics.

mod diagnostics;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use diagnostics::{estimate_disagreement_coefficient, verify_policy_cover, CoverReport, LabelTable};

use crate::blackbox::{Blackbox, BlackboxRequest, PgBlackbox, PgHyperparams, UcbviBlackbox, UcbviConfig};
use crate::env::{BlockEnvConfig, BlockMdpEnv, SafetyMdp};
use crate::error::{Error, Result};
use crate::mdp::Environment;
use crate::oracle::{HumanBackend, LabelBackend, LabelQueue, Oracle, SimulatedBackend};
use crate::rng;
use crate::sabre::{
    call_seed, expand_labels, run_sabre, theorem1_schedule, EpisodeMetrics, IterationRecord,
    Phase, RunTotals, SabreConfig, SabreRun, SafetyEnv, Timeline,
};
use crate::safety::{any_disagreement, HalfspaceClass, MaskedPolicy, SafetyDataset, VersionSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvSpec {
    /// The rich-observation block environment; its seed is replaced by the
    /// run seed.
    Block(BlockEnvConfig),
    /// A random tabular instance drawn from the run seed.
    Tabular {
        states: usize,
        actions: usize,
        horizon: usize,
        dim: usize,
    },
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Block(BlockEnvConfig::default())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    Sabre,
    NaiveBaseline,
    UnsafeBlackbox,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sabre => "sabre",
            Algorithm::NaiveBaseline => "naive-baseline",
            Algorithm::UnsafeBlackbox => "unsafe-blackbox",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Theorem,
    #[default]
    PaperExperiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub env: EnvSpec,
    pub algorithm: Algorithm,
    pub preset: Preset,
    /// Replaces the preset when given.
    pub sabre: Option<SabreConfig>,
    pub ppo: PgHyperparams,
    pub ucbvi: UcbviConfig,
    /// Episodes per blackbox call of the naive baseline.
    pub naive_round_episodes: usize,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    /// Episodes per summary bucket.
    pub bucket: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            env: EnvSpec::default(),
            algorithm: Algorithm::Sabre,
            preset: Preset::PaperExperiment,
            sabre: None,
            ppo: PgHyperparams::default(),
            ucbvi: UcbviConfig::default(),
            naive_round_episodes: 500,
            seeds: vec![0],
            out: None,
            bucket: 50,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.bucket == 0 || self.naive_round_episodes == 0 {
            return Err(Error::Config("bucket and naive_round_episodes must be positive".into()));
        }
        self.ppo.validate()?;
        if let EnvSpec::Tabular {
            states,
            actions,
            horizon,
            dim,
        } = self.env
        {
            if states == 0 || actions < 2 || horizon == 0 || dim == 0 {
                return Err(Error::Config("tabular env needs states, horizon, dim >= 1 and actions >= 2".into()));
            }
        }
        Ok(())
    }

    /// The run parameters for an environment of the given shape.
    pub fn sabre_config(&self, horizon: usize, latent_states: usize, feature_dim: usize) -> Result<SabreConfig> {
        let config = match (&self.sabre, self.preset) {
            (Some(c), _) => c.clone(),
            (None, Preset::PaperExperiment) => SabreConfig::paper_experiment(),
            (None, Preset::Theorem) => {
                theorem1_schedule(0.1, 0.1, horizon, latent_states, 1.0, feature_dim + 1, 1.0, 1.0)?
            }
        };
        config.validate()?;
        Ok(config)
    }
}

/// One line of `metrics-<seed>.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub algorithm: String,
    pub seed: u64,
    pub episode: usize,
    pub phase: Phase,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub oracle_calls_cum: usize,
    pub unsafe_actions_cum: usize,
    pub rd_hits: usize,
    pub pairs_cum: usize,
}

impl MetricsRow {
    fn from_metrics(algorithm: Algorithm, seed: u64, m: &EpisodeMetrics) -> Self {
        Self {
            algorithm: algorithm.name().into(),
            seed,
            episode: m.episode,
            phase: m.phase,
            episode_return: m.episode_return,
            oracle_calls_cum: m.oracle_calls_cum,
            unsafe_actions_cum: m.unsafe_actions_cum,
            rd_hits: m.rd_hits,
            pairs_cum: m.pairs_cum,
        }
    }
}

/// Where labels come from.
#[derive(Clone, Default)]
pub enum OracleChoice {
    /// Ground truth of the environment.
    #[default]
    Simulated,
    /// People answering through a shared queue; seeds then run one at a time.
    Human { queue: Arc<LabelQueue>, timeout: Duration },
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub totals: RunTotals,
    pub iterations: Vec<IterationRecord>,
    pub dataset: SafetyDataset,
}

pub struct ExperimentReport {
    pub outcomes: Vec<SeedOutcome>,
    pub summary: Vec<SummaryRow>,
}

/// Budget of the unsafe baseline: the length of the SABRE timeline.
pub fn timeline_episodes(config: &SabreConfig) -> usize {
    config.epochs * config.iterations * config.rollouts + config.final_episodes
}

/// The learner alone, unmasked, on the environment reward.
pub fn run_unsafe_blackbox<E, B>(
    env: &E,
    blackbox: &B,
    config: &SabreConfig,
    seed: u64,
) -> Result<(B::Output, Vec<EpisodeMetrics>, RunTotals)>
where
    E: SafetyEnv,
    B: Blackbox<E>,
{
    config.validate()?;
    let request = BlackboxRequest {
        reward: config.learner_reward(env),
        mask: None,
        a_safe: env.safe_action(),
        epsilon: config.epsilon_r,
        delta: config.delta_r,
        episodes: timeline_episodes(config),
    };
    let mut timeline = Timeline::default();
    let policy = blackbox.train(env, &request, call_seed(seed, 0), &mut |trace| {
        timeline.record(env, trace, Phase::Final, None, 0)
    })?;
    Ok((policy, timeline.metrics, timeline.totals))
}

/// Follow the learner on the environment reward under the current mask, and
/// label the disagreement pairs it happens to meet after every round of
/// `round_episodes` episodes.
#[allow(clippy::too_many_arguments)]
pub fn run_naive_baseline<E, B, L>(
    env: &E,
    oracle: &mut Oracle<L>,
    blackbox: &B,
    config: &SabreConfig,
    budget: usize,
    round_episodes: usize,
    initial: &SafetyDataset,
    seed: u64,
) -> Result<SabreRun<B::Output>>
where
    E: SafetyEnv,
    B: Blackbox<E>,
    L: LabelBackend,
{
    config.validate()?;
    if budget == 0 || round_episodes == 0 {
        return Err(Error::Config("budget and round_episodes must be positive".into()));
    }
    let (num_actions, a_safe) = (env.num_actions(), env.safe_action());
    let mut vs = VersionSpace::from_dataset(HalfspaceClass::new(env.safety_dim())?, initial)?;
    let mut timeline = Timeline::default();
    let mut records = Vec::new();
    let mut round = 0;
    loop {
        let episodes = round_episodes.min(budget - timeline.totals.timeline_episodes);
        let frozen = vs.clone();
        let request = BlackboxRequest {
            reward: config.learner_reward(env),
            mask: Some(&frozen),
            a_safe,
            epsilon: config.epsilon_r,
            delta: config.delta_r,
            episodes,
        };
        let mut observed = Vec::new();
        let calls = oracle.ledger().total;
        let policy = blackbox.train(env, &request, call_seed(seed, round), &mut |trace| {
            let episode = timeline.totals.timeline_episodes;
            for st in &trace.steps {
                if any_disagreement(&frozen, &st.state, num_actions, a_safe)? {
                    let fp = oracle.observe(crate::blackbox::Observe::observation(&st.state), episode);
                    observed.push((fp, st.state.clone()));
                }
            }
            timeline.record(env, trace, Phase::Final, Some(&frozen), calls)
        })?;
        let before = vs.dataset().len();
        let calls = expand_labels(&mut vs, &observed, num_actions, a_safe, config.label_mode, oracle, round, 0)?;
        records.push(IterationRecord {
            epoch: round,
            iteration: 0,
            mask_version: frozen.version(),
            dataset_before: before,
            dataset_after: vs.dataset().len(),
            oracle_calls: calls,
        });
        timeline.totals.oracle_calls = oracle.ledger().total;
        let t = &timeline.totals;
        oracle.publish(t.timeline_episodes, t.unsafe_actions, round);
        round += 1;
        if timeline.totals.timeline_episodes >= budget {
            return Ok(SabreRun {
                policy: MaskedPolicy {
                    base: policy,
                    space: vs,
                    num_actions,
                    a_safe,
                },
                metrics: timeline.metrics,
                iterations: records,
                totals: timeline.totals,
            });
        }
    }
}

fn oracle_for<'a, E: SafetyEnv>(env: &'a E, choice: &OracleChoice) -> Oracle<Box<dyn LabelBackend + Send + 'a>> {
    let backend: Box<dyn LabelBackend + Send + 'a> = match choice {
        OracleChoice::Simulated => Box::new(SimulatedBackend(move |f: &[f64], a| env.safe_label(f, a))),
        OracleChoice::Human { queue, timeout } => Box::new(HumanBackend {
            queue: queue.clone(),
            timeout: *timeout,
        }),
    };
    Oracle::new(backend)
}

fn run_on<E, B>(
    env: &E,
    blackbox: &B,
    spec: &ExperimentSpec,
    config: &SabreConfig,
    seed: u64,
    choice: &OracleChoice,
) -> Result<SeedOutcome>
where
    E: SafetyEnv,
    E::State: Send,
    B: Blackbox<E>,
{
    let initial = SafetyDataset::new();
    let (metrics, totals, iterations, dataset) = match spec.algorithm {
        Algorithm::Sabre => {
            let mut oracle = oracle_for(env, choice);
            let run = run_sabre(env, &mut oracle, config, blackbox, &initial, seed)?;
            let dataset = run.dataset().clone();
            (run.metrics, run.totals, run.iterations, dataset)
        }
        Algorithm::NaiveBaseline => {
            let mut oracle = oracle_for(env, choice);
            let budget = timeline_episodes(config);
            let run = run_naive_baseline(
                env,
                &mut oracle,
                blackbox,
                config,
                budget,
                spec.naive_round_episodes,
                &initial,
                seed,
            )?;
            let dataset = run.dataset().clone();
            (run.metrics, run.totals, run.iterations, dataset)
        }
        Algorithm::UnsafeBlackbox => {
            let (_, metrics, totals) = run_unsafe_blackbox(env, blackbox, config, seed)?;
            (metrics, totals, Vec::new(), initial)
        }
    };
    Ok(SeedOutcome {
        seed,
        rows: metrics
            .iter()
            .map(|m| MetricsRow::from_metrics(spec.algorithm, seed, m))
            .collect(),
        totals,
        iterations,
        dataset,
    })
}

/// Runs one seed of `spec` with the simulated oracle unless told otherwise.
pub fn run_seed(spec: &ExperimentSpec, seed: u64, choice: &OracleChoice) -> Result<SeedOutcome> {
    spec.validate()?;
    match &spec.env {
        EnvSpec::Block(c) => {
            let env = BlockMdpEnv::new(BlockEnvConfig {
                seed,
                ..c.clone()
            })?;
            let config = spec.sabre_config(env.horizon(), env.num_latents(), env.feature_dim())?;
            run_on(&env, &PgBlackbox(spec.ppo.clone()), spec, &config, seed, choice)
        }
        &EnvSpec::Tabular {
            states,
            actions,
            horizon,
            dim,
        } => {
            let env = SafetyMdp::random(states, actions, horizon, dim, &mut rng::seeded(seed))?;
            let config = spec.sabre_config(horizon, states, dim)?;
            run_on(&env, &UcbviBlackbox(spec.ucbvi.clone()), spec, &config, seed, choice)
        }
    }
}

/// Runs every seed (in parallel with the simulated oracle), writing
/// `metrics-<seed>.jsonl` as each finishes and the summaries at the end.
/// A failing seed does not stop the others; the first error is returned
/// after the surviving results are written.
pub fn run_experiment(spec: &ExperimentSpec, choice: &OracleChoice) -> Result<ExperimentReport> {
    spec.validate()?;
    if let Some(dir) = &spec.out {
        for seed in &spec.seeds {
            let path = dir.join(format!("metrics-{seed}.jsonl"));
            if path.exists() {
                if let Some(row) = read_metrics(&path)?.first() {
                    if row.algorithm != spec.algorithm.name() {
                        return Err(Error::Config(format!(
                            "{} already holds {} metrics for seed {seed}; use another output directory",
                            dir.display(),
                            row.algorithm
                        )));
                    }
                }
            }
        }
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(spec)?)?;
    }
    let one = |&seed: &u64| -> Result<SeedOutcome> {
        let outcome = run_seed(spec, seed, choice)?;
        if let Some(dir) = &spec.out {
            write_metrics(&dir.join(format!("metrics-{seed}.jsonl")), &outcome.rows)?;
        }
        log::info!("seed {seed} finished: {:?}", outcome.totals);
        Ok(outcome)
    };
    let results: Vec<Result<SeedOutcome>> = match choice {
        OracleChoice::Simulated => spec.seeds.par_iter().map(one).collect(),
        OracleChoice::Human { .. } => spec.seeds.iter().map(one).collect(),
    };
    let mut outcomes = Vec::new();
    let mut first_error = None;
    for (seed, r) in spec.seeds.iter().zip(results) {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    let runs: Vec<Vec<MetricsRow>> = outcomes.iter().map(|o| o.rows.clone()).collect();
    let summary = if runs.is_empty() { Vec::new() } else { summarize(&runs, spec.bucket)? };
    if let Some(dir) = &spec.out {
        if !runs.is_empty() {
            write_summaries(dir, &runs, spec.bucket)?;
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(ExperimentReport { outcomes, summary }),
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

/// Every `metrics-*.jsonl` in `dir`, grouped by algorithm, sorted by seed.
pub fn read_metrics_dir(dir: &Path) -> Result<Vec<(String, Vec<Vec<MetricsRow>>)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("metrics-") && n.ends_with(".jsonl"))
        })
        .collect();
    paths.sort();
    let mut groups: Vec<(String, Vec<Vec<MetricsRow>>)> = Vec::new();
    for p in paths {
        let rows = read_metrics(&p)?;
        let Some(first) = rows.first() else { continue };
        let name = first.algorithm.clone();
        match groups.iter_mut().find(|(n, _)| *n == name) {
            Some((_, runs)) => runs.push(rows),
            None => groups.push((name, vec![rows])),
        }
    }
    for (_, runs) in &mut groups {
        runs.sort_by_key(|r| r[0].seed);
    }
    Ok(groups)
}

/// Aggregates over seeds for one episode bucket. Spreads are standard
/// deviations of the mean across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub bucket_start: usize,
    pub bucket_end: usize,
    pub seeds: usize,
    pub return_mean: f64,
    pub return_sem: f64,
    pub calls_mean: f64,
    pub calls_sem: f64,
    pub calls_median: f64,
    pub unsafe_mean: f64,
    pub unsafe_sem: f64,
}

pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Buckets of `bucket` episodes over the episodes every run has. Returns are
/// averaged within a bucket; cumulative columns are read at its last episode.
pub fn summarize(runs: &[Vec<MetricsRow>], bucket: usize) -> Result<Vec<SummaryRow>> {
    if runs.is_empty() || bucket == 0 {
        return Err(Error::Domain("need at least one run and a positive bucket".into()));
    }
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + bucket).min(len);
        let returns: Vec<f64> = runs
            .iter()
            .map(|r| r[start..end].iter().map(|m| m.episode_return).sum::<f64>() / (end - start) as f64)
            .collect();
        let calls: Vec<f64> = runs.iter().map(|r| r[end - 1].oracle_calls_cum as f64).collect();
        let unsafe_: Vec<f64> = runs.iter().map(|r| r[end - 1].unsafe_actions_cum as f64).collect();
        let (return_mean, return_sem) = mean_sem(&returns);
        let (calls_mean, calls_sem) = mean_sem(&calls);
        let (unsafe_mean, unsafe_sem) = mean_sem(&unsafe_);
        out.push(SummaryRow {
            bucket_start: start,
            bucket_end: end,
            seeds: runs.len(),
            return_mean,
            return_sem,
            calls_mean,
            calls_sem,
            calls_median: median(&calls),
            unsafe_mean,
            unsafe_sem,
        });
        start = end;
    }
    Ok(out)
}

/// Long-format rows for the return, oracle-call and unsafe-action panels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub algorithm: String,
    pub panel: String,
    pub episode: usize,
    pub mean: f64,
    pub sem: f64,
    pub median: Option<f64>,
}

pub fn panel_rows(algorithm: &str, summary: &[SummaryRow]) -> Vec<PanelRow> {
    let mut rows = Vec::with_capacity(summary.len() * 3);
    for (panel, pick) in [
        ("return", (|s: &SummaryRow| (s.return_mean, s.return_sem, None)) as fn(&SummaryRow) -> _),
        ("oracle_calls", |s| (s.calls_mean, s.calls_sem, Some(s.calls_median))),
        ("unsafe_actions", |s| (s.unsafe_mean, s.unsafe_sem, None)),
    ] {
        for s in summary {
            let (mean, sem, median) = pick(s);
            rows.push(PanelRow {
                algorithm: algorithm.into(),
                panel: panel.into(),
                episode: s.bucket_end,
                mean,
                sem,
                median,
            });
        }
    }
    rows
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// `summary.csv` and `fig2-panels.csv` for one algorithm's runs.
pub fn write_summaries(dir: &Path, runs: &[Vec<MetricsRow>], bucket: usize) -> Result<()> {
    let summary = summarize(runs, bucket)?;
    write_csv(&dir.join("summary.csv"), &summary)?;
    let algorithm = runs[0].first().map_or("unknown", |r| r.algorithm.as_str());
    write_csv(&dir.join("fig2-panels.csv"), &panel_rows(algorithm, &summary))
}

/// Rebuilds the summaries of every algorithm found in `dir`; with several
/// algorithms the summary gains one file per algorithm and the panels file
/// holds all of them.
pub fn summarize_dir(dir: &Path, bucket: usize) -> Result<Vec<(String, Vec<SummaryRow>)>> {
    let groups = read_metrics_dir(dir)?;
    if groups.is_empty() {
        return Err(Error::Domain(format!("no metrics files in {}", dir.display())));
    }
    let mut panels = Vec::new();
    let mut out = Vec::new();
    for (name, runs) in &groups {
        let summary = summarize(runs, bucket)?;
        let file = if groups.len() == 1 {
            "summary.csv".to_string()
        } else {
            format!("summary-{name}.csv")
        };
        write_csv(&dir.join(file), &summary)?;
        panels.extend(panel_rows(name, &summary));
        out.push((name.clone(), summary));
    }
    write_csv(&dir.join("fig2-panels.csv"), &panels)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::build_block_env;

    fn tabular_spec(algorithm: Algorithm, seeds: Vec<u64>) -> ExperimentSpec {
        ExperimentSpec {
            env: EnvSpec::Tabular {
                states: 4,
                actions: 3,
                horizon: 3,
                dim: 2,
            },
            algorithm,
            sabre: Some(SabreConfig {
                epochs: 0,
                final_episodes: 10,
                reward_scale: None,
                ..Default::default()
            }),
            seeds,
            ..Default::default()
        }
    }

    #[test]
    fn one_seed_ten_episodes_gives_ten_rows() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec {
            out: Some(dir.path().to_path_buf()),
            ..tabular_spec(Algorithm::Sabre, vec![7])
        };
        let report = run_experiment(&spec, &OracleChoice::Simulated).unwrap();
        assert_eq!(report.outcomes[0].rows.len(), 10);
        let rows = read_metrics(&dir.path().join("metrics-7.jsonl")).unwrap();
        assert_eq!(rows, report.outcomes[0].rows);
        assert!(dir.path().join("summary.csv").exists());
        assert!(dir.path().join("fig2-panels.csv").exists());
        let unsafe_spec = tabular_spec(Algorithm::UnsafeBlackbox, vec![7]);
        assert_eq!(run_experiment(&unsafe_spec, &OracleChoice::Simulated).unwrap().outcomes[0].rows.len(), 10);
        let clash = ExperimentSpec {
            out: Some(dir.path().to_path_buf()),
            ..unsafe_spec
        };
        assert!(matches!(run_experiment(&clash, &OracleChoice::Simulated), Err(Error::Config(_))));
        assert_eq!(read_metrics(&dir.path().join("metrics-7.jsonl")).unwrap(), rows);
    }

    #[test]
    fn spec_validation_and_serde() {
        assert!(tabular_spec(Algorithm::Sabre, vec![]).validate().is_err());
        let bad = ExperimentSpec {
            bucket: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let spec = tabular_spec(Algorithm::NaiveBaseline, vec![1, 2]);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentSpec>(&json).unwrap(), spec);
        let parsed: ExperimentSpec =
            serde_json::from_str(r#"{"env": {"kind": "block", "H": 4}, "algorithm": "unsafe-blackbox", "seeds": [3]}"#)
                .unwrap();
        assert_eq!(parsed.env, EnvSpec::Block(BlockEnvConfig { horizon: 4, ..Default::default() }));
        assert_eq!(parsed.algorithm, Algorithm::UnsafeBlackbox);
        let theorem = ExperimentSpec {
            preset: Preset::Theorem,
            ..Default::default()
        };
        assert_eq!(theorem.sabre_config(5, 21, 12).unwrap().iterations, 2184);
    }

    #[test]
    fn seeds_are_deterministic_and_cumulative_columns_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec {
            sabre: Some(SabreConfig {
                epochs: 2,
                rollouts: 10,
                explore_episodes: 50,
                final_episodes: 60,
                reward_scale: None,
                ..Default::default()
            }),
            out: Some(dir.path().to_path_buf()),
            ..tabular_spec(Algorithm::Sabre, vec![1, 2, 3])
        };
        let a = run_experiment(&spec, &OracleChoice::Simulated).unwrap();
        let bytes = std::fs::read(dir.path().join("metrics-2.jsonl")).unwrap();
        run_experiment(&spec, &OracleChoice::Simulated).unwrap();
        assert_eq!(bytes, std::fs::read(dir.path().join("metrics-2.jsonl")).unwrap());
        for o in &a.outcomes {
            assert_eq!(o.rows.last().unwrap().unsafe_actions_cum, 0);
            for w in o.rows.windows(2) {
                assert!(w[1].oracle_calls_cum >= w[0].oracle_calls_cum);
                assert!(w[1].unsafe_actions_cum >= w[0].unsafe_actions_cum);
            }
        }
    }

    #[test]
    fn summaries_match_raw_rows() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec {
            sabre: Some(SabreConfig {
                epochs: 1,
                rollouts: 20,
                explore_episodes: 30,
                final_episodes: 75,
                reward_scale: None,
                ..Default::default()
            }),
            bucket: 25,
            out: Some(dir.path().to_path_buf()),
            ..tabular_spec(Algorithm::Sabre, vec![4, 5, 6])
        };
        let report = run_experiment(&spec, &OracleChoice::Simulated).unwrap();
        let runs = read_metrics_dir(dir.path()).unwrap();
        assert_eq!(runs.len(), 1);
        let (name, runs) = &runs[0];
        assert_eq!(name, "sabre");
        assert_eq!(runs.len(), 3);
        let summary = summarize(runs, 25).unwrap();
        assert_eq!(summary, report.summary);
        assert_eq!(summary.len(), 4);
        let b = &summary[1];
        let per_seed: Vec<f64> = runs
            .iter()
            .map(|r| r[25..50].iter().map(|m| m.episode_return).sum::<f64>() / 25.0)
            .collect();
        let mean = per_seed.iter().sum::<f64>() / 3.0;
        let sd = (per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!((b.return_mean - mean).abs() < 1e-12);
        assert!((b.return_sem - sd / 3f64.sqrt()).abs() < 1e-12);
        let mut reader = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
        let from_csv: Vec<SummaryRow> = reader.deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(from_csv.len(), summary.len());
        assert!((from_csv[1].return_mean - b.return_mean).abs() < 1e-9);
        let panels = summarize_dir(dir.path(), 25).unwrap();
        assert_eq!(panels[0].1, summary);
        let mut reader = csv::Reader::from_path(dir.path().join("fig2-panels.csv")).unwrap();
        assert_eq!(reader.deserialize::<PanelRow>().count(), 3 * summary.len());
    }

    #[test]
    fn mean_sem_and_median() {
        assert_eq!(mean_sem(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_sem(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn naive_baseline_with_full_labels_never_queries() {
        let mut r = rng::seeded(21);
        let env = SafetyMdp::random(4, 3, 3, 2, &mut r).unwrap();
        let mut full = SafetyDataset::new();
        for (s, row) in env.features.iter().enumerate() {
            for (a, support) in row.iter().enumerate() {
                if a != env.a_safe {
                    full.insert(crate::safety::LabeledPair::new(support[0].1.clone(), a, env.safe[s][a]))
                        .unwrap();
                }
            }
        }
        let config = SabreConfig {
            reward_scale: None,
            ..Default::default()
        };
        let blackbox = UcbviBlackbox(UcbviConfig::default());
        let mut oracle = oracle_for(&env, &OracleChoice::Simulated);
        let run = run_naive_baseline(&env, &mut oracle, &blackbox, &config, 300, 300, &full, 3).unwrap();
        assert_eq!(oracle.ledger().total, 0);
        assert_eq!(run.totals.unsafe_actions, 0);

        // the same call without any labeling machinery
        let vs = VersionSpace::from_dataset(HalfspaceClass::new(2).unwrap(), &full).unwrap();
        let request = BlackboxRequest {
            reward: config.learner_reward(&env),
            mask: Some(&vs),
            a_safe: env.a_safe,
            epsilon: config.epsilon_r,
            delta: config.delta_r,
            episodes: 300,
        };
        let mut returns = Vec::new();
        blackbox
            .train(&env, &request, call_seed(3, 0), &mut |t| {
                returns.push(t.total_return());
                Ok(())
            })
            .unwrap();
        let got: Vec<f64> = run.metrics.iter().map(|m| m.episode_return).collect();
        assert_eq!(got, returns);
    }

    #[test]
    fn naive_baseline_starts_with_the_safe_action_only() {
        let env = build_block_env(5, 8).unwrap();
        let config = SabreConfig::default();
        let blackbox = PgBlackbox(PgHyperparams {
            hidden: 8,
            ..Default::default()
        });
        let mut oracle = oracle_for(&env, &OracleChoice::Simulated);
        let mut first_round = Vec::new();
        {
            let vs = VersionSpace::new(HalfspaceClass::new(env.feature_dim()).unwrap());
            let request = BlackboxRequest {
                reward: config.learner_reward(&env),
                mask: Some(&vs),
                a_safe: env.a_safe(),
                epsilon: 0.1,
                delta: 0.1,
                episodes: 20,
            };
            blackbox
                .train(&env, &request, call_seed(1, 0), &mut |t| {
                    first_round.push(t.steps.iter().map(|s| s.action).collect::<Vec<_>>());
                    Ok(())
                })
                .unwrap();
        }
        assert!(first_round.iter().flatten().all(|&a| a == env.a_safe()));
        let run = run_naive_baseline(&env, &mut oracle, &blackbox, &config, 60, 20, &SafetyDataset::new(), 1).unwrap();
        assert_eq!(run.totals.unsafe_actions, 0);
        assert_eq!(run.metrics.len(), 60);
        assert_eq!(run.iterations.len(), 3);
        // labels arrive between rounds only
        assert!(run.metrics[..20].iter().all(|m| m.oracle_calls_cum == 0));
        assert!(run.iterations[0].oracle_calls > 0);
    }
}
