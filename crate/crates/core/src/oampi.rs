//! The evaluation/improvement driver: one-step and iterative runs, sweeps
//! over configurations and seeds, and run records.

use crate::dataset::{Dataset, WeightVector};
use crate::envs::{bandit_eval, bandit_generate, EnvError, GridMdp, BANDIT_BEHAVIOR_RETURN};
use crate::numerics::RngStream;
use crate::operators::{
    fit_behavior, fit_q_sarsa, pctbc_weights, weighted_imitation, weighted_imitation_refreshing, FilterConfig,
    FilterVariant, Fitted, PolicyLearner, PushforwardTable, QLearner, QuantileMode, Refresh, Stage, TrainError,
    TrainHyper,
};
use crate::oracle::{prop1_diagnostics_rows, OracleError};
use crate::policy::{ActMode, Policy, QNetwork};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("{message} (last stable snapshot at step {last_step})")]
    Diverged { message: String, last_step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Bandit,
    Grid,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Bandit => "bandit",
            Self::Grid => "grid",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bandit" => Ok(Self::Bandit),
            "grid" => Ok(Self::Grid),
            _ => Err(format!("unknown environment `{s}` (expected bandit or grid)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    OneStep,
    Iterative,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Self::OneStep => "one-step",
            Self::Iterative => "iterative",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "one-step" => Ok(Self::OneStep),
            "iterative" => Ok(Self::Iterative),
            _ => Err(format!("unknown regime `{s}` (expected one-step or iterative)")),
        }
    }
}

/// Everything that determines one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvKind,
    /// Grid map text; the built-in map when absent.
    pub grid_map: Option<String>,
    pub gamma: f64,
    /// Transitions for the bandit, episodes for the grid.
    pub n: usize,
    pub max_episode_steps: usize,
    /// Weight on the shortest-path action in the grid behavior mixture.
    pub behavior_greedy: f64,
    pub seed: u64,
    pub regime: Regime,
    pub behavior: TrainHyper,
    pub q: TrainHyper,
    pub policy: TrainHyper,
    /// Policy steps in the iterative phase.
    pub iterative_steps: usize,
    pub q_steps_per_policy_step: usize,
    /// Re-initialize the iterative `Q` instead of starting from `Q^β`.
    pub cold_start: bool,
    pub filter: FilterConfig,
    pub eval_states: usize,
    pub eval_mode: ActMode,
    pub snapshots: usize,
    /// States used for the filtered-W1 diagnostic (0 disables it).
    pub diag_states: usize,
}

impl RunConfig {
    /// Contextual bandit with quantile filtering at `tau`.
    pub fn bandit(n: usize, tau: f64, seed: u64) -> Self {
        let hyper = TrainHyper::new(1000, 64, 1e-3, 50, 2);
        let mut filter = FilterConfig::qfil(tau);
        filter.refresh = Refresh::Cached;
        Self {
            env: EnvKind::Bandit,
            grid_map: None,
            gamma: 0.99,
            n,
            max_episode_steps: 1,
            behavior_greedy: 0.5,
            seed,
            regime: Regime::OneStep,
            behavior: hyper,
            q: hyper,
            policy: hyper,
            iterative_steps: 1000,
            q_steps_per_policy_step: 2,
            cold_start: false,
            filter,
            eval_states: 100,
            eval_mode: ActMode::Sampled,
            snapshots: 10,
            diag_states: 100,
        }
    }

    /// Default 8×8 gridworld with `n` behavior episodes.
    pub fn grid(n: usize, tau: f64, seed: u64, regime: Regime) -> Self {
        let mut filter = FilterConfig::qfil(tau);
        filter.comparison = crate::operators::Comparison::Ge;
        filter.quantile_mode = QuantileMode::Exact;
        filter.refresh = Refresh::Cached;
        Self {
            env: EnvKind::Grid,
            grid_map: None,
            gamma: 0.99,
            n,
            max_episode_steps: 200,
            behavior_greedy: 0.5,
            seed,
            regime,
            behavior: TrainHyper::new(5_000, 64, 1e-3, 64, 2),
            q: TrainHyper::new(20_000, 64, 1e-3, 64, 2),
            policy: TrainHyper::new(5_000, 64, 1e-3, 64, 2),
            iterative_steps: 10_000,
            q_steps_per_policy_step: 2,
            cold_start: false,
            filter,
            eval_states: 0,
            eval_mode: ActMode::Sampled,
            snapshots: 10,
            diag_states: 100,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if self.n == 0 {
            return bad("dataset size must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        for (name, h) in [("behavior", &self.behavior), ("q", &self.q), ("policy", &self.policy)] {
            if h.steps == 0 || h.batch == 0 || !(h.lr > 0.0) {
                return Err(RunError::Config(format!("{name} budget must have positive steps, batch and lr")));
            }
        }
        if self.regime == Regime::Iterative && self.q_steps_per_policy_step == 0 {
            return bad("iterative runs need at least one q step per policy step");
        }
        if self.env == EnvKind::Bandit && self.eval_states == 0 {
            return bad("bandit evaluation needs at least one state");
        }
        if self.env == EnvKind::Grid && self.max_episode_steps == 0 {
            return bad("grid episodes need a positive step limit");
        }
        if self.env == EnvKind::Bandit && self.filter.quantile_mode == QuantileMode::Exact {
            return bad("exact quantiles need a finite action set");
        }
        self.filter.validate()?;
        Ok(())
    }

    /// Stable hash of the configuration without its seed: the first 16 hex
    /// digits of the SHA-256 of its JSON form.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn needs_q(&self) -> bool {
        matches!(self.filter.variant, FilterVariant::Qfil | FilterVariant::Expadv) || self.regime == Regime::Iterative
    }

    /// Key of the shared prefix (dataset, behavior policy, `Q^β`).
    fn prefix_key(&self) -> String {
        serde_json::to_string(&(
            self.env,
            &self.grid_map,
            self.gamma,
            self.n,
            self.max_episode_steps,
            self.behavior_greedy,
            self.seed,
            self.behavior,
            self.q,
        ))
        .expect("key serializes")
    }
}

/// Policy value at one point of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub mean_return: f64,
    pub std_err: f64,
}

/// Statistics of one run. The wall-clock time is reported separately and
/// not serialized, so records of identical runs are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub seed: u64,
    pub env: EnvKind,
    pub n: usize,
    pub regime: Regime,
    pub variant: FilterVariant,
    pub level: f64,
    pub dataset_rows: usize,
    pub mean_return: f64,
    pub std_err: f64,
    pub behavior_return: f64,
    pub behavior_std_err: f64,
    /// Return of the policy that generated the data.
    pub data_return: f64,
    /// One-step policy value, recorded for iterative runs.
    pub one_step_return: Option<f64>,
    pub exact: bool,
    pub keep_rate_trace: Vec<f64>,
    pub w1_trace: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    pub behavior_loss: Vec<f64>,
    pub q_loss: Vec<f64>,
    pub policy_loss: Vec<f64>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

enum World {
    Bandit,
    Grid(GridMdp),
}

impl World {
    fn build(cfg: &RunConfig) -> Result<Self, RunError> {
        Ok(match cfg.env {
            EnvKind::Bandit => World::Bandit,
            EnvKind::Grid => World::Grid(match &cfg.grid_map {
                Some(text) => GridMdp::from_map(text, cfg.gamma)?,
                None => GridMdp::from_map(crate::envs::DEFAULT_MAP, cfg.gamma)?,
            }),
        })
    }

    fn generate(&self, cfg: &RunConfig, rng: &mut RngStream) -> Result<Dataset, RunError> {
        Ok(match self {
            World::Bandit => bandit_generate(cfg.n, rng)?,
            World::Grid(mdp) => mdp.generate(&mdp.behavior_policy(cfg.behavior_greedy), cfg.n, cfg.max_episode_steps, rng)?,
        })
    }

    fn data_return(&self, cfg: &RunConfig) -> Result<f64, RunError> {
        Ok(match self {
            World::Bandit => BANDIT_BEHAVIOR_RETURN,
            World::Grid(mdp) => mdp.exact_eval(&mdp.behavior_policy(cfg.behavior_greedy))?.j,
        })
    }

    /// Sampled return on fresh bandit states or the exact grid value.
    fn evaluate(&self, policy: &Policy, cfg: &RunConfig, root: &RngStream) -> Result<(f64, f64), RunError> {
        match self {
            World::Bandit => {
                let stats = bandit_eval(policy, cfg.eval_states, &mut root.fork("eval"), cfg.eval_mode)?;
                Ok((stats.mean, stats.std_err))
            }
            World::Grid(mdp) => Ok((mdp.exact_eval(policy)?.j, 0.0)),
        }
    }
}

/// Dataset, behavior policy and `Q^β` for one (data, seed) setting, with
/// pushforward tables built on demand.
struct Prefix {
    world: World,
    ds: Dataset,
    beta: Fitted<Policy>,
    q: Option<Fitted<QNetwork>>,
    tables: BTreeMap<(usize, bool), PushforwardTable>,
    root: RngStream,
}

impl Prefix {
    fn new(cfg: &RunConfig) -> Result<Self, RunError> {
        let root = RngStream::new(cfg.seed, "run");
        let world = World::build(cfg)?;
        let ds = world.generate(cfg, &mut root.fork("data"))?;
        let beta = fit_behavior(&ds, &cfg.behavior, &root.fork("behavior"))?;
        Ok(Self {
            world,
            ds,
            beta,
            q: None,
            tables: BTreeMap::new(),
            root,
        })
    }

    fn q(&mut self, cfg: &RunConfig) -> Result<&Fitted<QNetwork>, RunError> {
        if self.q.is_none() {
            self.q = Some(fit_q_sarsa(&self.ds, &cfg.q, cfg.gamma, &self.root.fork("q"))?);
        }
        Ok(self.q.as_ref().expect("just set"))
    }

    fn table(&mut self, cfg: &RunConfig) -> Result<&PushforwardTable, RunError> {
        let key = (cfg.filter.samples, cfg.filter.quantile_mode == QuantileMode::Exact);
        if !self.tables.contains_key(&key) {
            self.q(cfg)?;
            let q = &self.q.as_ref().expect("fitted above").net;
            let rows: Vec<usize> = (0..self.ds.len()).collect();
            let table = PushforwardTable::build(
                &self.ds,
                &rows,
                q,
                &self.beta.net,
                cfg.filter.samples,
                cfg.filter.quantile_mode,
                &mut self.root.fork("weights"),
            )
            .map_err(RunError::from)?;
            self.tables.insert(key, table);
        }
        Ok(&self.tables[&key])
    }
}

/// Mean over at most `max_points` equal chunks.
pub fn downsample(xs: &[f64], max_points: usize) -> Vec<f64> {
    if xs.len() <= max_points || max_points == 0 {
        return xs.to_vec();
    }
    let chunk = xs.len().div_ceil(max_points);
    xs.chunks(chunk).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

const TRACE_POINTS: usize = 100;

fn diag_rows(ds: &Dataset, k: usize) -> Vec<usize> {
    (0..ds.len().min(k)).collect()
}

fn w1_diagnostic(prefix: &Prefix, q: &QNetwork, cfg: &RunConfig, label: &str) -> Result<Option<f64>, RunError> {
    if cfg.filter.variant != FilterVariant::Qfil || cfg.diag_states == 0 {
        return Ok(None);
    }
    let rows = diag_rows(&prefix.ds, cfg.diag_states);
    let report = prop1_diagnostics_rows(
        &prefix.ds,
        &rows,
        q,
        &prefix.beta.net,
        cfg.filter.tau,
        cfg.filter.samples,
        &mut prefix.root.fork(label),
    )?;
    Ok(Some(report.w1_term))
}

fn run_with_prefix(cfg: &RunConfig, prefix: &mut Prefix) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let start = Instant::now();
    let improve_rng = prefix.root.fork("improve");
    let mut keep_rates = Vec::new();
    let mut w1_trace = Vec::new();
    let (pi, policy_loss) = match cfg.filter.variant {
        FilterVariant::None => (prefix.beta.net.clone(), Vec::new()),
        FilterVariant::Pctbc => {
            let w = pctbc_weights(&prefix.ds, cfg.filter.keep_fraction)?;
            keep_rates.push(w.keep_rate());
            let fit = weighted_imitation(&prefix.ds, &w, &prefix.beta.net, &cfg.policy, &improve_rng)?;
            (fit.net, fit.losses)
        }
        FilterVariant::Qfil | FilterVariant::Expadv => match cfg.filter.refresh {
            Refresh::Cached => {
                let out = prefix.table(cfg)?.filter(&cfg.filter)?;
                keep_rates.push(out.weights.keep_rate());
                let fit = weighted_imitation(&prefix.ds, &out.weights, &prefix.beta.net, &cfg.policy, &improve_rng)?;
                (fit.net, fit.losses)
            }
            Refresh::PerEpoch => {
                prefix.q(cfg)?;
                let q = &prefix.q.as_ref().expect("fitted above").net;
                let (fit, rates) = weighted_imitation_refreshing(
                    &prefix.ds,
                    q,
                    &prefix.beta.net,
                    &cfg.filter,
                    &prefix.beta.net,
                    &cfg.policy,
                    &improve_rng,
                )?;
                keep_rates.extend(rates);
                (fit.net, fit.losses)
            }
        },
    };
    if cfg.filter.variant == FilterVariant::Qfil {
        let q = prefix.q(cfg)?.net.clone();
        w1_trace.extend(w1_diagnostic(prefix, &q, cfg, "diagnostics")?);
    }
    let (behavior_return, behavior_std_err) = prefix.world.evaluate(&prefix.beta.net, cfg, &prefix.root)?;
    let (mut mean_return, mut std_err) = prefix.world.evaluate(&pi, cfg, &prefix.root)?;
    let mut snapshots = Vec::new();
    let mut one_step_return = None;
    let mut policy_loss = policy_loss;
    let mut q_loss = if cfg.needs_q() {
        prefix.q(cfg)?.losses.clone()
    } else {
        Vec::new()
    };

    if cfg.regime == Regime::Iterative && cfg.filter.variant != FilterVariant::None {
        one_step_return = Some(mean_return);
        let it = iterate(cfg, prefix, pi)?;
        mean_return = it.mean_return;
        std_err = it.std_err;
        snapshots = it.snapshots;
        keep_rates.extend(it.keep_rates);
        w1_trace.extend(it.w1_trace);
        policy_loss.extend(it.policy_loss);
        q_loss.extend(it.q_loss);
    }

    let result = RunResult {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        env: cfg.env,
        n: cfg.n,
        regime: cfg.regime,
        variant: cfg.filter.variant,
        level: cfg.filter.level(),
        dataset_rows: prefix.ds.len(),
        mean_return,
        std_err,
        behavior_return,
        behavior_std_err,
        data_return: prefix.world.data_return(cfg)?,
        one_step_return,
        exact: matches!(prefix.world, World::Grid(_)),
        keep_rate_trace: keep_rates,
        w1_trace,
        snapshots,
        behavior_loss: downsample(&prefix.beta.losses, TRACE_POINTS),
        q_loss: downsample(&q_loss, TRACE_POINTS),
        policy_loss: downsample(&policy_loss, TRACE_POINTS),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    if !(result.mean_return.is_finite() && result.behavior_return.is_finite()) {
        return Err(RunError::Config("non-finite evaluation".into()));
    }
    Ok(result)
}

struct IterOutcome {
    mean_return: f64,
    std_err: f64,
    snapshots: Vec<Snapshot>,
    keep_rates: Vec<f64>,
    w1_trace: Vec<f64>,
    policy_loss: Vec<f64>,
    q_loss: Vec<f64>,
}

/// Interleaved policy and off-policy `Q` steps starting from the one-step
/// policy and `Q^β`. Filter baselines always use the behavior pushforward.
fn iterate(cfg: &RunConfig, prefix: &mut Prefix, pi: Policy) -> Result<IterOutcome, RunError> {
    let rng = prefix.root.fork("iterative");
    let q_init = if cfg.cold_start {
        QNetwork::new(prefix.ds.env(), cfg.q.width, cfg.q.depth, &mut rng.fork("q-init")).map_err(TrainError::from)?
    } else {
        prefix.q(cfg)?.net.clone()
    };
    let mut q_learner = QLearner::new(q_init, cfg.q.lr, cfg.gamma, Stage::Iterative);
    let mut pi_learner = PolicyLearner::new(pi, cfg.policy.lr, Stage::Iterative);
    let fixed = match cfg.filter.variant {
        FilterVariant::Pctbc => Some(pctbc_weights(&prefix.ds, cfg.filter.keep_fraction)?),
        _ => None,
    };
    let mut batches = rng.fork("batches");
    let mut samples = rng.fork("pushforward");
    let mut next_actions = rng.fork("next-actions");
    let every = (cfg.iterative_steps / cfg.snapshots.max(1)).max(1);
    let mut out = IterOutcome {
        mean_return: 0.0,
        std_err: 0.0,
        snapshots: Vec::new(),
        keep_rates: Vec::new(),
        w1_trace: Vec::new(),
        policy_loss: Vec::with_capacity(cfg.iterative_steps),
        q_loss: Vec::with_capacity(cfg.iterative_steps * cfg.q_steps_per_policy_step),
    };
    let mut kept = 0.0;
    let mut seen = 0usize;
    let mut last_stable = 0;
    let wrap = |e: TrainError, last: usize| RunError::Diverged {
        message: e.to_string(),
        last_step: last,
    };
    for step in 0..cfg.iterative_steps {
        let idx = prefix.ds.sample_indices(cfg.policy.batch, &mut batches).map_err(TrainError::from)?;
        let w: Vec<f64> = match &fixed {
            Some(w) => idx.iter().map(|&i| w.as_slice()[i]).collect(),
            None => {
                let table = PushforwardTable::build(
                    &prefix.ds,
                    &idx,
                    q_learner.q(),
                    &prefix.beta.net,
                    cfg.filter.samples,
                    cfg.filter.quantile_mode,
                    &mut samples,
                )?;
                table.filter(&cfg.filter)?.weights.as_slice().to_vec()
            }
        };
        kept += w.iter().filter(|&&x| x > 0.0).count() as f64;
        seen += w.len();
        out.policy_loss
            .push(pi_learner.step(&prefix.ds, &idx, &w).map_err(|e| wrap(e, last_stable))?);
        for _ in 0..cfg.q_steps_per_policy_step {
            let qi = prefix.ds.sample_indices(cfg.q.batch, &mut batches).map_err(TrainError::from)?;
            let loss = q_learner
                .offpolicy_step(&prefix.ds, &qi, pi_learner.policy(), &mut next_actions)
                .map_err(|e| wrap(e, last_stable))?;
            out.q_loss.push(loss);
        }
        if (step + 1) % every == 0 || step + 1 == cfg.iterative_steps {
            let (m, se) = prefix.world.evaluate(pi_learner.policy(), cfg, &prefix.root)?;
            out.snapshots.push(Snapshot {
                step: step + 1,
                mean_return: m,
                std_err: se,
            });
            out.keep_rates.push(kept / seen.max(1) as f64);
            kept = 0.0;
            seen = 0;
            let label = format!("diagnostics-{}", step + 1);
            out.w1_trace.extend(w1_diagnostic(prefix, q_learner.q(), cfg, &label)?);
            last_stable = step + 1;
        }
    }
    let (m, se) = prefix.world.evaluate(pi_learner.policy(), cfg, &prefix.root)?;
    out.mean_return = m;
    out.std_err = se;
    Ok(out)
}

/// One-step run: behavior cloning, `Q^β`, filter weights, weighted
/// imitation from `β̂`, evaluation.
pub fn run_one_step(cfg: &RunConfig) -> Result<RunResult, RunError> {
    if cfg.regime != Regime::OneStep {
        return Err(RunError::Config("run_one_step needs the one-step regime".into()));
    }
    cfg.validate()?;
    run_with_prefix(cfg, &mut Prefix::new(cfg)?)
}

/// Iterative run: the one-step pipeline, then interleaved policy and
/// off-policy `Q` steps with periodic snapshots.
pub fn run_iterative(cfg: &RunConfig) -> Result<RunResult, RunError> {
    if cfg.regime != Regime::Iterative {
        return Err(RunError::Config("run_iterative needs the iterative regime".into()));
    }
    cfg.validate()?;
    run_with_prefix(cfg, &mut Prefix::new(cfg)?)
}

pub fn run(cfg: &RunConfig) -> Result<RunResult, RunError> {
    cfg.validate()?;
    run_with_prefix(cfg, &mut Prefix::new(cfg)?)
}

/// A failed run in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub config_hash: String,
    pub seed: u64,
    pub env: EnvKind,
    pub n: usize,
    pub regime: Regime,
    pub variant: FilterVariant,
    pub level: f64,
    pub error: String,
}

/// One line of the record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Record {
    Ok(RunResult),
    Failed(RunFailure),
}

impl Record {
    pub fn result(&self) -> Option<&RunResult> {
        match self {
            Record::Ok(r) => Some(r),
            Record::Failed(_) => None,
        }
    }

    fn from_outcome(cfg: &RunConfig, outcome: Result<RunResult, RunError>) -> Self {
        match outcome {
            Ok(r) => Record::Ok(r),
            Err(e) => Record::Failed(RunFailure {
                config_hash: cfg.hash(),
                seed: cfg.seed,
                env: cfg.env,
                n: cfg.n,
                regime: cfg.regime,
                variant: cfg.filter.variant,
                level: cfg.filter.level(),
                error: e.to_string(),
            }),
        }
    }
}

/// Every config paired with every seed.
pub fn expand_seeds(grid: &[RunConfig], seeds: &[u64]) -> Vec<RunConfig> {
    grid.iter()
        .flat_map(|c| {
            seeds.iter().map(move |&s| RunConfig {
                seed: s,
                ..c.clone()
            })
        })
        .collect()
}

/// Runs every configuration, sharing dataset, behavior policy and `Q^β`
/// across configurations that agree on them. Groups run in parallel on
/// `workers` threads; results come back in input order and failures are
/// recorded rather than aborting the sweep.
pub fn sweep(configs: &[RunConfig], workers: usize) -> Result<Vec<Record>, RunError> {
    if configs.is_empty() {
        return Err(RunError::Config("empty sweep".into()));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, c) in configs.iter().enumerate() {
        groups.entry(c.prefix_key()).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| RunError::Config(e.to_string()))?;
    let done: Vec<Vec<(usize, Record)>> = pool.install(|| {
        groups
            .par_iter()
            .map(|members| {
                let first = &configs[members[0]];
                match Prefix::new(first) {
                    Ok(mut prefix) => members
                        .iter()
                        .map(|&i| {
                            let cfg = &configs[i];
                            let out = cfg.validate().and_then(|_| run_with_prefix(cfg, &mut prefix));
                            if let Ok(r) = &out {
                                log_run(r);
                            }
                            (i, Record::from_outcome(cfg, out))
                        })
                        .collect(),
                    Err(e) => {
                        let msg = e.to_string();
                        members
                            .iter()
                            .map(|&i| (i, Record::from_outcome(&configs[i], Err(RunError::Config(msg.clone())))))
                            .collect()
                    }
                }
            })
            .collect()
    });
    let mut out: Vec<Option<Record>> = vec![None; configs.len()];
    for (i, r) in done.into_iter().flatten() {
        out[i] = Some(r);
    }
    Ok(out.into_iter().map(|r| r.expect("every config ran")).collect())
}

fn log_run(r: &RunResult) {
    if std::env::var_os("QFIL_QUIET").is_none() {
        eprintln!(
            "[{}] {} {} n={} level={} seed={} return={:.4} ({:.2}s)",
            r.config_hash,
            r.env.name(),
            r.variant.name(),
            r.n,
            r.level,
            r.seed,
            r.mean_return,
            r.wall_clock_secs
        );
    }
}

/// Appends records as JSON lines.
pub fn append_records(path: impl AsRef<Path>, records: &[Record]) -> Result<(), RunError> {
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Record>, RunError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(RunError::from))
        .collect()
}

/// Across-seed statistics of one sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub env: EnvKind,
    pub regime: Regime,
    pub variant: FilterVariant,
    pub n: usize,
    pub level: f64,
    pub runs: usize,
    pub failures: usize,
    pub mean: f64,
    /// Sample standard deviation across seeds (`None` with one run).
    pub std: Option<f64>,
    pub behavior_mean: f64,
    pub one_step_mean: Option<f64>,
    pub exact: bool,
}

impl CellSummary {
    pub fn std_err(&self) -> Option<f64> {
        self.std.map(|s| s / (self.runs as f64).sqrt())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

type CellKey = (EnvKind, Regime, FilterVariant, usize, u64);

/// Groups records by (env, regime, variant, N, level).
pub fn summarize(records: &[Record]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<CellKey, (Vec<&RunResult>, usize)> = BTreeMap::new();
    for r in records {
        let key = match r {
            Record::Ok(x) => (x.env, x.regime, x.variant, x.n, x.level.to_bits()),
            Record::Failed(f) => (f.env, f.regime, f.variant, f.n, f.level.to_bits()),
        };
        let entry = cells.entry(key).or_default();
        match r {
            Record::Ok(x) => entry.0.push(x),
            Record::Failed(_) => entry.1 += 1,
        }
    }
    cells
        .into_iter()
        .filter(|(_, (ok, _))| !ok.is_empty())
        .map(|((env, regime, variant, n, level), (ok, failures))| {
            let returns: Vec<f64> = ok.iter().map(|r| r.mean_return).collect();
            let behavior: Vec<f64> = ok.iter().map(|r| r.behavior_return).collect();
            let one_step: Vec<f64> = ok.iter().filter_map(|r| r.one_step_return).collect();
            CellSummary {
                env,
                regime,
                variant,
                n,
                level: f64::from_bits(level),
                runs: ok.len(),
                failures,
                mean: mean(&returns),
                std: sample_std(&returns),
                behavior_mean: mean(&behavior),
                one_step_mean: (!one_step.is_empty()).then(|| mean(&one_step)),
                exact: ok.iter().all(|r| r.exact),
            }
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

/// CSV keyed by (env, regime, variant, N, level).
pub fn write_summary_csv<W: Write>(cells: &[CellSummary], mut w: W) -> std::io::Result<()> {
    writeln!(w, "env,regime,variant,n,level,runs,failures,mean,std,behavior_mean,one_step_mean,exact_j")?;
    for c in cells {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            c.env.name(),
            c.regime.name(),
            c.variant.name(),
            c.n,
            c.level,
            c.runs,
            c.failures,
            c.mean,
            opt(c.std),
            c.behavior_mean,
            opt(c.one_step_mean),
            if c.exact { format!("{}", c.mean) } else { String::new() }
        )?;
    }
    Ok(())
}

/// Fixed-width table, one row per cell, `mean ± std` of the return.
pub fn write_summary_table<W: Write>(cells: &[CellSummary], mut w: W) -> std::io::Result<()> {
    let exact = cells.iter().any(|c| c.exact);
    write!(w, "{:<7} {:<10} {:<7} {:>7} {:>7} {:>5} {:>20} {:>10}", "env", "regime", "variant", "N", "level", "runs", "return", "behavior")?;
    if exact {
        write!(w, " {:>10}", "exact J")?;
    }
    writeln!(w)?;
    for c in cells {
        let ret = match c.std {
            Some(s) => format!("{:.4} ± {:.4}", c.mean, s),
            None => format!("{:.4}", c.mean),
        };
        write!(
            w,
            "{:<7} {:<10} {:<7} {:>7} {:>7} {:>5} {:>20} {:>10.4}",
            c.env.name(),
            c.regime.name(),
            c.variant.name(),
            c.n,
            c.level,
            c.runs,
            ret,
            c.behavior_mean
        )?;
        if exact {
            write!(w, " {:>10}", if c.exact { format!("{:.4}", c.mean) } else { "-".into() })?;
        }
        writeln!(w)?;
    }
    Ok(())
}

impl fmt::Display for RunResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} n={} level={} seed={}: return {:.4} (behavior {:.4})",
            self.env.name(),
            self.regime.name(),
            self.variant.name(),
            self.n,
            self.level,
            self.seed,
            self.mean_return,
            self.behavior_return
        )
    }
}

/// Dataset and filter weights of a configuration, without training the
/// improved policy.
pub fn run_weights(cfg: &RunConfig) -> Result<(Dataset, crate::operators::FilterOutput), RunError> {
    cfg.validate()?;
    let mut prefix = Prefix::new(cfg)?;
    let out = match cfg.filter.variant {
        FilterVariant::Qfil | FilterVariant::Expadv => prefix.table(cfg)?.filter(&cfg.filter)?,
        FilterVariant::Pctbc => {
            let weights = pctbc_weights(&prefix.ds, cfg.filter.keep_fraction)?;
            let n = weights.len();
            crate::operators::FilterOutput {
                weights,
                q: vec![f64::NAN; n],
                v: vec![f64::NAN; n],
            }
        }
        FilterVariant::None => {
            let n = prefix.ds.len();
            crate::operators::FilterOutput {
                weights: WeightVector::ones(n),
                q: vec![f64::NAN; n],
                v: vec![f64::NAN; n],
            }
        }
    };
    Ok((prefix.ds, out))
}

/// Diagnostics for a trained one-step run at its own `τ`.
pub fn run_diagnostics(cfg: &RunConfig) -> Result<crate::oracle::DiagnosticsReport, RunError> {
    cfg.validate()?;
    let mut prefix = Prefix::new(cfg)?;
    let q = prefix.q(cfg)?.net.clone();
    let rows = diag_rows(&prefix.ds, cfg.diag_states.max(1));
    Ok(prop1_diagnostics_rows(
        &prefix.ds,
        &rows,
        &q,
        &prefix.beta.net,
        cfg.filter.tau,
        cfg.filter.samples,
        &mut prefix.root.fork("diagnostics"),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bandit(n: usize, tau: f64, seed: u64) -> RunConfig {
        let mut c = RunConfig::bandit(n, tau, seed);
        let h = TrainHyper::new(50, 32, 1e-3, 16, 2);
        c.behavior = h;
        c.q = h;
        c.policy = h;
        c.iterative_steps = 20;
        c.diag_states = 10;
        c
    }

    fn tiny_grid(seed: u64, regime: Regime) -> RunConfig {
        let mut c = RunConfig::grid(20, 0.75, seed, regime);
        let h = TrainHyper::new(100, 32, 1e-3, 16, 2);
        c.behavior = h;
        c.q = h;
        c.policy = h;
        c.iterative_steps = 40;
        c.diag_states = 10;
        c
    }

    fn json(r: &RunResult) -> String {
        serde_json::to_string(r).unwrap()
    }

    #[test]
    fn no_filter_returns_behavior_policy() {
        let mut c = tiny_bandit(300, 0.9, 3);
        c.filter = FilterConfig::none();
        let r = run(&c).unwrap();
        assert_eq!(r.mean_return.to_bits(), r.behavior_return.to_bits());
        assert!(r.policy_loss.is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let c = tiny_bandit(300, 0.75, 11);
        assert_eq!(json(&run(&c).unwrap()), json(&run(&c).unwrap()));
        let g = tiny_grid(2, Regime::Iterative);
        assert_eq!(json(&run(&g).unwrap()), json(&run(&g).unwrap()));
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = tiny_bandit(300, 0.75, 1);
        let b = tiny_bandit(300, 0.75, 2);
        let c = tiny_bandit(300, 0.9, 1);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn sweep_matches_independent_runs() {
        let configs = expand_seeds(&[tiny_bandit(300, 0.5, 0), tiny_bandit(300, 0.9, 0)], &[4, 5]);
        let records = sweep(&configs, 2).unwrap();
        assert_eq!(records.len(), 4);
        for (c, rec) in configs.iter().zip(&records) {
            let got = rec.result().expect("run succeeds");
            assert_eq!(got.seed, c.seed);
            assert_eq!(json(got), json(&run(c).unwrap()));
        }
        let single = sweep(&configs[..1], 1).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn sweep_records_failures() {
        let mut bad = tiny_bandit(300, 0.5, 0);
        bad.filter.tau = 1.5;
        let records = sweep(&[bad, tiny_bandit(300, 0.5, 0)], 1).unwrap();
        assert!(matches!(records[0], Record::Failed(_)));
        assert!(matches!(records[1], Record::Ok(_)));
    }

    #[test]
    fn zero_iterative_steps_equal_one_step() {
        let one = tiny_grid(1, Regime::OneStep);
        let mut it = tiny_grid(1, Regime::Iterative);
        it.iterative_steps = 0;
        let a = run(&one).unwrap();
        let b = run(&it).unwrap();
        assert_eq!(a.mean_return.to_bits(), b.mean_return.to_bits());
        assert_eq!(b.one_step_return.map(f64::to_bits), Some(a.mean_return.to_bits()));
        assert!(b.exact);
    }

    #[test]
    fn records_round_trip() {
        let configs = expand_seeds(&[tiny_bandit(200, 0.75, 0)], &[1, 2]);
        let mut records = sweep(&configs, 1).unwrap();
        let mut bad = tiny_bandit(200, 0.75, 9);
        bad.n = 0;
        records.extend(sweep(&[bad], 1).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.jsonl");
        append_records(&path, &records[..1]).unwrap();
        append_records(&path, &records[1..]).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(serde_json::to_string(a).unwrap(), serde_json::to_string(b).unwrap());
        }
    }

    #[test]
    fn summary_statistics() {
        let configs = expand_seeds(&[tiny_bandit(200, 0.75, 0)], &[1, 2, 3]);
        let records = sweep(&configs, 3).unwrap();
        let cells = summarize(&records);
        assert_eq!(cells.len(), 1);
        let returns: Vec<f64> = records.iter().map(|r| r.result().unwrap().mean_return).collect();
        let m = returns.iter().sum::<f64>() / 3.0;
        assert!((cells[0].mean - m).abs() < 1e-12);
        assert!((cells[0].std.unwrap() - sample_std(&returns).unwrap()).abs() < 1e-12);
        let mut csv = Vec::new();
        write_summary_csv(&cells, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 2);
        assert_eq!(sample_std(&[1.0]), None);
    }

    #[test]
    fn cold_start_changes_iterative_phase_only() {
        let warm = tiny_grid(0, Regime::Iterative);
        let mut cold = warm.clone();
        cold.cold_start = true;
        let a = run(&warm).unwrap();
        let b = run(&cold).unwrap();
        assert_eq!(a.one_step_return, b.one_step_return);
        assert_eq!(a.behavior_return, b.behavior_return);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny_bandit(100, 0.5, 0);
        c.filter.quantile_mode = QuantileMode::Exact;
        assert!(matches!(run(&c), Err(RunError::Config(_))));
        let mut c = tiny_bandit(100, 0.5, 0);
        c.gamma = 1.0;
        assert!(run(&c).is_err());
    }
}
