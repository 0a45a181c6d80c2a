//! Policy evaluation (behavior cloning, SARSA fitted-Q, off-policy backup)
//! and policy improvement (quantile filtering, exponentiated advantage,
//! top-return cloning).

use crate::dataset::{Dataset, DatasetError, WeightVector};
use crate::distributions::{ActionHead, CategoricalHead, DistError};
use crate::numerics::{Batch, MlpGrads, NumericsError, OptState, RngStream};
use crate::policy::{Policy, PolicyTable, QNetwork};
use crate::quantile::{empirical_quantile, weighted_quantile, QuantileError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use thiserror::Error;

/// Target-network EMA rate.
pub const TARGET_RATE: f64 = 0.005;
/// Gradient steps between target-network updates.
pub const TARGET_PERIOD: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Behavior,
    QEvaluation,
    Weights,
    Improvement,
    Iterative,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Behavior => "behavior cloning",
            Stage::QEvaluation => "q evaluation",
            Stage::Weights => "filter weights",
            Stage::Improvement => "policy improvement",
            Stage::Iterative => "iterative improvement",
        })
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{stage}: non-finite loss at step {step}")]
    Diverged { stage: Stage, step: usize },
    #[error("{stage}: optimizer failed at step {step}: {source}")]
    Optimizer {
        stage: Stage,
        step: usize,
        #[source]
        source: NumericsError,
    },
    #[error("every imitation weight is zero, so nothing passed the filter; try a lower quantile level")]
    NoPositiveWeights,
    #[error("weight vector has {got} entries for {expected} dataset rows")]
    WeightLength { expected: usize, got: usize },
    #[error("invalid filter configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Distribution(#[from] DistError),
    #[error(transparent)]
    Quantile(#[from] QuantileError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Optimizer budget and network shape for one trained network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub width: usize,
    pub depth: usize,
}

impl TrainHyper {
    pub fn new(steps: usize, batch: usize, lr: f64, width: usize, depth: usize) -> Self {
        Self {
            steps,
            batch,
            lr,
            width,
            depth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterVariant {
    Qfil,
    Expadv,
    Pctbc,
    None,
}

impl FilterVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Qfil => "qfil",
            Self::Expadv => "expadv",
            Self::Pctbc => "pctbc",
            Self::None => "none",
        }
    }
}

impl std::str::FromStr for FilterVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "qfil" => Ok(Self::Qfil),
            "expadv" => Ok(Self::Expadv),
            "pctbc" => Ok(Self::Pctbc),
            "none" => Ok(Self::None),
            _ => Err(format!("unknown filter variant `{s}` (expected qfil, expadv, pctbc or none)")),
        }
    }
}

/// When the per-state baselines are recomputed during improvement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Refresh {
    /// Fresh pushforward samples once per pass over the dataset.
    PerEpoch,
    /// One set of samples drawn before training and reused.
    Cached,
}

/// How the pushforward distribution at a state is represented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantileMode {
    /// `M` actions sampled from the behavior policy.
    Sampled,
    /// Every action of a finite action set, weighted by its behavior
    /// probability.
    Exact,
}

/// Comparison used to keep a row against its baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparison {
    /// `Q > V`
    Gt,
    /// `Q >= V`
    Ge,
}

impl Comparison {
    pub fn keeps(self, q: f64, v: f64) -> bool {
        match self {
            Self::Gt => q > v,
            Self::Ge => q >= v,
        }
    }
}

/// Which improvement operator to run, with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub variant: FilterVariant,
    pub tau: f64,
    pub alpha: f64,
    pub clip: f64,
    pub keep_fraction: f64,
    pub samples: usize,
    pub refresh: Refresh,
    pub comparison: Comparison,
    pub quantile_mode: QuantileMode,
}

impl FilterConfig {
    pub fn qfil(tau: f64) -> Self {
        Self {
            variant: FilterVariant::Qfil,
            tau,
            ..Self::none()
        }
    }

    pub fn expadv(alpha: f64) -> Self {
        Self {
            variant: FilterVariant::Expadv,
            alpha,
            samples: 10,
            ..Self::none()
        }
    }

    pub fn pctbc(keep_fraction: f64) -> Self {
        Self {
            variant: FilterVariant::Pctbc,
            keep_fraction,
            ..Self::none()
        }
    }

    pub fn none() -> Self {
        Self {
            variant: FilterVariant::None,
            tau: 0.9,
            alpha: 1.0,
            clip: 100.0,
            keep_fraction: 0.1,
            samples: 100,
            refresh: Refresh::PerEpoch,
            comparison: Comparison::Gt,
            quantile_mode: QuantileMode::Sampled,
        }
    }

    /// The parameter that distinguishes cells of a sweep for this variant.
    pub fn level(&self) -> f64 {
        match self.variant {
            FilterVariant::Qfil => self.tau,
            FilterVariant::Expadv => self.alpha,
            FilterVariant::Pctbc => self.keep_fraction,
            FilterVariant::None => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        match self.variant {
            FilterVariant::Qfil if !(0.0..1.0).contains(&self.tau) => bad(format!("tau {} outside [0, 1)", self.tau)),
            FilterVariant::Expadv if !(self.alpha > 0.0 && self.alpha.is_finite()) => {
                bad(format!("alpha {} must be positive", self.alpha))
            }
            FilterVariant::Expadv if !(self.clip > 0.0) => bad(format!("clip {} must be positive", self.clip)),
            FilterVariant::Pctbc if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) => {
                bad(format!("keep fraction {} outside (0, 1]", self.keep_fraction))
            }
            FilterVariant::Qfil | FilterVariant::Expadv if self.samples == 0 => bad("sample count must be positive".into()),
            _ => Ok(()),
        }
    }
}

/// Something that assigns values to actions at a state.
pub trait ActionValue: Sync {
    fn values(&self, s: &[f64], actions: &[f64]) -> Vec<f64>;

    fn values_rows(&self, rows: &[(&[f64], f64)]) -> Vec<f64> {
        rows.iter().map(|(s, a)| self.values(s, &[*a])[0]).collect()
    }
}

impl ActionValue for QNetwork {
    fn values(&self, s: &[f64], actions: &[f64]) -> Vec<f64> {
        self.q_actions(s, actions)
    }

    fn values_rows(&self, rows: &[(&[f64], f64)]) -> Vec<f64> {
        self.eval_rows(rows, false)
    }
}

/// Closure-backed action values, for synthetic `Q`.
pub struct QFn<F>(pub F);

impl<F: Fn(&[f64], f64) -> f64 + Sync> ActionValue for QFn<F> {
    fn values(&self, s: &[f64], actions: &[f64]) -> Vec<f64> {
        actions.iter().map(|&a| (self.0)(s, a)).collect()
    }
}

/// A policy that can be sampled at a state; finite-action policies also
/// expose their probabilities.
pub trait ActionSampler: Sync {
    fn sample_actions(&self, s: &[f64], m: usize, rng: &mut RngStream) -> Vec<f64>;

    fn probs(&self, _s: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

impl ActionSampler for Policy {
    fn sample_actions(&self, s: &[f64], m: usize, rng: &mut RngStream) -> Vec<f64> {
        let head = self.head(s);
        (0..m).map(|_| head.sample(rng)).collect()
    }

    fn probs(&self, s: &[f64]) -> Option<Vec<f64>> {
        match self.head(s) {
            ActionHead::Categorical(h) => Some(h.probs()),
            ActionHead::TruncNormal(_) => None,
        }
    }
}

impl ActionSampler for PolicyTable {
    fn sample_actions(&self, s: &[f64], m: usize, rng: &mut RngStream) -> Vec<f64> {
        let head = CategoricalHead::from_probs(&self.0[s[0] as usize]).expect("valid probability row");
        (0..m).map(|_| head.sample(rng) as f64).collect()
    }

    fn probs(&self, s: &[f64]) -> Option<Vec<f64>> {
        Some(self.0[s[0] as usize].clone())
    }
}

/// Closure-backed sampler drawing one action per call.
pub struct SamplerFn<F>(pub F);

impl<F: Fn(&[f64], &mut RngStream) -> f64 + Sync> ActionSampler for SamplerFn<F> {
    fn sample_actions(&self, s: &[f64], m: usize, rng: &mut RngStream) -> Vec<f64> {
        (0..m).map(|_| (self.0)(s, rng)).collect()
    }
}

/// Pushforward distribution of `Q` under a sampler at one dataset row.
#[derive(Clone, Debug, PartialEq)]
pub enum RowPushforward {
    Sampled(Vec<f64>),
    Weighted { values: Vec<f64>, probs: Vec<f64> },
}

impl RowPushforward {
    pub fn quantile(&self, tau: f64) -> Result<f64, QuantileError> {
        match self {
            Self::Sampled(v) => empirical_quantile(v, &tau),
            Self::Weighted { values, probs } => weighted_quantile(values, probs, &tau),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::Sampled(v) => v.iter().sum::<f64>() / v.len() as f64,
            Self::Weighted { values, probs } => values.iter().zip(probs).map(|(v, p)| v * p).sum(),
        }
    }
}

/// Per-row pushforward distributions plus `Q` at each row's own action.
#[derive(Clone, Debug, PartialEq)]
pub struct PushforwardTable {
    pub rows: Vec<usize>,
    pub q: Vec<f64>,
    pub dists: Vec<RowPushforward>,
}

impl PushforwardTable {
    /// Builds the table for the given dataset rows. In exact mode the
    /// sampler must expose probabilities over a finite action set.
    pub fn build(
        ds: &Dataset,
        rows: &[usize],
        q: &impl ActionValue,
        behavior: &impl ActionSampler,
        m: usize,
        mode: QuantileMode,
        rng: &mut RngStream,
    ) -> Result<Self, TrainError> {
        let pairs: Vec<(&[f64], f64)> = rows.iter().map(|&i| (ds.get(i).s.as_slice(), ds.get(i).a)).collect();
        let qrow = q.values_rows(&pairs);
        let mut dists = Vec::with_capacity(rows.len());
        for &(s, _) in &pairs {
            dists.push(match mode {
                QuantileMode::Sampled => {
                    let actions = behavior.sample_actions(s, m, rng);
                    RowPushforward::Sampled(q.values(s, &actions))
                }
                QuantileMode::Exact => {
                    let probs = behavior
                        .probs(s)
                        .ok_or_else(|| TrainError::Config("exact quantiles need a finite action set".into()))?;
                    let actions: Vec<f64> = (0..probs.len()).map(|a| a as f64).collect();
                    RowPushforward::Weighted {
                        values: q.values(s, &actions),
                        probs,
                    }
                }
            });
        }
        Ok(Self {
            rows: rows.to_vec(),
            q: qrow,
            dists,
        })
    }

    pub fn quantiles(&self, tau: f64) -> Result<Vec<f64>, TrainError> {
        Ok(self.dists.iter().map(|d| d.quantile(tau)).collect::<Result<_, _>>()?)
    }

    pub fn means(&self) -> Vec<f64> {
        self.dists.iter().map(RowPushforward::mean).collect()
    }

    /// Weights for the rows of this table under `cfg`.
    pub fn filter(&self, cfg: &FilterConfig) -> Result<FilterOutput, TrainError> {
        cfg.validate()?;
        match cfg.variant {
            FilterVariant::Qfil => {
                let v = self.quantiles(cfg.tau)?;
                let weights = qfil_from_values(&self.q, &v, cfg.comparison);
                Ok(FilterOutput {
                    weights,
                    q: self.q.clone(),
                    v,
                })
            }
            FilterVariant::Expadv => {
                let v = self.means();
                let weights = expadv_from_values(&self.q, &v, cfg.alpha, cfg.clip)?;
                Ok(FilterOutput {
                    weights,
                    q: self.q.clone(),
                    v,
                })
            }
            _ => Err(TrainError::Config(format!("{} does not use pushforward baselines", cfg.variant.name()))),
        }
    }
}

/// Row weights with the values that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutput {
    pub weights: WeightVector,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
}

impl FilterOutput {
    /// CSV with columns `row,q,v,weight`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row,q,v,weight")?;
        for (i, ((q, v), wt)) in self.q.iter().zip(&self.v).zip(self.weights.as_slice()).enumerate() {
            writeln!(w, "{i},{q},{v},{wt}")?;
        }
        Ok(())
    }
}

pub fn qfil_from_values(q: &[f64], v: &[f64], cmp: Comparison) -> WeightVector {
    WeightVector::from_mask(q.iter().zip(v).map(|(&q, &v)| cmp.keeps(q, v)))
}

pub fn expadv_from_values(q: &[f64], v: &[f64], alpha: f64, clip: f64) -> Result<WeightVector, TrainError> {
    let w = q.iter().zip(v).map(|(&q, &v)| (alpha * (q - v)).exp().min(clip)).collect();
    Ok(WeightVector::new(w)?)
}

fn all_rows(ds: &Dataset) -> Vec<usize> {
    (0..ds.len()).collect()
}

/// Quantile filter: weight 1 where `Q(s, a)` beats the behavior
/// pushforward's `τ`-quantile at `s`.
pub fn qfil_weights(
    ds: &Dataset,
    q: &impl ActionValue,
    behavior: &impl ActionSampler,
    cfg: &FilterConfig,
    rng: &mut RngStream,
) -> Result<FilterOutput, TrainError> {
    if cfg.variant != FilterVariant::Qfil {
        return Err(TrainError::Config(format!("expected qfil, got {}", cfg.variant.name())));
    }
    PushforwardTable::build(ds, &all_rows(ds), q, behavior, cfg.samples, cfg.quantile_mode, rng)?.filter(cfg)
}

/// Exponentiated-advantage weights `min(exp(α (Q − V)), clip)` with `V` the
/// pushforward mean.
pub fn expadv_weights(
    ds: &Dataset,
    q: &impl ActionValue,
    behavior: &impl ActionSampler,
    cfg: &FilterConfig,
    rng: &mut RngStream,
) -> Result<FilterOutput, TrainError> {
    if cfg.variant != FilterVariant::Expadv {
        return Err(TrainError::Config(format!("expected expadv, got {}", cfg.variant.name())));
    }
    PushforwardTable::build(ds, &all_rows(ds), q, behavior, cfg.samples, cfg.quantile_mode, rng)?.filter(cfg)
}

/// Weight 1 on every row of the top `keep_fraction` of episodes by return.
/// Ties go to the lower episode id.
pub fn pctbc_weights(ds: &Dataset, keep_fraction: f64) -> Result<WeightVector, TrainError> {
    FilterConfig::pctbc(keep_fraction).validate()?;
    let returns = ds.episodic_returns();
    let n = returns.len();
    let keep = ((keep_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| returns[b].total_cmp(&returns[a]).then(a.cmp(&b)));
    let mut selected = vec![false; n];
    for &e in &order[..keep.min(n)] {
        selected[e] = true;
    }
    Ok(WeightVector::from_mask(ds.transitions().iter().map(|t| selected[t.episode as usize])))
}

/// Gradient-step state for a policy trained by weighted log-likelihood.
pub struct PolicyLearner {
    policy: Policy,
    opt: OptState<f64>,
    steps: usize,
    stage: Stage,
}

impl PolicyLearner {
    pub fn new(policy: Policy, lr: f64, stage: Stage) -> Self {
        let opt = OptState::for_params(policy.params(), lr);
        Self {
            policy,
            opt,
            steps: 0,
            stage,
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn into_policy(self) -> Policy {
        self.policy
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Loss `-(1/B) Σ w_i log π(a_i | s_i)` and its parameter gradient.
    pub fn loss_grad(&self, ds: &Dataset, idx: &[usize], weights: &[f64]) -> Result<(f64, MlpGrads<f64>), TrainError> {
        let env = ds.env();
        let dim = env.state_feature_dim();
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            env.push_state_features(&ds.get(i).s, &mut data);
        }
        let x = Batch::from_rows(idx.len(), dim, data)?;
        let tape = self.policy.params().forward_tape(&x)?;
        let out = tape.output();
        let scale = 1.0 / idx.len() as f64;
        let mut loss = 0.0;
        let mut grad_out = Batch::zeros(out.rows(), out.cols());
        for (r, (&i, &w)) in idx.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let head = self.policy.head_from_output(out.row(r))?;
            let (lp, g) = head.logprob_grad(ds.get(i).a)?;
            loss -= w * lp * scale;
            for (dst, gk) in grad_out.row_mut(r).iter_mut().zip(&g) {
                *dst = -w * gk * scale;
            }
        }
        let grads = self.policy.params().backward(&tape, &grad_out)?;
        Ok((loss, grads))
    }

    pub fn step(&mut self, ds: &Dataset, idx: &[usize], weights: &[f64]) -> Result<f64, TrainError> {
        let step = self.steps;
        let (loss, grads) = self.loss_grad(ds, idx, weights)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { stage: self.stage, step });
        }
        self.opt
            .step(self.policy.params_mut(), &grads)
            .map_err(|source| TrainError::Optimizer {
                stage: self.stage,
                step,
                source,
            })?;
        self.steps += 1;
        Ok(loss)
    }
}

/// A trained network with its per-step training loss.
#[derive(Clone, Debug)]
pub struct Fitted<N> {
    pub net: N,
    pub losses: Vec<f64>,
}

/// Freshly initialized policy network for `ds`'s environment.
pub fn init_policy(ds: &Dataset, hyper: &TrainHyper, rng: &RngStream) -> Result<Policy, TrainError> {
    Ok(Policy::new(ds.env(), hyper.width, hyper.depth, &mut rng.fork("init"))?)
}

fn train_policy(
    ds: &Dataset,
    weights: &[f64],
    init: Policy,
    hyper: &TrainHyper,
    rng: &RngStream,
    stage: Stage,
) -> Result<Fitted<Policy>, TrainError> {
    let mut batches = rng.fork("train");
    let mut learner = PolicyLearner::new(init, hyper.lr, stage);
    let mut losses = Vec::with_capacity(hyper.steps);
    let mut w = Vec::with_capacity(hyper.batch);
    for _ in 0..hyper.steps {
        let idx = ds.sample_indices(hyper.batch, &mut batches)?;
        w.clear();
        w.extend(idx.iter().map(|&i| weights[i]));
        losses.push(learner.step(ds, &idx, &w)?);
    }
    Ok(Fitted {
        net: learner.into_policy(),
        losses,
    })
}

/// Behavior cloning by maximum likelihood.
pub fn fit_behavior(ds: &Dataset, hyper: &TrainHyper, rng: &RngStream) -> Result<Fitted<Policy>, TrainError> {
    if ds.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let init = init_policy(ds, hyper, rng)?;
    train_policy(ds, &vec![1.0; ds.len()], init, hyper, rng, Stage::Behavior)
}

fn check_weights(ds: &Dataset, weights: &WeightVector) -> Result<(), TrainError> {
    if weights.len() != ds.len() {
        return Err(TrainError::WeightLength {
            expected: ds.len(),
            got: weights.len(),
        });
    }
    if !weights.as_slice().iter().any(|&w| w > 0.0) {
        return Err(TrainError::NoPositiveWeights);
    }
    Ok(())
}

/// Weighted behavior cloning started from `init`.
pub fn weighted_imitation(
    ds: &Dataset,
    weights: &WeightVector,
    init: &Policy,
    hyper: &TrainHyper,
    rng: &RngStream,
) -> Result<Fitted<Policy>, TrainError> {
    check_weights(ds, weights)?;
    train_policy(ds, weights.as_slice(), init.clone(), hyper, rng, Stage::Improvement)
}

/// Weighted imitation whose weights are recomputed from fresh pushforward
/// samples at the start of every pass over the dataset.
pub fn weighted_imitation_refreshing(
    ds: &Dataset,
    q: &impl ActionValue,
    behavior: &impl ActionSampler,
    cfg: &FilterConfig,
    init: &Policy,
    hyper: &TrainHyper,
    rng: &RngStream,
) -> Result<(Fitted<Policy>, Vec<f64>), TrainError> {
    let epoch_len = ds.len().div_ceil(hyper.batch.max(1)).max(1);
    let mut batches = rng.fork("train");
    let mut samples = rng.fork("refresh");
    let mut learner = PolicyLearner::new(init.clone(), hyper.lr, Stage::Improvement);
    let mut losses = Vec::with_capacity(hyper.steps);
    let mut keep_rates = Vec::new();
    let rows = all_rows(ds);
    let mut weights = WeightVector::ones(0);
    let mut w = Vec::with_capacity(hyper.batch);
    for step in 0..hyper.steps {
        if step % epoch_len == 0 {
            let table = PushforwardTable::build(ds, &rows, q, behavior, cfg.samples, cfg.quantile_mode, &mut samples)?;
            weights = table.filter(cfg)?.weights;
            keep_rates.push(weights.keep_rate());
            check_weights(ds, &weights)?;
        }
        let idx = ds.sample_indices(hyper.batch, &mut batches)?;
        w.clear();
        w.extend(idx.iter().map(|&i| weights.as_slice()[i]));
        losses.push(learner.step(ds, &idx, &w)?);
    }
    Ok((
        Fitted {
            net: learner.into_policy(),
            losses,
        },
        keep_rates,
    ))
}

/// Gradient-step state for a `Q` network with a slow target copy.
pub struct QLearner {
    q: QNetwork,
    opt: OptState<f64>,
    steps: u64,
    gamma: f64,
    target_rate: f64,
    target_period: u64,
    stage: Stage,
}

impl QLearner {
    pub fn new(q: QNetwork, lr: f64, gamma: f64, stage: Stage) -> Self {
        let opt = OptState::for_params(q.params(), lr);
        Self {
            q,
            opt,
            steps: 0,
            gamma,
            target_rate: TARGET_RATE,
            target_period: TARGET_PERIOD,
            stage,
        }
    }

    pub fn q(&self) -> &QNetwork {
        &self.q
    }

    pub fn into_q(self) -> QNetwork {
        self.q
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    /// Squared Bellman residual `mean (Q(s,a) − r − γ Q̄(s′,a′))²` and its
    /// gradient, with `a′` given per row (`None` on terminal rows).
    pub fn loss_grad(&self, ds: &Dataset, idx: &[usize], next: &[Option<f64>]) -> Result<(f64, MlpGrads<f64>), TrainError> {
        let boot_rows: Vec<(&[f64], f64)> = idx
            .iter()
            .zip(next)
            .filter_map(|(&i, a)| a.map(|a| (ds.get(i).s_next.as_slice(), a)))
            .collect();
        let boot = self.q.eval_rows(&boot_rows, true);
        let mut boot = boot.into_iter();
        let targets: Vec<f64> = idx
            .iter()
            .zip(next)
            .map(|(&i, a)| {
                let t = ds.get(i);
                match a {
                    Some(_) if !t.done => t.r + self.gamma * boot.next().expect("one bootstrap per row"),
                    Some(_) => {
                        boot.next();
                        t.r
                    }
                    None => t.r,
                }
            })
            .collect();
        let x = self.q.batch_input(idx.iter().map(|&i| (ds.get(i).s.clone(), ds.get(i).a)));
        let tape = self.q.params().forward_tape(&x)?;
        let pred = tape.output();
        let scale = 1.0 / idx.len() as f64;
        let mut loss = 0.0;
        let mut grad_out = Batch::zeros(idx.len(), 1);
        for (r, y) in targets.iter().enumerate() {
            let diff = pred.row(r)[0] - y;
            loss += diff * diff * scale;
            grad_out.row_mut(r)[0] = 2.0 * diff * scale;
        }
        let grads = self.q.params().backward(&tape, &grad_out)?;
        Ok((loss, grads))
    }

    fn apply(&mut self, loss: f64, grads: MlpGrads<f64>) -> Result<f64, TrainError> {
        let step = self.steps as usize;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { stage: self.stage, step });
        }
        self.opt
            .step(self.q.params_mut(), &grads)
            .map_err(|source| TrainError::Optimizer {
                stage: self.stage,
                step,
                source,
            })?;
        self.steps += 1;
        if self.steps.is_multiple_of(self.target_period) {
            self.q.update_target(self.target_rate);
        }
        Ok(loss)
    }

    /// Next actions from the dataset.
    pub fn sarsa_next(ds: &Dataset, idx: &[usize]) -> Vec<Option<f64>> {
        idx.iter().map(|&i| ds.get(i).a_next).collect()
    }

    /// Next actions drawn from `pi` at each non-terminal `s′`.
    pub fn offpolicy_next(ds: &Dataset, idx: &[usize], pi: &impl ActionSampler, rng: &mut RngStream) -> Vec<Option<f64>> {
        idx.iter()
            .map(|&i| {
                let t = ds.get(i);
                (!t.done).then(|| pi.sample_actions(&t.s_next, 1, rng)[0])
            })
            .collect()
    }

    pub fn sarsa_step(&mut self, ds: &Dataset, idx: &[usize]) -> Result<f64, TrainError> {
        let next = Self::sarsa_next(ds, idx);
        let (loss, grads) = self.loss_grad(ds, idx, &next)?;
        self.apply(loss, grads)
    }

    pub fn offpolicy_step(
        &mut self,
        ds: &Dataset,
        idx: &[usize],
        pi: &impl ActionSampler,
        rng: &mut RngStream,
    ) -> Result<f64, TrainError> {
        let next = Self::offpolicy_next(ds, idx, pi, rng);
        let (loss, grads) = self.loss_grad(ds, idx, &next)?;
        self.apply(loss, grads)
    }
}

/// Fitted `Q` of the behavior policy from the dataset's own next actions.
pub fn fit_q_sarsa(ds: &Dataset, hyper: &TrainHyper, gamma: f64, rng: &RngStream) -> Result<Fitted<QNetwork>, TrainError> {
    if ds.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let q = QNetwork::new(ds.env(), hyper.width, hyper.depth, &mut rng.fork("init"))?;
    let mut learner = QLearner::new(q, hyper.lr, gamma, Stage::QEvaluation);
    let mut batches = rng.fork("train");
    let mut losses = Vec::with_capacity(hyper.steps);
    for _ in 0..hyper.steps {
        let idx = ds.sample_indices(hyper.batch, &mut batches)?;
        losses.push(learner.sarsa_step(ds, &idx)?);
    }
    Ok(Fitted {
        net: learner.into_q(),
        losses,
    })
}
