//! Policy and action-value interfaces, and their MLP-backed implementations.

use crate::dataset::{ActionSpace, EnvDescriptor};
use crate::distributions::{ActionHead, CategoricalHead, DistError, TruncNormalHead};
use crate::numerics::{Batch, MlpArch, MlpParams, NumericsError, RngStream};
use serde::{Deserialize, Serialize};

/// How a policy turns its distribution into a single action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Sampled,
    Modal,
}

/// Anything that picks an action for a state.
pub trait StatePolicy {
    fn act(&self, s: &[f64], mode: ActMode, rng: &mut RngStream) -> f64;
}

/// Policy over a finite state and action set with explicit probabilities.
pub trait TabularPolicy {
    fn action_probs(&self, state: usize) -> Vec<f64>;
}

/// Explicit probability table, `probs[state][action]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable(pub Vec<Vec<f64>>);

impl TabularPolicy for PolicyTable {
    fn action_probs(&self, state: usize) -> Vec<f64> {
        self.0[state].clone()
    }
}

impl StatePolicy for PolicyTable {
    fn act(&self, s: &[f64], mode: ActMode, rng: &mut RngStream) -> f64 {
        let head = CategoricalHead::from_probs(&self.0[s[0] as usize]).expect("valid probability row");
        match mode {
            ActMode::Sampled => head.sample(rng) as f64,
            ActMode::Modal => head.mode() as f64,
        }
    }
}

/// Deterministic policy given by a closure.
pub struct FnPolicy<F>(pub F);

impl<F: Fn(&[f64]) -> f64> StatePolicy for FnPolicy<F> {
    fn act(&self, s: &[f64], _mode: ActMode, _rng: &mut RngStream) -> f64 {
        (self.0)(s)
    }
}

/// MLP policy: state features in, action-head parameters out.
///
/// Continuous action spaces get a truncated normal head (`[mean, log_std]`
/// outputs); discrete ones a categorical head (one logit per action).
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    net: MlpParams<f64>,
    env: EnvDescriptor,
}

impl Policy {
    pub fn new(env: &EnvDescriptor, width: usize, depth: usize, rng: &mut RngStream) -> Result<Self, NumericsError> {
        let out = match env.action_space {
            ActionSpace::Continuous { .. } => 2,
            ActionSpace::Discrete { n } => n,
        };
        let arch = MlpArch::new(env.state_feature_dim(), width, depth, out);
        let mut net = MlpParams::init(arch, rng)?;
        if let ActionSpace::Continuous { lo, hi } = env.action_space {
            // Start centred on the action interval.
            let last = arch.n_layers() - 1;
            let (_, bias) = net.layer_mut(last);
            bias[0] = 0.5 * (lo + hi);
        }
        Ok(Self { net, env: env.clone() })
    }

    pub fn from_params(env: &EnvDescriptor, net: MlpParams<f64>) -> Self {
        Self { net, env: env.clone() }
    }

    pub fn env(&self) -> &EnvDescriptor {
        &self.env
    }

    pub fn params(&self) -> &MlpParams<f64> {
        &self.net
    }

    pub fn params_mut(&mut self) -> &mut MlpParams<f64> {
        &mut self.net
    }

    pub fn features(&self, s: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.env.state_feature_dim());
        self.env.push_state_features(s, &mut x);
        x
    }

    /// Builds the action head from raw network outputs.
    pub fn head_from_output(&self, out: &[f64]) -> Result<ActionHead<f64>, DistError> {
        Ok(match self.env.action_space {
            ActionSpace::Continuous { lo, hi } => ActionHead::TruncNormal(TruncNormalHead::new(out[0], out[1], lo, hi)?),
            ActionSpace::Discrete { .. } => ActionHead::Categorical(CategoricalHead::new(out.to_vec())?),
        })
    }

    pub fn head(&self, s: &[f64]) -> ActionHead<f64> {
        let out = self.net.forward(&self.features(s)).expect("feature width matches network");
        self.head_from_output(&out).expect("finite network output")
    }

    /// Heads for many states in one batched forward pass.
    pub fn heads(&self, states: &[&[f64]]) -> Vec<ActionHead<f64>> {
        let dim = self.env.state_feature_dim();
        let mut data = Vec::with_capacity(states.len() * dim);
        for s in states {
            self.env.push_state_features(s, &mut data);
        }
        let batch = Batch::from_rows(states.len(), dim, data).expect("sized above");
        let out = self.net.forward_batch(&batch).expect("feature width matches network");
        (0..states.len())
            .map(|r| self.head_from_output(out.row(r)).expect("finite network output"))
            .collect()
    }
}

impl StatePolicy for Policy {
    fn act(&self, s: &[f64], mode: ActMode, rng: &mut RngStream) -> f64 {
        let head = self.head(s);
        match mode {
            ActMode::Sampled => head.sample(rng),
            ActMode::Modal => head.mode(),
        }
    }
}

impl TabularPolicy for Policy {
    fn action_probs(&self, state: usize) -> Vec<f64> {
        match self.head(&[state as f64]) {
            ActionHead::Categorical(h) => h.probs(),
            ActionHead::TruncNormal(_) => panic!("tabular probabilities requested from a continuous policy"),
        }
    }
}

/// State-action value network `Q(s, a)` with an optional slow target copy.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    net: MlpParams<f64>,
    target: Option<MlpParams<f64>>,
    env: EnvDescriptor,
}

impl QNetwork {
    pub fn new(env: &EnvDescriptor, width: usize, depth: usize, rng: &mut RngStream) -> Result<Self, NumericsError> {
        let arch = MlpArch::new(env.state_feature_dim() + env.action_space.feature_dim(), width, depth, 1);
        let net = MlpParams::init(arch, rng)?;
        Ok(Self {
            target: Some(net.clone()),
            net,
            env: env.clone(),
        })
    }

    pub fn from_params(env: &EnvDescriptor, net: MlpParams<f64>) -> Self {
        Self {
            target: Some(net.clone()),
            net,
            env: env.clone(),
        }
    }

    pub fn env(&self) -> &EnvDescriptor {
        &self.env
    }

    pub fn params(&self) -> &MlpParams<f64> {
        &self.net
    }

    pub fn params_mut(&mut self) -> &mut MlpParams<f64> {
        &mut self.net
    }

    pub fn target(&self) -> Option<&MlpParams<f64>> {
        self.target.as_ref()
    }

    pub fn set_target(&mut self, target: Option<MlpParams<f64>>) {
        self.target = target;
    }

    /// Exponential moving average step of the target toward the online net.
    pub fn update_target(&mut self, rate: f64) {
        match &mut self.target {
            Some(t) => t.ema_toward(&self.net, rate),
            None => self.target = Some(self.net.clone()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.arch().input
    }

    pub fn push_input(&self, s: &[f64], a: f64, out: &mut Vec<f64>) {
        self.env.push_state_features(s, out);
        self.env.action_space.push_features(a, out);
    }

    pub fn batch_input(&self, rows: impl IntoIterator<Item = (Vec<f64>, f64)>) -> Batch<f64> {
        let mut data = Vec::new();
        let mut n = 0;
        for (s, a) in rows {
            self.push_input(&s, a, &mut data);
            n += 1;
        }
        Batch::from_rows(n, self.input_dim(), data).expect("sized by push_input")
    }

    pub fn q(&self, s: &[f64], a: f64) -> f64 {
        let mut x = Vec::with_capacity(self.input_dim());
        self.push_input(s, a, &mut x);
        self.net.forward(&x).expect("input width matches network")[0]
    }

    /// `Q(s, a)` for one state and many actions.
    pub fn q_actions(&self, s: &[f64], actions: &[f64]) -> Vec<f64> {
        self.eval_actions(&self.net, s, actions)
    }

    /// Target-network values for one state and many actions (online network
    /// when no target is kept).
    pub fn target_q_actions(&self, s: &[f64], actions: &[f64]) -> Vec<f64> {
        self.eval_actions(self.target.as_ref().unwrap_or(&self.net), s, actions)
    }

    fn eval_actions(&self, net: &MlpParams<f64>, s: &[f64], actions: &[f64]) -> Vec<f64> {
        let mut prefix = Vec::with_capacity(self.input_dim());
        self.env.push_state_features(s, &mut prefix);
        let dim = self.input_dim();
        let mut data = Vec::with_capacity(actions.len() * dim);
        for &a in actions {
            data.extend_from_slice(&prefix);
            self.env.action_space.push_features(a, &mut data);
        }
        let batch = Batch::from_rows(actions.len(), dim, data).expect("sized above");
        net.forward_batch(&batch).expect("input width matches network").into_data()
    }

    /// Values for arbitrary `(s, a)` rows using the given network.
    pub fn eval_rows(&self, rows: &[(&[f64], f64)], use_target: bool) -> Vec<f64> {
        let net = if use_target {
            self.target.as_ref().unwrap_or(&self.net)
        } else {
            &self.net
        };
        let dim = self.input_dim();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (s, a) in rows {
            self.push_input(s, *a, &mut data);
        }
        let batch = Batch::from_rows(rows.len(), dim, data).expect("sized above");
        net.forward_batch(&batch).expect("input width matches network").into_data()
    }
}
