//! Desk-scale environments: the one-dimensional contextual bandit and a
//! deterministic gridworld with exact policy evaluation.

use crate::dataset::{ActionSpace, Dataset, DatasetError, EnvDescriptor, StateEncoding, Transition};
use crate::numerics::RngStream;
use crate::policy::{ActMode, PolicyTable, StatePolicy, TabularPolicy};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("{what} {value} outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("invalid gridworld: {0}")]
    BadGrid(String),
    #[error("map line {line}: {reason}")]
    BadMap { line: usize, reason: String },
    #[error("singular Bellman system")]
    Singular,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Mean return of the data-generating behavior on the bandit.
pub const BANDIT_BEHAVIOR_RETURN: f64 = 11.0 / 18.0;
/// Mean return of the best policy that stays inside the behavior's support.
pub const BANDIT_BEST_IN_SUPPORT_RETURN: f64 = 5.0 / 6.0;

/// Mean return with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl ReturnStats {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n as f64).sqrt(),
            n,
        }
    }
}

pub fn bandit_env() -> EnvDescriptor {
    EnvDescriptor {
        name: "bandit".into(),
        state_dim: 1,
        action_space: ActionSpace::Continuous { lo: 0.0, hi: 1.0 },
        encoding: StateEncoding::Raw,
    }
}

/// Reward `1 - |a - (1 - s)|` inside the band `[s/2, (s+1)/2]`, `-1` outside.
pub fn bandit_reward(s: f64, a: f64) -> Result<f64, EnvError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(EnvError::OutOfRange { what: "state", value: s });
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(EnvError::OutOfRange { what: "action", value: a });
    }
    if a >= s / 2.0 && a <= (s + 1.0) / 2.0 {
        Ok(1.0 - (a - (1.0 - s)).abs())
    } else {
        Ok(-1.0)
    }
}

/// Highest-reward action inside the behavior band at `s`.
pub fn bandit_best_in_support_action(s: f64) -> f64 {
    (1.0 - s).clamp(s / 2.0, (s + 1.0) / 2.0)
}

/// Horizon-1 dataset: `s ~ U[0,1]`, `a = (s + e) / 2` with `e ~ U[0,1]`.
pub fn bandit_generate(n: usize, rng: &mut RngStream) -> Result<Dataset, EnvError> {
    let rows = (0..n)
        .map(|i| {
            let s = rng.uniform();
            let a = (s + rng.uniform()) / 2.0;
            let r = bandit_reward(s, a)?;
            Ok(Transition {
                s: vec![s],
                a,
                r,
                s_next: vec![s],
                a_next: None,
                done: true,
                episode: i as u32,
            })
        })
        .collect::<Result<Vec<_>, EnvError>>()?;
    Ok(Dataset::new(bandit_env(), rows)?)
}

/// Mean reward over `n_states` fresh states, one action each.
pub fn bandit_eval(
    policy: &impl StatePolicy,
    n_states: usize,
    rng: &mut RngStream,
    mode: ActMode,
) -> Result<ReturnStats, EnvError> {
    let rewards = (0..n_states)
        .map(|_| {
            let s = rng.uniform();
            let a = policy.act(&[s], mode, rng);
            bandit_reward(s, a)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ReturnStats::from_samples(&rewards))
}

pub const UP: usize = 0;
pub const RIGHT: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;
pub const N_GRID_ACTIONS: usize = 4;

/// Finite MDP with deterministic transitions and four actions.
///
/// Gridworlds built from a map are the common case; [`GridMdp::from_tables`]
/// accepts arbitrary deterministic tables.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMdp {
    width: usize,
    height: usize,
    next: Vec<[usize; N_GRID_ACTIONS]>,
    reward: Vec<[f64; N_GRID_ACTIONS]>,
    terminal: Vec<bool>,
    wall: Vec<bool>,
    init: Vec<f64>,
    gamma: f64,
}

/// Exact values of a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactEval {
    /// Initial-distribution-weighted state value.
    pub j: f64,
    pub q: Vec<[f64; N_GRID_ACTIONS]>,
    pub v: Vec<f64>,
}

/// The default map: 8×8, start top-left, goal bottom-right.
pub const DEFAULT_MAP: &str = "\
S.......
........
........
........
........
........
........
.......G
";

impl GridMdp {
    /// Builds an MDP from explicit tables. `width * height` must equal the
    /// number of states; terminal states self-loop with zero reward.
    pub fn from_tables(
        width: usize,
        height: usize,
        next: Vec<[usize; N_GRID_ACTIONS]>,
        reward: Vec<[f64; N_GRID_ACTIONS]>,
        terminal: Vec<bool>,
        init: Vec<f64>,
        gamma: f64,
    ) -> Result<Self, EnvError> {
        let n = width * height;
        if n == 0 || next.len() != n || reward.len() != n || terminal.len() != n || init.len() != n {
            return Err(EnvError::BadGrid(format!("tables must all have {n} rows")));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(EnvError::BadGrid(format!("discount {gamma} outside (0, 1)")));
        }
        if next.iter().flatten().any(|&s| s >= n) {
            return Err(EnvError::BadGrid("transition to a nonexistent state".into()));
        }
        if reward.iter().flatten().any(|r| !r.is_finite()) {
            return Err(EnvError::BadGrid("non-finite reward".into()));
        }
        let mass: f64 = init.iter().sum();
        if init.iter().any(|&p| p < 0.0) || (mass - 1.0).abs() > 1e-12 {
            return Err(EnvError::BadGrid("initial distribution must sum to 1".into()));
        }
        Ok(Self {
            width,
            height,
            next,
            reward,
            terminal,
            wall: vec![false; n],
            init,
            gamma,
        })
    }

    /// Parses a map. Glyphs: `.` floor, `#` wall, `S` start (several starts
    /// share the initial mass uniformly), `G` terminal goal worth reward 1 on
    /// entry. Lines starting with `;` are comments. Moving into a wall or off
    /// the grid leaves the agent in place.
    pub fn from_map(text: &str, gamma: f64) -> Result<Self, EnvError> {
        let rows: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with(';'))
            .collect();
        let height = rows.len();
        let width = rows.first().map(|(_, l)| l.chars().count()).unwrap_or(0);
        if height == 0 || width == 0 {
            return Err(EnvError::BadMap { line: 1, reason: "empty map".into() });
        }
        let n = width * height;
        let mut wall = vec![false; n];
        let mut goal = vec![false; n];
        let mut starts = Vec::new();
        for (r, (line_no, line)) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(EnvError::BadMap {
                    line: *line_no,
                    reason: format!("expected {width} cells"),
                });
            }
            for (c, ch) in line.chars().enumerate() {
                let s = r * width + c;
                match ch {
                    '.' => {}
                    '#' => wall[s] = true,
                    'S' => starts.push(s),
                    'G' => goal[s] = true,
                    other => {
                        return Err(EnvError::BadMap {
                            line: *line_no,
                            reason: format!("unknown glyph {other:?}"),
                        })
                    }
                }
            }
        }
        if starts.is_empty() {
            return Err(EnvError::BadMap { line: 1, reason: "no start cell".into() });
        }
        let mut next = vec![[0; N_GRID_ACTIONS]; n];
        let mut reward = vec![[0.0; N_GRID_ACTIONS]; n];
        for s in 0..n {
            let (r, c) = (s / width, s % width);
            for a in 0..N_GRID_ACTIONS {
                let target = match a {
                    UP if r > 0 => Some(s - width),
                    RIGHT if c + 1 < width => Some(s + 1),
                    DOWN if r + 1 < height => Some(s + width),
                    LEFT if c > 0 => Some(s - 1),
                    _ => None,
                };
                let to = target.filter(|&t| !wall[t]).unwrap_or(s);
                if goal[s] || wall[s] {
                    next[s][a] = s;
                } else {
                    next[s][a] = to;
                    reward[s][a] = if goal[to] { 1.0 } else { 0.0 };
                }
            }
        }
        let mut init = vec![0.0; n];
        for &s in &starts {
            init[s] = 1.0 / starts.len() as f64;
        }
        let mut mdp = Self::from_tables(width, height, next, reward, goal, init, gamma)?;
        mdp.wall = wall;
        Ok(mdp)
    }

    /// The 8×8 default world with discount 0.99.
    pub fn default_world() -> Self {
        Self::from_map(DEFAULT_MAP, 0.99).expect("built-in map parses")
    }

    /// Renders the map glyphs (round-trips through [`GridMdp::from_map`] for
    /// map-built worlds).
    pub fn to_map_string(&self) -> String {
        let mut out = String::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let s = r * self.width + c;
                let ch = if self.wall[s] {
                    '#'
                } else if self.terminal[s] {
                    'G'
                } else if self.init[s] > 0.0 {
                    'S'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    pub fn n_states(&self) -> usize {
        self.next.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn is_wall(&self, s: usize) -> bool {
        self.wall[s]
    }

    pub fn next_state(&self, s: usize, a: usize) -> usize {
        self.next[s][a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.init
    }

    /// Transition distribution of `(s, a)` as `(next state, probability)`.
    pub fn transition_probs(&self, s: usize, a: usize) -> Vec<(usize, f64)> {
        vec![(self.next[s][a], 1.0)]
    }

    pub fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            name: "grid".into(),
            state_dim: 1,
            action_space: ActionSpace::Discrete { n: N_GRID_ACTIONS },
            encoding: StateEncoding::OneHot { n: self.n_states() },
        }
    }

    fn sample_start(&self, rng: &mut RngStream) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut last = 0;
        for (s, &p) in self.init.iter().enumerate() {
            if p > 0.0 {
                last = s;
                acc += p;
                if u < acc {
                    return s;
                }
            }
        }
        last
    }

    /// Per-state action reaching a goal in the fewest steps (first such action
    /// in up/right/down/left order); `None` where no goal is reachable.
    pub fn shortest_path_actions(&self) -> Vec<Option<usize>> {
        let n = self.n_states();
        let mut dist = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for s in 0..n {
            if self.terminal[s] {
                dist[s] = 0;
                queue.push_back(s);
            }
        }
        while let Some(t) = queue.pop_front() {
            for s in 0..n {
                if self.terminal[s] || dist[s] != usize::MAX {
                    continue;
                }
                if self.next[s].contains(&t) {
                    dist[s] = dist[t] + 1;
                    queue.push_back(s);
                }
            }
        }
        (0..n)
            .map(|s| {
                if self.terminal[s] || dist[s] == usize::MAX {
                    return None;
                }
                (0..N_GRID_ACTIONS).find(|&a| dist[self.next[s][a]].saturating_add(1) == dist[s])
            })
            .collect()
    }

    /// `greedy_weight` on the shortest-path action plus the rest spread
    /// uniformly over all actions.
    pub fn behavior_policy(&self, greedy_weight: f64) -> PolicyTable {
        let uniform = 1.0 / N_GRID_ACTIONS as f64;
        PolicyTable(
            self.shortest_path_actions()
                .into_iter()
                .map(|best| {
                    let mut row = vec![uniform; N_GRID_ACTIONS];
                    if let Some(b) = best {
                        for (a, p) in row.iter_mut().enumerate() {
                            *p = (1.0 - greedy_weight) * uniform + if a == b { greedy_weight } else { 0.0 };
                        }
                    }
                    row
                })
                .collect(),
        )
    }

    /// One episode from an initial-state draw until a terminal state or
    /// `max_steps` transitions.
    pub fn rollout(&self, policy: &impl StatePolicy, rng: &mut RngStream, max_steps: usize, episode: u32) -> Vec<Transition> {
        let mut s = self.sample_start(rng);
        let mut out = Vec::new();
        if self.terminal[s] || max_steps == 0 {
            return out;
        }
        let mut a = policy.act(&[s as f64], ActMode::Sampled, rng);
        for _ in 0..max_steps {
            let ai = a as usize;
            let s2 = self.next[s][ai];
            let r = self.reward[s][ai];
            let done = self.terminal[s2];
            let a2 = (!done).then(|| policy.act(&[s2 as f64], ActMode::Sampled, rng));
            out.push(Transition {
                s: vec![s as f64],
                a,
                r,
                s_next: vec![s2 as f64],
                a_next: a2,
                done,
                episode,
            });
            match a2 {
                Some(next_a) => {
                    s = s2;
                    a = next_a;
                }
                None => break,
            }
        }
        out
    }

    /// Dataset of `n_episodes` rollouts.
    pub fn generate(
        &self,
        policy: &impl StatePolicy,
        n_episodes: usize,
        max_steps: usize,
        rng: &mut RngStream,
    ) -> Result<Dataset, EnvError> {
        let mut rows = Vec::new();
        let mut episode = 0u32;
        for _ in 0..n_episodes {
            let ep = self.rollout(policy, rng, max_steps, episode);
            if !ep.is_empty() {
                rows.extend(ep);
                episode += 1;
            }
        }
        Ok(Dataset::new(self.descriptor(), rows)?)
    }

    /// Discounted return of one sampled episode.
    pub fn mc_return(&self, policy: &impl StatePolicy, rng: &mut RngStream, max_steps: usize) -> f64 {
        let mut s = self.sample_start(rng);
        let mut total = 0.0;
        let mut discount = 1.0;
        for _ in 0..max_steps {
            if self.terminal[s] {
                break;
            }
            let a = policy.act(&[s as f64], ActMode::Sampled, rng) as usize;
            total += discount * self.reward[s][a];
            discount *= self.gamma;
            s = self.next[s][a];
        }
        total
    }

    /// Exact `J`, `Q` and `V` of a tabular policy by solving
    /// `(I - γ P_π) V = r_π` over non-terminal states.
    pub fn exact_eval(&self, policy: &impl TabularPolicy) -> Result<ExactEval, EnvError> {
        let n = self.n_states();
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n];
        for s in 0..n {
            a[s * n + s] = 1.0;
            if self.terminal[s] {
                continue;
            }
            let probs = policy.action_probs(s);
            for (act, &p) in probs.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                b[s] += p * self.reward[s][act];
                for (s2, pt) in self.transition_probs(s, act) {
                    if !self.terminal[s2] {
                        a[s * n + s2] -= self.gamma * p * pt;
                    }
                }
            }
        }
        let v = solve_linear(n, a, b).ok_or(EnvError::Singular)?;
        let q = (0..n)
            .map(|s| {
                let mut row = [0.0; N_GRID_ACTIONS];
                if !self.terminal[s] {
                    for (act, q) in row.iter_mut().enumerate() {
                        let s2 = self.next[s][act];
                        *q = self.reward[s][act] + self.gamma * v[s2];
                    }
                }
                row
            })
            .collect();
        let j = self.init.iter().zip(&v).map(|(p, v)| p * v).sum();
        Ok(ExactEval { j, q, v })
    }

    /// Max-norm residual of the Bellman evaluation equation for `policy`.
    pub fn bellman_residual(&self, policy: &impl TabularPolicy, v: &[f64]) -> f64 {
        (0..self.n_states())
            .filter(|&s| !self.terminal[s])
            .map(|s| {
                let probs = policy.action_probs(s);
                let backup: f64 = probs
                    .iter()
                    .enumerate()
                    .map(|(a, p)| p * (self.reward[s][a] + self.gamma * v[self.next[s][a]]))
                    .sum();
                (backup - v[s]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Text rendering of the greedy action of `policy` on every cell.
    pub fn render_policy(&self, policy: &impl TabularPolicy) -> String {
        let mut out = String::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let s = r * self.width + c;
                let glyph = if self.wall[s] {
                    '#'
                } else if self.terminal[s] {
                    'G'
                } else {
                    let probs = policy.action_probs(s);
                    let best = (0..N_GRID_ACTIONS).fold(0, |b, a| if probs[a] > probs[b] { a } else { b });
                    ['^', '>', 'v', '<'][best]
                };
                let _ = write!(out, "{glyph}");
            }
            out.push('\n');
        }
        out
    }
}

/// Dense Gaussian elimination with partial pivoting; `a` is row-major `n×n`.
pub fn solve_linear<T: Scalar>(n: usize, mut a: Vec<T>, mut b: Vec<T>) -> Option<Vec<T>> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i * n + col]
                .abs()
                .partial_cmp(&a[j * n + col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot * n + col].abs() <= T::epsilon() {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor == T::zero() {
                continue;
            }
            for k in col..n {
                let v = a[col * n + k];
                a[row * n + k] -= factor * v;
            }
            let bc = b[col];
            b[row] -= factor * bc;
        }
    }
    let mut x = vec![T::zero(); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::FnPolicy;

    #[test]
    fn reward_examples() {
        assert_eq!(bandit_reward(0.5, 0.5).unwrap(), 1.0);
        assert_eq!(bandit_reward(0.0, 1.0).unwrap(), -1.0);
        assert_eq!(bandit_reward(0.0, 0.5).unwrap(), 0.5);
        assert!(bandit_reward(1.2, 0.5).is_err());
        assert!(bandit_reward(0.5, -0.1).is_err());
    }

    #[test]
    fn generated_actions_lie_in_band() {
        let ds = bandit_generate(20_000, &mut RngStream::new(1, "data")).unwrap();
        for t in ds.transitions() {
            let s = t.s[0];
            assert!(t.a >= s / 2.0 && t.a <= (s + 1.0) / 2.0);
            assert!(t.r > -1.0);
        }
        assert_eq!(ds.episodic_returns().len(), ds.len());
        assert!(ds.episodic_returns().iter().zip(ds.transitions()).all(|(g, t)| *g == t.r));
    }

    #[test]
    fn behavior_mean_reward() {
        let ds = bandit_generate(1_000_000, &mut RngStream::new(2, "data")).unwrap();
        let mean = ds.transitions().iter().map(|t| t.r).sum::<f64>() / ds.len() as f64;
        assert!((mean - BANDIT_BEHAVIOR_RETURN).abs() < 0.002, "{mean}");
    }

    #[test]
    fn behavior_support_near_half() {
        let ds = bandit_generate(200_000, &mut RngStream::new(3, "data")).unwrap();
        let acts: Vec<f64> = ds
            .transitions()
            .iter()
            .filter(|t| (0.49..=0.51).contains(&t.s[0]))
            .map(|t| t.a)
            .collect();
        let lo = acts.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = acts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((0.245 - 1e-9..0.26).contains(&lo), "{lo}");
        assert!(hi <= 0.755 + 1e-9 && hi > 0.74, "{hi}");
    }

    #[test]
    fn eval_best_in_support_and_unconstrained() {
        let mut rng = RngStream::new(4, "eval");
        let best = bandit_eval(&FnPolicy(|s: &[f64]| bandit_best_in_support_action(s[0])), 200_000, &mut rng, ActMode::Sampled).unwrap();
        assert!((best.mean - BANDIT_BEST_IN_SUPPORT_RETURN).abs() < 4.0 * best.std_err + 1e-3);
        let naive = bandit_eval(&FnPolicy(|s: &[f64]| 1.0 - s[0]), 200_000, &mut rng, ActMode::Sampled).unwrap();
        assert!(naive.mean < BANDIT_BEST_IN_SUPPORT_RETURN);
        let behavior = FnPolicy(|s: &[f64]| {
            // Deterministic quasi-behavior: midpoint of the band.
            (s[0] + 0.5) / 2.0
        });
        let mid = bandit_eval(&behavior, 10_000, &mut rng, ActMode::Modal).unwrap();
        assert!(mid.mean > BANDIT_BEHAVIOR_RETURN);
    }

    fn corridor(gamma: f64) -> GridMdp {
        GridMdp::from_map("S.G\n", gamma).unwrap()
    }

    #[test]
    fn adjacent_goal_in_one_step() {
        let mdp = GridMdp::from_map(".SG\n", 0.9).unwrap();
        let right = FnPolicy(|_: &[f64]| RIGHT as f64);
        let ep = mdp.rollout(&right, &mut RngStream::new(0, "r"), 10, 0);
        assert_eq!(ep.len(), 1);
        assert_eq!(ep[0].r, 1.0);
        assert!(ep[0].done && ep[0].a_next.is_none());
    }

    #[test]
    fn wall_bump_is_self_transition() {
        let mdp = GridMdp::from_map("S#G\n...\n", 0.9).unwrap();
        assert_eq!(mdp.next_state(0, RIGHT), 0);
        assert_eq!(mdp.next_state(0, UP), 0);
        assert_eq!(mdp.next_state(0, LEFT), 0);
        assert_eq!(mdp.next_state(0, DOWN), 3);
    }

    #[test]
    fn deterministic_rollouts_match_across_seeds() {
        let mdp = GridMdp::default_world();
        let greedy = mdp.behavior_policy(1.0);
        let a = mdp.rollout(&greedy, &mut RngStream::new(1, "r"), 100, 0);
        let b = mdp.rollout(&greedy, &mut RngStream::new(2, "r"), 100, 0);
        assert_eq!(a, b);
        assert_eq!(a.len(), 14);
    }

    #[test]
    fn zero_reward_values_vanish() {
        let n = 4;
        let mdp = GridMdp::from_tables(2, 2, vec![[1, 2, 3, 0]; n], vec![[0.0; 4]; n], vec![false; n], vec![0.25; n], 0.9).unwrap();
        let pol = PolicyTable(vec![vec![0.25; 4]; n]);
        let e = mdp.exact_eval(&pol).unwrap();
        assert_eq!(e.j, 0.0);
        assert!(e.v.iter().all(|&v| v == 0.0));
        assert!(e.q.iter().flatten().all(|&q| q == 0.0));
    }

    #[test]
    fn self_loop_geometric_series() {
        let mdp = GridMdp::from_tables(1, 1, vec![[0; 4]], vec![[1.0; 4]], vec![false], vec![1.0], 0.9).unwrap();
        let e = mdp.exact_eval(&PolicyTable(vec![vec![0.25; 4]])).unwrap();
        assert!((e.v[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn two_step_chain() {
        let mdp = corridor(0.9);
        let right = PolicyTable(vec![vec![0.0, 1.0, 0.0, 0.0]; 3]);
        let e = mdp.exact_eval(&right).unwrap();
        assert!((e.j - 0.9).abs() < 1e-12);
        assert!((e.v[1] - 1.0).abs() < 1e-12);
        assert!((e.q[0][LEFT] - 0.81).abs() < 1e-12);
    }

    #[test]
    fn exact_eval_is_bellman_fixed_point() {
        let mdp = GridMdp::default_world();
        let beta = mdp.behavior_policy(0.5);
        let e = mdp.exact_eval(&beta).unwrap();
        assert!(mdp.bellman_residual(&beta, &e.v) < 1e-10);
    }

    #[test]
    fn monte_carlo_agrees_with_exact() {
        let mdp = GridMdp::default_world();
        let beta = mdp.behavior_policy(0.5);
        let exact = mdp.exact_eval(&beta).unwrap().j;
        let mut rng = RngStream::new(7, "mc");
        let xs: Vec<f64> = (0..10_000).map(|_| mdp.mc_return(&beta, &mut rng, 2_000)).collect();
        let stats = ReturnStats::from_samples(&xs);
        assert!((stats.mean - exact).abs() < 3.0 * stats.std_err, "{} vs {exact}", stats.mean);
    }

    #[test]
    fn map_round_trip_and_errors() {
        let text = "S..#\n.#..\n...G\n";
        let mdp = GridMdp::from_map(text, 0.95).unwrap();
        assert_eq!(mdp.to_map_string(), text);
        assert_eq!(GridMdp::from_map(&mdp.to_map_string(), 0.95).unwrap(), mdp);
        assert!(matches!(GridMdp::from_map("S.\n.x\n", 0.9), Err(EnvError::BadMap { line: 2, .. })));
        assert!(GridMdp::from_map("S.G\n", 1.0).is_err());
        assert!(GridMdp::from_map("..G\n", 0.9).is_err());
    }

    #[test]
    fn generated_grid_dataset_is_valid() {
        let mdp = GridMdp::default_world();
        let beta = mdp.behavior_policy(0.5);
        let ds = mdp.generate(&beta, 50, 200, &mut RngStream::new(3, "data")).unwrap();
        assert_eq!(ds.n_episodes(), 50);
        assert!(ds.len() >= 50 * 14);
    }

    #[test]
    fn linear_solver_generic() {
        let x = solve_linear(2, vec![2.0_f32, 1.0, 1.0, 3.0], vec![3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-6 && (x[1] - 1.4).abs() < 1e-6);
        assert!(solve_linear(2, vec![1.0_f64, 2.0, 2.0, 4.0], vec![1.0, 2.0]).is_none());
    }
}
