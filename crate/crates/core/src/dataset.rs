//! Immutable offline transition store.
//!
//! # File format
//!
//! A dataset file is a short text header followed by fixed-width binary
//! records:
//!
//! ```text
//! QFILDS 1
//! env <name>
//! state_dim <d>
//! action continuous <lo> <hi>     (or: action discrete <n>)
//! encoding raw                    (or: encoding onehot <n>)
//! count <N>
//! end
//! ```
//!
//! Each of the `N` records is, little-endian: `d` f64 state values, f64
//! action, f64 reward, `d` f64 next-state values, f64 next action (0 when
//! absent), one flag byte (bit 0 = done, bit 1 = next action present) and a
//! u32 episode id. Floats are stored as raw bits, so save/load is exact.

use crate::numerics::RngStream;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("record {record}: {reason}")]
    Invalid { record: usize, reason: String },
    #[error("header line {line}: {reason}")]
    Header { line: usize, reason: String },
    #[error("dataset is empty")]
    Empty,
    #[error("weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActionSpace {
    Continuous { lo: f64, hi: f64 },
    Discrete { n: usize },
}

impl ActionSpace {
    pub fn contains(&self, a: f64) -> bool {
        match *self {
            Self::Continuous { lo, hi } => a >= lo && a <= hi,
            Self::Discrete { n } => a.fract() == 0.0 && a >= 0.0 && (a as usize) < n,
        }
    }

    /// Width of the action's network encoding.
    pub fn feature_dim(&self) -> usize {
        match *self {
            Self::Continuous { .. } => 1,
            Self::Discrete { n } => n,
        }
    }

    pub fn push_features(&self, a: f64, out: &mut Vec<f64>) {
        match *self {
            Self::Continuous { .. } => out.push(a),
            Self::Discrete { n } => {
                let start = out.len();
                out.resize(start + n, 0.0);
                out[start + a as usize] = 1.0;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StateEncoding {
    /// State vector fed to networks as is.
    Raw,
    /// One-dimensional integer state index expanded to a one-hot vector.
    OneHot { n: usize },
}

/// What an environment looks like to the learners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvDescriptor {
    pub name: String,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub encoding: StateEncoding,
}

impl EnvDescriptor {
    pub fn state_feature_dim(&self) -> usize {
        match self.encoding {
            StateEncoding::Raw => self.state_dim,
            StateEncoding::OneHot { n } => n,
        }
    }

    pub fn push_state_features(&self, s: &[f64], out: &mut Vec<f64>) {
        match self.encoding {
            StateEncoding::Raw => out.extend_from_slice(s),
            StateEncoding::OneHot { n } => {
                let start = out.len();
                out.resize(start + n, 0.0);
                out[start + s[0] as usize] = 1.0;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: f64,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// Action taken at `s_next`; absent exactly when `done`.
    pub a_next: Option<f64>,
    pub done: bool,
    pub episode: u32,
}

/// Validated, read-only collection of transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    env: EnvDescriptor,
    transitions: Vec<Transition>,
    returns: Vec<f64>,
}

fn invalid(record: usize, reason: impl Into<String>) -> DatasetError {
    DatasetError::Invalid {
        record,
        reason: reason.into(),
    }
}

fn validate(env: &EnvDescriptor, i: usize, t: &Transition, prev_episode: Option<u32>) -> Result<(), DatasetError> {
    if t.s.len() != env.state_dim || t.s_next.len() != env.state_dim {
        return Err(invalid(i, format!("state dimension differs from {}", env.state_dim)));
    }
    if t.s.iter().chain(&t.s_next).any(|x| !x.is_finite()) {
        return Err(invalid(i, "non-finite state value"));
    }
    if let StateEncoding::OneHot { n } = env.encoding {
        let ok = |x: f64| x.fract() == 0.0 && x >= 0.0 && (x as usize) < n;
        if !ok(t.s[0]) || !ok(t.s_next[0]) {
            return Err(invalid(i, format!("state index outside 0..{n}")));
        }
    }
    if !t.r.is_finite() {
        return Err(invalid(i, format!("non-finite reward {}", t.r)));
    }
    if !env.action_space.contains(t.a) {
        return Err(invalid(i, format!("action {} outside action space", t.a)));
    }
    match (t.done, t.a_next) {
        (true, Some(_)) => return Err(invalid(i, "terminal transition carries a next action")),
        (false, None) => return Err(invalid(i, "non-terminal transition lacks a next action")),
        (false, Some(a)) if !env.action_space.contains(a) => {
            return Err(invalid(i, format!("next action {a} outside action space")))
        }
        _ => {}
    }
    let expected = match prev_episode {
        None => t.episode == 0,
        Some(p) => t.episode == p || t.episode == p + 1,
    };
    if !expected {
        return Err(invalid(i, format!("episode id {} breaks contiguity", t.episode)));
    }
    Ok(())
}

impl Dataset {
    /// Validates every transition and computes per-episode returns.
    pub fn new(env: EnvDescriptor, transitions: Vec<Transition>) -> Result<Self, DatasetError> {
        let mut prev = None;
        let mut returns: Vec<f64> = Vec::new();
        for (i, t) in transitions.iter().enumerate() {
            validate(&env, i, t, prev)?;
            if prev != Some(t.episode) {
                returns.push(0.0);
            }
            *returns.last_mut().expect("pushed above") += t.r;
            prev = Some(t.episode);
        }
        Ok(Self {
            env,
            transitions,
            returns,
        })
    }

    pub fn env(&self) -> &EnvDescriptor {
        &self.env
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.transitions[i]
    }

    pub fn n_episodes(&self) -> usize {
        self.returns.len()
    }

    /// Undiscounted return of every episode, in episode order.
    pub fn episodic_returns(&self) -> &[f64] {
        &self.returns
    }

    /// `n` uniform draws with replacement, as row indices.
    pub fn sample_indices(&self, n: usize, rng: &mut RngStream) -> Result<Vec<usize>, DatasetError> {
        if self.is_empty() {
            return Err(DatasetError::Empty);
        }
        Ok((0..n).map(|_| rng.index(self.len())).collect())
    }

    /// `n` uniform draws with replacement.
    pub fn sample_batch(&self, n: usize, rng: &mut RngStream) -> Result<Vec<&Transition>, DatasetError> {
        Ok(self
            .sample_indices(n, rng)?
            .into_iter()
            .map(|i| &self.transitions[i])
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(BufReader::new(file))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        writeln!(w, "QFILDS {FORMAT_VERSION}")?;
        writeln!(w, "env {}", self.env.name)?;
        writeln!(w, "state_dim {}", self.env.state_dim)?;
        match self.env.action_space {
            ActionSpace::Continuous { lo, hi } => writeln!(w, "action continuous {lo:?} {hi:?}")?,
            ActionSpace::Discrete { n } => writeln!(w, "action discrete {n}")?,
        }
        match self.env.encoding {
            StateEncoding::Raw => writeln!(w, "encoding raw")?,
            StateEncoding::OneHot { n } => writeln!(w, "encoding onehot {n}")?,
        }
        writeln!(w, "count {}", self.len())?;
        writeln!(w, "end")?;
        let mut buf = Vec::with_capacity(record_width(self.env.state_dim));
        for t in &self.transitions {
            buf.clear();
            for x in t.s.iter().chain([t.a, t.r].iter()).chain(t.s_next.iter()) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            buf.extend_from_slice(&t.a_next.unwrap_or(0.0).to_le_bytes());
            let flags = u8::from(t.done) | (u8::from(t.a_next.is_some()) << 1);
            buf.push(flags);
            buf.extend_from_slice(&t.episode.to_le_bytes());
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, DatasetError> {
        let mut line_no = 0;
        let mut next_line = |r: &mut R| -> Result<(usize, String), DatasetError> {
            let mut line = String::new();
            line_no += 1;
            if r.read_line(&mut line)? == 0 {
                return Err(DatasetError::Header {
                    line: line_no,
                    reason: "unexpected end of header".into(),
                });
            }
            Ok((line_no, line.trim_end_matches('\n').to_string()))
        };
        let header_err = |line: usize, reason: String| DatasetError::Header { line, reason };

        let (n, magic) = next_line(&mut r)?;
        if magic != format!("QFILDS {FORMAT_VERSION}") {
            return Err(header_err(n, format!("unsupported magic/version {magic:?}")));
        }
        let mut field = |r: &mut R, key: &str| -> Result<(usize, Vec<String>), DatasetError> {
            let (n, line) = next_line(r)?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(header_err(n, format!("expected `{key}`, found {line:?}")));
            }
            Ok((n, parts.map(str::to_string).collect()))
        };
        let parse_usize = |n: usize, s: Option<&String>| -> Result<usize, DatasetError> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| header_err(n, "expected a non-negative integer".into()))
        };
        let parse_f64 = |n: usize, s: Option<&String>| -> Result<f64, DatasetError> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| header_err(n, "expected a number".into()))
        };

        let (n, name) = field(&mut r, "env")?;
        let name = name.first().cloned().ok_or_else(|| header_err(n, "missing env name".into()))?;
        let (n, v) = field(&mut r, "state_dim")?;
        let state_dim = parse_usize(n, v.first())?;
        let (n, v) = field(&mut r, "action")?;
        let action_space = match v.first().map(String::as_str) {
            Some("continuous") => ActionSpace::Continuous {
                lo: parse_f64(n, v.get(1))?,
                hi: parse_f64(n, v.get(2))?,
            },
            Some("discrete") => ActionSpace::Discrete {
                n: parse_usize(n, v.get(1))?,
            },
            _ => return Err(header_err(n, format!("unknown action space {v:?}"))),
        };
        let (n, v) = field(&mut r, "encoding")?;
        let encoding = match v.first().map(String::as_str) {
            Some("raw") => StateEncoding::Raw,
            Some("onehot") => StateEncoding::OneHot {
                n: parse_usize(n, v.get(1))?,
            },
            _ => return Err(header_err(n, format!("unknown encoding {v:?}"))),
        };
        let (n, v) = field(&mut r, "count")?;
        let count = parse_usize(n, v.first())?;
        field(&mut r, "end")?;

        let env = EnvDescriptor {
            name,
            state_dim,
            action_space,
            encoding,
        };
        let width = record_width(state_dim);
        let mut buf = vec![0u8; width];
        let mut transitions = Vec::with_capacity(count);
        for i in 0..count {
            r.read_exact(&mut buf)
                .map_err(|e| invalid(i, format!("truncated record ({e})")))?;
            let f = |k: usize| f64::from_le_bytes(buf[8 * k..8 * k + 8].try_into().expect("8 bytes"));
            let d = state_dim;
            let s = (0..d).map(f).collect();
            let a = f(d);
            let reward = f(d + 1);
            let s_next = (d + 2..2 * d + 2).map(f).collect();
            let a_next_raw = f(2 * d + 2);
            let flags = buf[8 * (2 * d + 3)];
            if flags & !0b11 != 0 {
                return Err(invalid(i, format!("unknown flag bits {flags:#b}")));
            }
            let episode = u32::from_le_bytes(buf[width - 4..].try_into().expect("4 bytes"));
            transitions.push(Transition {
                s,
                a,
                r: reward,
                s_next,
                a_next: (flags & 0b10 != 0).then_some(a_next_raw),
                done: flags & 0b01 != 0,
                episode,
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(invalid(count, format!("{} trailing bytes after declared records", rest.len())));
        }
        Self::new(env, transitions)
    }

    /// Human-readable CSV export (not read back).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        let d = self.env.state_dim;
        let cols: Vec<String> = (0..d)
            .map(|k| format!("s{k}"))
            .chain(["a".into(), "r".into()])
            .chain((0..d).map(|k| format!("s_next{k}")))
            .chain(["a_next".into(), "done".into(), "episode".into()])
            .collect();
        writeln!(w, "{}", cols.join(","))?;
        for t in &self.transitions {
            let mut row: Vec<String> = t.s.iter().map(|x| x.to_string()).collect();
            row.push(t.a.to_string());
            row.push(t.r.to_string());
            row.extend(t.s_next.iter().map(|x| x.to_string()));
            row.push(t.a_next.map(|a| a.to_string()).unwrap_or_default());
            row.push(u8::from(t.done).to_string());
            row.push(t.episode.to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn record_width(state_dim: usize) -> usize {
    8 * (2 * state_dim + 3) + 1 + 4
}

/// One non-negative weight per dataset row.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self, DatasetError> {
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
            return Err(DatasetError::Weights(format!("row {i} has invalid weight {w}")));
        }
        Ok(Self(weights))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    /// 0/1 weights from a keep mask.
    pub fn from_mask(mask: impl IntoIterator<Item = bool>) -> Self {
        Self(mask.into_iter().map(|k| if k { 1.0 } else { 0.0 }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Fraction of rows with positive weight.
    pub fn keep_rate(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().filter(|&&w| w > 0.0).count() as f64 / self.0.len() as f64
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&w| w == 0.0 || w == 1.0)
    }
}

impl fmt::Display for EnvDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (state_dim {}, {:?})", self.name, self.state_dim, self.action_space)
    }
}
