//! Policy action heads: a truncated normal on a bounded interval and a
//! categorical over a finite action set.
//!
//! Every head is built from raw network outputs. The truncated normal reads
//! `[mean, log_std]` and hard-clamps the log standard deviation to
//! `[-5, 0]`; the categorical reads one logit per action.

use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 0.0;

#[derive(Debug, Error, PartialEq)]
pub enum DistError {
    #[error("action {action} outside support [{lo}, {hi}]")]
    OutOfBounds { action: f64, lo: f64, hi: f64 },
    #[error("action index {index} invalid for {n} actions")]
    BadIndex { index: f64, n: usize },
    #[error("invalid head parameters: {0}")]
    BadParams(String),
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln φ(x)` for the standard normal density.
pub fn log_std_normal_pdf<T: Scalar>(x: T) -> T {
    -x * x / T::lit(2.0) - T::lit(LN_SQRT_2PI)
}

/// `ln(1 - Φ(x))`, accurate deep into the upper tail.
pub fn log_std_normal_sf<T: Scalar>(x: T) -> T {
    let threshold = T::lit(8.0);
    if x < threshold {
        return (T::lit(0.5) * (x / T::lit(std::f64::consts::SQRT_2)).erfc()).ln();
    }
    // Asymptotic series: sf(x) = φ(x)/x · Σ (-1)^k (2k-1)!! / x^{2k}.
    let inv2 = T::one() / (x * x);
    let mut term = T::one();
    let mut sum = T::one();
    for k in 1..12 {
        term = -term * T::from_usize_lossy(2 * k - 1) * inv2;
        sum += term;
    }
    log_std_normal_pdf(x) - x.ln() + sum.ln()
}

/// Standard normal CDF.
pub fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (-x / T::lit(std::f64::consts::SQRT_2)).erfc()
}

/// `ln(Φ(b) - Φ(a))` for `a < b`, without cancellation when both bounds sit
/// in the same tail.
pub fn log_normal_mass<T: Scalar>(a: T, b: T) -> T {
    if a >= T::zero() {
        let la = log_std_normal_sf(a);
        let lb = log_std_normal_sf(b);
        la + (-(lb - la).exp()).ln_1p()
    } else if b <= T::zero() {
        log_normal_mass(-b, -a)
    } else {
        let upper = T::lit(0.5) * (b / T::lit(std::f64::consts::SQRT_2)).erfc();
        let lower = T::lit(0.5) * (-a / T::lit(std::f64::consts::SQRT_2)).erfc();
        (T::one() - upper - lower).ln()
    }
}

/// Normal distribution with the given mean and standard deviation truncated
/// to `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncNormalHead<T> {
    mean: T,
    log_std: T,
    /// Which side of the clamp range the raw log-std fell on, if any.
    clamped: Clamp,
    lo: T,
    hi: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Clamp {
    Free,
    Low,
    High,
}

impl<T: Scalar> TruncNormalHead<T> {
    /// Builds a head from a raw mean and raw log-std; the log-std is clamped
    /// to `[-5, 0]`.
    pub fn new(mean: T, raw_log_std: T, lo: T, hi: T) -> Result<Self, DistError> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(DistError::BadParams(format!("bounds [{lo}, {hi}]")));
        }
        if !mean.is_finite() || raw_log_std.is_nan() {
            return Err(DistError::BadParams(format!("mean {mean}, log_std {raw_log_std}")));
        }
        let min = T::lit(LOG_STD_MIN);
        let max = T::lit(LOG_STD_MAX);
        let clamped = if raw_log_std < min {
            Clamp::Low
        } else if raw_log_std > max {
            Clamp::High
        } else {
            Clamp::Free
        };
        Ok(Self {
            mean,
            log_std: raw_log_std.max(min).min(max),
            clamped,
            lo,
            hi,
        })
    }

    /// Head with an explicit standard deviation and no log-std clamp.
    pub fn from_std(mean: T, std: T, lo: T, hi: T) -> Result<Self, DistError> {
        if !(std > T::zero()) || !std.is_finite() {
            return Err(DistError::BadParams(format!("std {std}")));
        }
        let mut head = Self::new(mean, T::zero(), lo, hi)?;
        head.log_std = std.ln();
        head.clamped = Clamp::Free;
        Ok(head)
    }

    pub fn mean_param(&self) -> T {
        self.mean
    }

    pub fn log_std(&self) -> T {
        self.log_std
    }

    pub fn std(&self) -> T {
        self.log_std.exp()
    }

    pub fn bounds(&self) -> (T, T) {
        (self.lo, self.hi)
    }

    fn standardized_bounds(&self) -> (T, T) {
        let s = self.std();
        ((self.lo - self.mean) / s, (self.hi - self.mean) / s)
    }

    fn check(&self, a: T) -> Result<(), DistError> {
        if a >= self.lo && a <= self.hi {
            Ok(())
        } else {
            Err(DistError::OutOfBounds {
                action: a.to_f64().unwrap_or(f64::NAN),
                lo: self.lo.to_f64().unwrap_or(f64::NAN),
                hi: self.hi.to_f64().unwrap_or(f64::NAN),
            })
        }
    }

    pub fn logprob(&self, a: T) -> Result<T, DistError> {
        self.check(a)?;
        let (alpha, beta) = self.standardized_bounds();
        let z = (a - self.mean) / self.std();
        Ok(log_std_normal_pdf(z) - self.log_std - log_normal_mass(alpha, beta))
    }

    /// Log density and its gradient with respect to the raw head inputs
    /// `[mean, raw_log_std]`. When the raw log-std was clamped, its gradient
    /// is kept only if it points back into the clamp range.
    pub fn logprob_grad(&self, a: T) -> Result<(T, [T; 2]), DistError> {
        self.check(a)?;
        let s = self.std();
        let (alpha, beta) = self.standardized_bounds();
        let z = (a - self.mean) / s;
        let log_z = log_normal_mass(alpha, beta);
        let pa = (log_std_normal_pdf(alpha) - log_z).exp();
        let pb = (log_std_normal_pdf(beta) - log_z).exp();
        let logp = log_std_normal_pdf(z) - self.log_std - log_z;
        let d_mean = z / s - (pa - pb) / s;
        // alpha * φ(alpha) is zero when alpha is infinite; guard 0 * inf.
        let tail = |x: T, p: T| if p == T::zero() { T::zero() } else { x * p };
        let d_log_std = z * z - T::one() - (tail(alpha, pa) - tail(beta, pb));
        let d_log_std = match self.clamped {
            Clamp::Free => d_log_std,
            Clamp::Low if d_log_std > T::zero() => d_log_std,
            Clamp::High if d_log_std < T::zero() => d_log_std,
            _ => T::zero(),
        };
        Ok((logp, [d_mean, d_log_std]))
    }

    /// Mean clamped into the support.
    pub fn mode(&self) -> T {
        self.mean.max(self.lo).min(self.hi)
    }

    /// Analytic mean of the truncated distribution.
    pub fn truncated_mean(&self) -> T {
        let (alpha, beta) = self.standardized_bounds();
        let log_z = log_normal_mass(alpha, beta);
        let pa = (log_std_normal_pdf(alpha) - log_z).exp();
        let pb = (log_std_normal_pdf(beta) - log_z).exp();
        self.mean + self.std() * (pa - pb)
    }

    /// Analytic variance of the truncated distribution.
    pub fn truncated_variance(&self) -> T {
        let (alpha, beta) = self.standardized_bounds();
        let log_z = log_normal_mass(alpha, beta);
        let pa = (log_std_normal_pdf(alpha) - log_z).exp();
        let pb = (log_std_normal_pdf(beta) - log_z).exp();
        let s2 = self.std() * self.std();
        s2 * (T::one() + (alpha * pa - beta * pb) - (pa - pb) * (pa - pb))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        let (alpha, beta) = self.standardized_bounds();
        let z = sample_std_truncated(
            alpha.to_f64().unwrap_or(f64::NEG_INFINITY),
            beta.to_f64().unwrap_or(f64::INFINITY),
            rng,
        );
        let a = self.mean + self.std() * T::lit(z);
        a.max(self.lo).min(self.hi)
    }
}

/// Standard normal truncated to `[a, b]`, by rejection (normal, uniform or
/// translated-exponential proposal depending on where the interval sits).
fn sample_std_truncated<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if a <= 0.0 && b >= 0.0 {
        if b - a >= 2.5 {
            loop {
                let z: f64 = rng.sample(StandardNormal);
                if z >= a && z <= b {
                    return z;
                }
            }
        }
        loop {
            let z = a + (b - a) * rng.gen::<f64>();
            if rng.gen::<f64>() <= (-z * z / 2.0).exp() {
                return z;
            }
        }
    } else if a > 0.0 {
        sample_upper_tail(a, b, rng)
    } else {
        -sample_upper_tail(-b, -a, rng)
    }
}

/// Standard normal truncated to `[a, b]` with `0 < a < b`.
fn sample_upper_tail<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let root = (a * a + 4.0).sqrt();
    let lambda = (a + root) / 2.0;
    let uniform_width = 2.0 * std::f64::consts::E.sqrt() / (a + root) * ((a * a - a * root) / 4.0).exp();
    if b - a < uniform_width {
        loop {
            let z = a + (b - a) * rng.gen::<f64>();
            if rng.gen::<f64>() <= ((a * a - z * z) / 2.0).exp() {
                return z;
            }
        }
    }
    loop {
        let u: f64 = rng.gen();
        let z = a - (1.0 - u).ln() / lambda;
        if z > b {
            continue;
        }
        if rng.gen::<f64>() <= (-(z - lambda) * (z - lambda) / 2.0).exp() {
            return z;
        }
    }
}

/// Categorical distribution over `0..n` given by logits.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalHead<T> {
    logits: Vec<T>,
    log_probs: Vec<T>,
}

impl<T: Scalar> CategoricalHead<T> {
    pub fn new(logits: Vec<T>) -> Result<Self, DistError> {
        if logits.is_empty() || logits.iter().any(|l| l.is_nan() || *l == T::infinity()) {
            return Err(DistError::BadParams(format!("logits {logits:?}")));
        }
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
        let log_probs = logits.iter().map(|&l| l - lse).collect();
        Ok(Self { logits, log_probs })
    }

    /// Head with the given probabilities (zeros allowed).
    pub fn from_probs(probs: &[T]) -> Result<Self, DistError> {
        Self::new(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn n(&self) -> usize {
        self.logits.len()
    }

    pub fn probs(&self) -> Vec<T> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn logprob(&self, index: usize) -> Result<T, DistError> {
        self.log_probs.get(index).copied().ok_or(DistError::BadIndex {
            index: index as f64,
            n: self.n(),
        })
    }

    /// Log mass and gradient with respect to the logits.
    pub fn logprob_grad(&self, index: usize) -> Result<(T, Vec<T>), DistError> {
        let lp = self.logprob(index)?;
        let grad = self
            .log_probs
            .iter()
            .enumerate()
            .map(|(i, l)| if i == index { T::one() } else { T::zero() } - l.exp())
            .collect();
        Ok((lp, grad))
    }

    /// Highest-logit action, lowest index among ties.
    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (i, l) in self.logits.iter().enumerate() {
            if *l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = T::lit(rng.gen::<f64>());
        let mut acc = T::zero();
        let mut last_positive = 0;
        for (i, l) in self.log_probs.iter().enumerate() {
            let p = l.exp();
            if p > T::zero() {
                last_positive = i;
            }
            acc += p;
            if u < acc {
                return i;
            }
        }
        last_positive
    }
}

/// Either head, with actions carried as scalars (categorical actions are
/// integer-valued).
#[derive(Clone, Debug, PartialEq)]
pub enum ActionHead<T> {
    TruncNormal(TruncNormalHead<T>),
    Categorical(CategoricalHead<T>),
}

fn as_index<T: Scalar>(a: T, n: usize) -> Result<usize, DistError> {
    let bad = || DistError::BadIndex {
        index: a.to_f64().unwrap_or(f64::NAN),
        n,
    };
    if a.fract() != T::zero() || a < T::zero() {
        return Err(bad());
    }
    let i = a.to_usize().ok_or_else(bad)?;
    if i < n {
        Ok(i)
    } else {
        Err(bad())
    }
}

impl<T: Scalar> ActionHead<T> {
    pub fn logprob(&self, a: T) -> Result<T, DistError> {
        match self {
            Self::TruncNormal(h) => h.logprob(a),
            Self::Categorical(h) => h.logprob(as_index(a, h.n())?),
        }
    }

    /// Log-likelihood and gradient with respect to the raw network outputs
    /// that built this head.
    pub fn logprob_grad(&self, a: T) -> Result<(T, Vec<T>), DistError> {
        match self {
            Self::TruncNormal(h) => {
                let (lp, g) = h.logprob_grad(a)?;
                Ok((lp, g.to_vec()))
            }
            Self::Categorical(h) => h.logprob_grad(as_index(a, h.n())?),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        match self {
            Self::TruncNormal(h) => h.sample(rng),
            Self::Categorical(h) => T::from_usize_lossy(h.sample(rng)),
        }
    }

    pub fn mode(&self) -> T {
        match self {
            Self::TruncNormal(h) => h.mode(),
            Self::Categorical(h) => T::from_usize_lossy(h.mode()),
        }
    }
}
