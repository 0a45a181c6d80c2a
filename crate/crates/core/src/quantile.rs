//! Pushforward Q distributions, value-function quantiles and the
//! one-dimensional Wasserstein-1 distance.
//!
//! The quantile of a real distribution with CDF `F` is taken in the
//! supremum form `sup { v : F(v) <= τ }`. On the step CDF of `M` samples
//! `x_(1) <= … <= x_(M)` that supremum is the order statistic
//! `x_(k)` with `k = min(floor(τ M) + 1, M)`.

use crate::numerics::RngStream;
use crate::scalar::OrderedField;
use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuantileError {
    #[error("empty sample")]
    Empty,
    #[error("quantile level {0} outside [0, 1)")]
    BadLevel(String),
    #[error("sample sizes differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in sample")]
    NonFinite,
    #[error("probabilities invalid: {0}")]
    BadProbabilities(String),
}

fn cmp<T: PartialOrd>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// `M` values `Q(s, a_i)` with `a_i` drawn from a policy at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct PushforwardSamples<T> {
    pub state: Vec<f64>,
    pub values: Vec<T>,
    pub policy: String,
}

/// Level and sample count for a value-function quantile.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileConfig {
    pub tau: f64,
    pub samples: usize,
    pub stream: String,
}

impl QuantileConfig {
    pub fn new(tau: f64, samples: usize) -> Result<Self, QuantileError> {
        check_level(&tau)?;
        if samples == 0 {
            return Err(QuantileError::Empty);
        }
        Ok(Self {
            tau,
            samples,
            stream: "quantile".into(),
        })
    }
}

fn check_level<T: OrderedField>(tau: &T) -> Result<(), QuantileError> {
    if !tau.is_finite_value() || *tau < T::zero() || *tau >= T::one() {
        return Err(QuantileError::BadLevel(format!("{tau:?}")));
    }
    Ok(())
}

/// Draws `m` actions from `sample_action` and pushes them through `q`.
pub fn pushforward<T, Q, S>(
    state: &[f64],
    mut q: Q,
    mut sample_action: S,
    m: usize,
    rng: &mut RngStream,
    policy_label: &str,
) -> PushforwardSamples<T>
where
    Q: FnMut(&[f64]) -> Vec<T>,
    S: FnMut(&mut RngStream) -> f64,
{
    let actions: Vec<f64> = (0..m).map(|_| sample_action(rng)).collect();
    PushforwardSamples {
        state: state.to_vec(),
        values: q(&actions),
        policy: policy_label.to_string(),
    }
}

/// Index `k - 1` of the order statistic selected at level `tau` among `m`.
fn order_index<T: OrderedField>(tau: &T, m: usize) -> Result<usize, QuantileError> {
    check_level(tau)?;
    let scaled = tau.clone() * T::from_usize(m).ok_or(QuantileError::Empty)?;
    let floor = scaled
        .floor_to_usize()
        .ok_or_else(|| QuantileError::BadLevel(format!("{tau:?}")))?;
    Ok(floor.min(m - 1))
}

/// Supremum-form `tau` quantile of the empirical distribution of `values`.
pub fn empirical_quantile<T: OrderedField>(values: &[T], tau: &T) -> Result<T, QuantileError> {
    if values.is_empty() {
        return Err(QuantileError::Empty);
    }
    if values.iter().any(|v| !v.is_finite_value()) {
        return Err(QuantileError::NonFinite);
    }
    let k = order_index(tau, values.len())?;
    let mut sorted = values.to_vec();
    sorted.sort_by(cmp);
    Ok(sorted[k].clone())
}

/// Fraction of `values` at or below `v`.
pub fn pushforward_cdf<T: OrderedField>(values: &[T], v: &T) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|x| *x <= v).count() as f64 / values.len() as f64
}

/// Supremum-form quantile of a weighted finite distribution: the
/// all-actions counterpart of [`empirical_quantile`] for finite action sets.
pub fn weighted_quantile<T: OrderedField>(values: &[T], probs: &[T], tau: &T) -> Result<T, QuantileError> {
    if values.is_empty() {
        return Err(QuantileError::Empty);
    }
    if values.len() != probs.len() {
        return Err(QuantileError::LengthMismatch(values.len(), probs.len()));
    }
    check_level(tau)?;
    if probs.iter().any(|p| *p < T::zero()) {
        return Err(QuantileError::BadProbabilities("negative mass".into()));
    }
    let mut pairs: Vec<(T, T)> = values.iter().cloned().zip(probs.iter().cloned()).collect();
    pairs.sort_by(|a, b| cmp(&a.0, &b.0));
    let mut cdf = T::zero();
    let mut i = 0;
    while i < pairs.len() {
        // Accumulate every entry sharing this value before testing F(v).
        let v = pairs[i].0.clone();
        while i < pairs.len() && pairs[i].0 == v {
            cdf = cdf + pairs[i].1.clone();
            i += 1;
        }
        if cdf > *tau {
            return Ok(v);
        }
    }
    // Only reachable when the masses sum to at most tau (< 1).
    Err(QuantileError::BadProbabilities("total mass does not exceed tau".into()))
}

/// `V_{τ,β}(s)`: quantile of `m` behavior-pushforward samples at one state.
pub fn value_function_quantile<Q, S>(
    state: &[f64],
    q: Q,
    sample_behavior: S,
    cfg: &QuantileConfig,
    rng: &mut RngStream,
) -> Result<f64, QuantileError>
where
    Q: FnMut(&[f64]) -> Vec<f64>,
    S: FnMut(&mut RngStream) -> f64,
{
    let pf = pushforward(state, q, sample_behavior, cfg.samples, rng, "behavior");
    empirical_quantile(&pf.values, &cfg.tau)
}

/// Wasserstein-1 distance between two equal-size empirical distributions:
/// mean absolute difference of the sorted samples.
pub fn w1_empirical<T: OrderedField>(xs: &[T], ys: &[T]) -> Result<T, QuantileError> {
    if xs.is_empty() || ys.is_empty() {
        return Err(QuantileError::Empty);
    }
    if xs.len() != ys.len() {
        return Err(QuantileError::LengthMismatch(xs.len(), ys.len()));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(cmp);
    b.sort_by(cmp);
    let total = a
        .iter()
        .zip(&b)
        .fold(T::zero(), |acc, (x, y)| acc + (x.clone() - y.clone()).abs());
    Ok(total / T::from_usize(xs.len()).ok_or(QuantileError::Empty)?)
}

/// Resamples a sorted sample to `m` points by evaluating its quantile
/// function at the midpoints `(i + 1/2) / m`, so samples of different sizes
/// can be compared with [`w1_empirical`].
pub fn resample_sorted<T: Clone>(sorted: &[T], m: usize) -> Vec<T> {
    let k = sorted.len();
    (0..m).map(|i| sorted[((2 * i + 1) * k / (2 * m)).min(k - 1)].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::rational;
    use num_rational::BigRational;
    use proptest::prelude::*;

    #[test]
    fn quantile_examples() {
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0, 4.0], &0.5).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&[4.0, 1.0, 3.0, 2.0], &0.5).unwrap(), 3.0);
        for tau in [0.0, 0.3, 0.99] {
            assert_eq!(empirical_quantile(&[5.0], &tau).unwrap(), 5.0);
        }
        assert_eq!(empirical_quantile(&[10.0, 20.0], &0.75).unwrap(), 20.0);
        assert_eq!(empirical_quantile(&[10.0, 20.0], &0.0).unwrap(), 10.0);
    }

    #[test]
    fn quantile_errors() {
        assert_eq!(empirical_quantile::<f64>(&[], &0.5), Err(QuantileError::Empty));
        assert!(matches!(empirical_quantile(&[1.0], &1.0), Err(QuantileError::BadLevel(_))));
        assert!(matches!(empirical_quantile(&[1.0], &-0.1), Err(QuantileError::BadLevel(_))));
        assert_eq!(empirical_quantile(&[1.0, f64::NAN], &0.5), Err(QuantileError::NonFinite));
    }

    #[test]
    fn exact_rational_quantile() {
        let xs: Vec<BigRational> = (1..=4).map(|i| rational(i, 1)).collect();
        assert_eq!(empirical_quantile(&xs, &rational(1, 2)).unwrap(), rational(3, 1));
        assert_eq!(empirical_quantile(&xs, &rational(1, 4)).unwrap(), rational(2, 1));
        assert_eq!(empirical_quantile(&xs, &rational(24, 100)).unwrap(), rational(1, 1));
    }

    #[test]
    fn cdf_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(pushforward_cdf(&xs, &0.0), 0.0);
        assert_eq!(pushforward_cdf(&xs, &4.0), 1.0);
        assert_eq!(pushforward_cdf(&xs, &2.5), 0.5);
    }

    #[test]
    fn weighted_quantile_uniform_four() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(weighted_quantile(&v, &[0.25; 4], &0.5).unwrap(), 3.0);
        assert_eq!(weighted_quantile(&[0.0, 1.0], &[0.9, 0.1], &0.5).unwrap(), 0.0);
        // Duplicate values pool their mass.
        assert_eq!(weighted_quantile(&[1.0, 1.0, 2.0], &[0.3, 0.3, 0.4], &0.5).unwrap(), 1.0);
    }

    #[test]
    fn pushforward_constant_and_point_mass() {
        let mut rng = RngStream::new(1, "quantile");
        let pf = pushforward(&[0.3], |acts: &[f64]| vec![2.5; acts.len()], |r| r.uniform(), 50, &mut rng, "uniform");
        assert!(pf.values.iter().all(|&v| v == 2.5));
        let pf = pushforward(&[0.3], |acts: &[f64]| acts.iter().map(|a| a * a).collect(), |_| 0.7, 20, &mut rng, "delta");
        assert!(pf.values.iter().all(|&v| v == 0.7 * 0.7));
        let cfg = QuantileConfig::new(0.8, 30).unwrap();
        let v = value_function_quantile(&[0.3], |acts| vec![-1.0; acts.len()], |r| r.uniform(), &cfg, &mut rng).unwrap();
        assert_eq!(v, -1.0);
    }

    #[test]
    fn uniform_pushforward_moments_and_quantile() {
        let mut rng = RngStream::new(2, "quantile");
        let m = 10_000;
        let pf = pushforward(&[0.0], |acts: &[f64]| acts.to_vec(), |r| r.uniform(), m, &mut rng, "uniform");
        let mean = pf.values.iter().sum::<f64>() / m as f64;
        assert!((mean - 0.5).abs() < 4.0 / (12.0 * m as f64).sqrt());
        let cfg = QuantileConfig::new(0.9, 100_000).unwrap();
        let v = value_function_quantile(&[0.0], |acts| acts.to_vec(), |r| r.uniform(), &cfg, &mut rng).unwrap();
        assert!((v - 0.9).abs() < 0.01);
    }

    #[test]
    fn w1_examples() {
        assert_eq!(w1_empirical(&[0.3, 0.1], &[0.1, 0.3]).unwrap(), 0.0);
        assert_eq!(w1_empirical(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(w1_empirical(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert_eq!(w1_empirical::<f64>(&[], &[]), Err(QuantileError::Empty));
        assert_eq!(w1_empirical(&[1.0], &[1.0, 2.0]), Err(QuantileError::LengthMismatch(1, 2)));
    }

    #[test]
    fn resample_preserves_equal_sizes() {
        let xs = [1.0, 2.0, 3.0];
        assert_eq!(resample_sorted(&xs, 3), xs.to_vec());
        assert_eq!(resample_sorted(&[1.0, 2.0], 4), vec![1.0, 1.0, 2.0, 2.0]);
    }

    fn gap_half(values: &[f64]) -> Option<f64> {
        let mut s = values.to_vec();
        s.sort_by(cmp);
        s.dedup();
        s.windows(2).map(|w| w[1] - w[0]).reduce(f64::min).map(|g| g / 2.0)
    }

    proptest! {
        #[test]
        fn quantile_cdf_duality(values in prop::collection::vec(-100.0f64..100.0, 1..40), tau in 0.0f64..0.999) {
            let q = empirical_quantile(&values, &tau).unwrap();
            let delta = gap_half(&values).unwrap_or(1.0);
            prop_assert!(pushforward_cdf(&values, &(q - delta)) <= tau);
            prop_assert!(pushforward_cdf(&values, &q) > tau);
        }

        #[test]
        fn quantile_monotone_in_level(values in prop::collection::vec(-10.0f64..10.0, 1..40), t1 in 0.0f64..0.999, t2 in 0.0f64..0.999) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(empirical_quantile(&values, &lo).unwrap() <= empirical_quantile(&values, &hi).unwrap());
        }

        #[test]
        fn w1_is_a_metric(
            a in prop::collection::vec(-5.0f64..5.0, 8),
            b in prop::collection::vec(-5.0f64..5.0, 8),
            c in prop::collection::vec(-5.0f64..5.0, 8),
        ) {
            let ab = w1_empirical(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, w1_empirical(&b, &a).unwrap());
            prop_assert!(ab <= w1_empirical(&a, &c).unwrap() + w1_empirical(&c, &b).unwrap() + 1e-12);
            prop_assert_eq!(w1_empirical(&a, &a).unwrap(), 0.0);
        }
    }
}
