//! Brute-force reference implementations over exact discrete
//! distributions, plus the filtered-versus-behavior W1 diagnostic.

use crate::dataset::Dataset;
use crate::numerics::RngStream;
use crate::operators::{ActionSampler, ActionValue};
use crate::quantile::{empirical_quantile, resample_sorted, w1_empirical};
use crate::scalar::OrderedField;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("distribution has empty support")]
    Empty,
    #[error("negative or non-finite probability {0}")]
    BadProbability(String),
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(String),
    #[error("quantile level {0} outside [0, 1)")]
    BadLevel(String),
    #[error("filtered distribution retains no mass")]
    NoMass,
}

/// Finite distribution on the reals: sorted distinct support with
/// probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDist<T> {
    support: Vec<T>,
    probs: Vec<T>,
}

fn cmp<T: PartialOrd>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

impl<T: OrderedField> DiscreteDist<T> {
    /// Sorts, merges duplicate support points and checks normalization
    /// (exact for exact scalars, within 1e-12 otherwise).
    pub fn new(pairs: Vec<(T, T)>) -> Result<Self, OracleError> {
        if pairs.is_empty() {
            return Err(OracleError::Empty);
        }
        let mut pairs = pairs;
        for (v, p) in &pairs {
            if *p < T::zero() || !p.is_finite_value() || !v.is_finite_value() {
                return Err(OracleError::BadProbability(format!("{p:?} at {v:?}")));
            }
        }
        pairs.sort_by(|a, b| cmp(&a.0, &b.0));
        let mut support: Vec<T> = Vec::with_capacity(pairs.len());
        let mut probs: Vec<T> = Vec::with_capacity(pairs.len());
        for (v, p) in pairs {
            if support.last() == Some(&v) {
                let last = probs.len() - 1;
                probs[last] = probs[last].clone() + p;
            } else {
                support.push(v);
                probs.push(p);
            }
        }
        let total = probs.iter().fold(T::zero(), |acc, p| acc + p.clone());
        if (total.clone() - T::one()).abs().to_f64_lossy() > 1e-12 {
            return Err(OracleError::NotNormalized(format!("{total:?}")));
        }
        Ok(Self { support, probs })
    }

    /// Equal mass on each value (duplicates merge).
    pub fn uniform(values: Vec<T>) -> Result<Self, OracleError> {
        let n = T::from_usize(values.len()).ok_or(OracleError::Empty)?;
        let p = T::one() / n;
        Self::new(values.into_iter().map(|v| (v, p.clone())).collect())
    }

    pub fn point(v: T) -> Self {
        Self {
            support: vec![v],
            probs: vec![T::one()],
        }
    }

    pub fn support(&self) -> &[T] {
        &self.support
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    /// `F(v) = P(X <= v)`.
    pub fn cdf(&self, v: &T) -> T {
        self.support
            .iter()
            .zip(&self.probs)
            .filter(|(x, _)| *x <= v)
            .fold(T::zero(), |acc, (_, p)| acc + p.clone())
    }

    /// CDF values at each support point.
    pub fn cdf_steps(&self) -> Vec<T> {
        let mut acc = T::zero();
        self.probs
            .iter()
            .map(|p| {
                acc = acc.clone() + p.clone();
                acc.clone()
            })
            .collect()
    }
}

fn check_level<T: OrderedField>(tau: &T) -> Result<(), OracleError> {
    if !tau.is_finite_value() || *tau < T::zero() || *tau >= T::one() {
        return Err(OracleError::BadLevel(format!("{tau:?}")));
    }
    Ok(())
}

/// `sup { v : F(v) <= τ }` by a linear scan of the step CDF: the first
/// support point whose CDF exceeds `τ`.
pub fn exact_quantile<T: OrderedField>(d: &DiscreteDist<T>, tau: &T) -> Result<T, OracleError> {
    check_level(tau)?;
    for (v, f) in d.support.iter().zip(d.cdf_steps()) {
        if f > *tau {
            return Ok(v.clone());
        }
    }
    // Floating-point totals just below 1 can leave every step at or below
    // τ; the supremum is then the top of the support.
    Ok(d.support.last().expect("nonempty").clone())
}

/// Restriction of `d` to values `>= V_τ`, renormalized.
pub fn filtered_policy<T: OrderedField>(d: &DiscreteDist<T>, tau: &T) -> Result<DiscreteDist<T>, OracleError> {
    let v = exact_quantile(d, tau)?;
    let kept: Vec<(T, T)> = d
        .support
        .iter()
        .zip(&d.probs)
        .filter(|(x, _)| **x >= v)
        .map(|(x, p)| (x.clone(), p.clone()))
        .collect();
    let mass = kept.iter().fold(T::zero(), |acc, (_, p)| acc + p.clone());
    if mass <= T::zero() {
        return Err(OracleError::NoMass);
    }
    Ok(DiscreteDist {
        support: kept.iter().map(|(x, _)| x.clone()).collect(),
        probs: kept.into_iter().map(|(_, p)| p / mass.clone()).collect(),
    })
}

/// `max_v |F_filtered(v) − max(0, (F(v) − τ) / (1 − τ))|` over the support.
pub fn cdf_affine_deviation<T: OrderedField>(d: &DiscreteDist<T>, tau: &T) -> Result<T, OracleError> {
    let filtered = filtered_policy(d, tau)?;
    let one_minus = T::one() - tau.clone();
    let mut worst = T::zero();
    for (v, f) in d.support.iter().zip(d.cdf_steps()) {
        let affine = (f - tau.clone()) / one_minus.clone();
        let affine = if affine < T::zero() { T::zero() } else { affine };
        let dev = (filtered.cdf(v) - affine).abs();
        if dev > worst {
            worst = dev;
        }
    }
    Ok(worst)
}

/// `∫₀¹ |F₁⁻¹(z) − F₂⁻¹(z)| dz`, integrating the two step quantile functions
/// exactly between their merged breakpoints.
pub fn exact_w1<T: OrderedField>(d1: &DiscreteDist<T>, d2: &DiscreteDist<T>) -> T {
    let c1 = d1.cdf_steps();
    let c2 = d2.cdf_steps();
    let (mut i, mut j) = (0, 0);
    let mut z = T::zero();
    let mut total = T::zero();
    while i < c1.len() && j < c2.len() {
        // The current segment ends at the nearer breakpoint.
        let end = if c1[i] <= c2[j] { c1[i].clone() } else { c2[j].clone() };
        let width = end.clone() - z.clone();
        if width > T::zero() {
            total = total + width * (d1.support[i].clone() - d2.support[j].clone()).abs();
        }
        z = end;
        if c1[i] <= z {
            i += 1;
        }
        if c2[j] <= z {
            j += 1;
        }
    }
    total
}

/// Per-state W1 between the filtered and the unfiltered behavior
/// pushforward, averaged over states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub tau: f64,
    pub samples: usize,
    pub n_states: usize,
    pub w1_term: f64,
    pub w1_std_err: f64,
    pub keep_rate: f64,
    pub target_keep_rate: f64,
}

/// W1 between the `≥ V_τ` restriction of one sorted sample and the sample
/// itself, after resampling the restriction to the sample's size.
pub fn filtered_w1_sampled(sorted: &[f64], tau: f64) -> f64 {
    let v = empirical_quantile(sorted, &tau).expect("nonempty finite sample and valid level");
    let kept: Vec<f64> = sorted.iter().copied().filter(|&x| x >= v).collect();
    let resampled = resample_sorted(&kept, sorted.len());
    w1_empirical(&resampled, sorted).expect("equal lengths")
}

/// Monte Carlo estimate over the dataset's states: `M` behavior samples
/// per state give both pushforwards. The keep rate uses the strict
/// comparison at each row's own action.
pub fn prop1_diagnostics(
    ds: &Dataset,
    q: &impl ActionValue,
    behavior: &impl ActionSampler,
    tau: f64,
    m: usize,
    rng: &mut RngStream,
) -> Result<DiagnosticsReport, OracleError> {
    let rows: Vec<usize> = (0..ds.len()).collect();
    prop1_diagnostics_rows(ds, &rows, q, behavior, tau, m, rng)
}

/// [`prop1_diagnostics`] restricted to the given dataset rows.
pub fn prop1_diagnostics_rows(
    ds: &Dataset,
    rows: &[usize],
    q: &impl ActionValue,
    behavior: &impl ActionSampler,
    tau: f64,
    m: usize,
    rng: &mut RngStream,
) -> Result<DiagnosticsReport, OracleError> {
    check_level(&tau)?;
    if rows.is_empty() || m == 0 {
        return Err(OracleError::Empty);
    }
    let mut w1 = Vec::with_capacity(rows.len());
    let mut kept = 0usize;
    for t in rows.iter().map(|&i| ds.get(i)) {
        let actions = behavior.sample_actions(&t.s, m, rng);
        let mut values = q.values(&t.s, &actions);
        values.sort_by(f64::total_cmp);
        w1.push(filtered_w1_sampled(&values, tau));
        let v = empirical_quantile(&values, &tau).expect("valid sample");
        if q.values(&t.s, &[t.a])[0] > v {
            kept += 1;
        }
    }
    let n = w1.len() as f64;
    let mean = w1.iter().sum::<f64>() / n;
    let var = if w1.len() > 1 {
        w1.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(DiagnosticsReport {
        tau,
        samples: m,
        n_states: w1.len(),
        w1_term: mean,
        w1_std_err: (var / n).sqrt(),
        keep_rate: kept as f64 / n,
        target_keep_rate: 1.0 - tau,
    })
}

/// Exact counterpart over explicit per-state pushforwards: mean of
/// `exact_w1(filtered_policy(d), d)`.
pub fn prop1_exact<T: OrderedField>(dists: &[DiscreteDist<T>], tau: &T) -> Result<T, OracleError> {
    if dists.is_empty() {
        return Err(OracleError::Empty);
    }
    let mut total = T::zero();
    for d in dists {
        total = total + exact_w1(&filtered_policy(d, tau)?, d);
    }
    Ok(total / T::from_usize(dists.len()).ok_or(OracleError::Empty)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::bandit_generate;
    use crate::operators::{QFn, SamplerFn};
    use crate::scalar::rational;
    use num_rational::BigRational;
    use proptest::prelude::*;

    fn r(n: i64, d: i64) -> BigRational {
        rational(n, d)
    }

    fn uniform_ints(xs: &[i64]) -> DiscreteDist<BigRational> {
        DiscreteDist::uniform(xs.iter().map(|&x| r(x, 1)).collect()).unwrap()
    }

    #[test]
    fn construction_rules() {
        let d = DiscreteDist::new(vec![(2.0, 0.25), (1.0, 0.5), (2.0, 0.25)]).unwrap();
        assert_eq!(d.support(), &[1.0, 2.0]);
        assert_eq!(d.probs(), &[0.5, 0.5]);
        assert_eq!(DiscreteDist::<f64>::new(vec![]), Err(OracleError::Empty));
        assert!(matches!(DiscreteDist::new(vec![(1.0, 0.5)]), Err(OracleError::NotNormalized(_))));
        assert!(matches!(DiscreteDist::new(vec![(1.0, -0.5), (2.0, 1.5)]), Err(OracleError::BadProbability(_))));
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(exact_quantile(&uniform_ints(&[1, 2, 3, 4]), &r(1, 2)).unwrap(), r(3, 1));
        for tau in [r(0, 1), r(1, 2), r(99, 100)] {
            assert_eq!(exact_quantile(&DiscreteDist::point(r(7, 1)), &tau).unwrap(), r(7, 1));
        }
        let d = DiscreteDist::new(vec![(r(0, 1), r(9, 10)), (r(1, 1), r(1, 10))]).unwrap();
        assert_eq!(exact_quantile(&d, &r(1, 2)).unwrap(), r(0, 1));
        assert!(matches!(exact_quantile(&d, &r(1, 1)), Err(OracleError::BadLevel(_))));
    }

    #[test]
    fn filtered_policy_examples() {
        let f = filtered_policy(&uniform_ints(&[1, 2, 3, 4]), &r(1, 2)).unwrap();
        assert_eq!(f, uniform_ints(&[3, 4]));
        let d = uniform_ints(&[1, 2, 3, 4]);
        assert_eq!(filtered_policy(&d, &r(0, 1)).unwrap(), d);
        assert_eq!(filtered_policy(&uniform_ints(&[1, 2]), &r(1, 2)).unwrap(), DiscreteDist::point(r(2, 1)));
    }

    #[test]
    fn affine_deviation_examples() {
        let d = uniform_ints(&[1, 2, 3, 4]);
        assert_eq!(cdf_affine_deviation(&d, &r(1, 2)).unwrap(), r(0, 1));
        assert_eq!(cdf_affine_deviation(&d, &r(0, 1)).unwrap(), r(0, 1));
        // Off the CDF grid the relation is only approximate.
        assert!(cdf_affine_deviation(&d, &r(3, 5)).unwrap() > r(0, 1));
    }

    #[test]
    fn w1_examples() {
        let d = uniform_ints(&[1, 2, 3, 4]);
        assert_eq!(exact_w1(&d, &d), r(0, 1));
        assert_eq!(exact_w1(&DiscreteDist::point(r(0, 1)), &DiscreteDist::point(r(1, 1))), r(1, 1));
        // Quantile functions (1,2,3,4) and (3,3,4,4) on quarters.
        assert_eq!(exact_w1(&d, &filtered_policy(&d, &r(1, 2)).unwrap()), r(1, 1));
        let a = DiscreteDist::new(vec![(r(0, 1), r(1, 3)), (r(1, 1), r(2, 3))]).unwrap();
        let b = DiscreteDist::new(vec![(r(0, 1), r(1, 2)), (r(2, 1), r(1, 2))]).unwrap();
        // z in (1/3, 1/2]: |1 - 0|; z in (1/2, 1]: |1 - 2|.
        assert_eq!(exact_w1(&a, &b), r(1, 6) + r(1, 2));
    }

    #[test]
    fn sampled_diagnostic_examples() {
        let mut rng = RngStream::new(1, "diag");
        let ds = bandit_generate(300, &mut rng).unwrap();
        let uniform = SamplerFn(|_: &[f64], r: &mut RngStream| r.uniform());
        let constant = prop1_diagnostics(&ds, &QFn(|_: &[f64], _| 1.0), &uniform, 0.5, 100, &mut rng).unwrap();
        assert_eq!(constant.w1_term, 0.0);
        let no_filter = prop1_diagnostics(&ds, &QFn(|_: &[f64], a| a), &uniform, 0.0, 100, &mut rng).unwrap();
        assert_eq!(no_filter.w1_term, 0.0);
        let half = prop1_diagnostics(&ds, &QFn(|_: &[f64], a| a), &uniform, 0.5, 100, &mut rng).unwrap();
        assert!((half.w1_term - 0.25).abs() < 0.02, "{}", half.w1_term);
        assert!(half.w1_term.is_finite() && half.keep_rate.is_finite());
        assert_eq!(half.target_keep_rate, 0.5);
    }

    #[test]
    fn exact_diagnostic_matches_closed_form_on_a_grid() {
        // Uniform on k/n approaches uniform[0, 1]; the filtered W1 at τ = 1/2
        // tends to 1/4.
        let n = 1000;
        let d = DiscreteDist::uniform((0..n).map(|k| r(k, n)).collect()).unwrap();
        let w = prop1_exact(&[d], &r(1, 2)).unwrap();
        assert!((w.to_f64_lossy() - 0.25).abs() < 1e-3);
    }

    fn tie_free() -> impl Strategy<Value = DiscreteDist<BigRational>> {
        (prop::collection::btree_set(-50i64..50, 1..12), prop::collection::vec(1i64..6, 12)).prop_map(|(vals, ws)| {
            let total: i64 = ws.iter().take(vals.len()).sum();
            DiscreteDist::new(vals.into_iter().zip(ws).map(|(v, w)| (r(v, 1), r(w, total))).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn exact_diagnostic_is_monotone_and_nonnegative(d in tie_free(), a in 0i64..100, b in 0i64..100) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let wl = prop1_exact(std::slice::from_ref(&d), &r(lo, 100)).unwrap();
            let wh = prop1_exact(std::slice::from_ref(&d), &r(hi, 100)).unwrap();
            prop_assert!(wl >= r(0, 1));
            prop_assert!(wl <= wh);
        }

        #[test]
        fn sampled_filtered_w1_is_monotone(values in prop::collection::vec(-10.0f64..10.0, 1..60), a in 0.0f64..0.99, b in 0.0f64..0.99) {
            let mut sorted = values;
            sorted.sort_by(f64::total_cmp);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let wl = filtered_w1_sampled(&sorted, lo);
            prop_assert!(wl >= 0.0);
            prop_assert!(wl <= filtered_w1_sampled(&sorted, hi) + 1e-12);
        }

        #[test]
        fn filtered_policy_is_normalized(d in tie_free(), t in 0i64..100) {
            let f = filtered_policy(&d, &r(t, 100)).unwrap();
            let total = f.probs().iter().fold(r(0, 1), |acc, p| acc + p);
            prop_assert_eq!(total, r(1, 1));
        }
    }
}
