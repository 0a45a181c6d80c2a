use super::{MlpGrads, MlpParams, NumericsError};
use crate::scalar::Scalar;

/// Adam moment accumulators and hyperparameters for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> OptState<T> {
    /// Fresh state with decays 0.9 / 0.999 and epsilon 1e-8.
    pub fn new(n_params: usize, lr: T) -> Self {
        Self::with_constants(n_params, lr, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_constants(n_params: usize, lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Self {
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn for_params(params: &MlpParams<T>, lr: T) -> Self {
        Self::new(params.as_slice().len(), lr)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update, in place. Non-finite gradients are
    /// rejected before any state changes.
    pub fn step(&mut self, params: &mut MlpParams<T>, grads: &MlpGrads<T>) -> Result<(), NumericsError> {
        let n = params.as_slice().len();
        if grads.as_slice().len() != n || self.m.len() != n {
            return Err(NumericsError::DimMismatch {
                what: "optimizer step",
                expected: self.m.len(),
                got: grads.as_slice().len(),
            });
        }
        if !grads.is_finite() {
            return Err(NumericsError::NonFiniteGradient { step: self.step + 1 });
        }
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, &g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grads.as_slice())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{MlpArch, RngStream};

    fn small() -> MlpParams<f64> {
        let mut rng = RngStream::new(5, "init");
        MlpParams::init(MlpArch::new(2, 3, 1, 1), &mut rng).unwrap()
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = small();
        let before = p.clone();
        let mut opt = OptState::for_params(&p, 1e-3);
        let g = MlpGrads::zeros(p.arch());
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_sign_times_lr() {
        let mut p = small();
        let before = p.clone();
        let lr = 1e-3;
        let mut opt = OptState::for_params(&p, lr);
        let raw: Vec<f64> = (0..p.as_slice().len()).map(|i| (i as f64 - 3.5) * 0.37).collect();
        let g = MlpGrads::from_flat(p.arch(), raw.clone()).unwrap();
        opt.step(&mut p, &g).unwrap();
        for ((a, b), gi) in p.as_slice().iter().zip(before.as_slice()).zip(&raw) {
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((a - b - expected).abs() < 1e-15, "{a} {b} {gi}");
        }
    }

    #[test]
    fn repeated_gradient_does_not_grow_step() {
        let mut p = small();
        let mut opt = OptState::for_params(&p, 1e-2);
        let g = MlpGrads::from_flat(p.arch(), vec![0.5; p.as_slice().len()]).unwrap();
        let p0 = p.as_slice()[0];
        opt.step(&mut p, &g).unwrap();
        let p1 = p.as_slice()[0];
        opt.step(&mut p, &g).unwrap();
        let p2 = p.as_slice()[0];
        assert!((p2 - p1).abs() <= (p1 - p0).abs() + 1e-8);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = small();
        let before = p.clone();
        let mut opt = OptState::for_params(&p, 1e-3);
        let mut raw = vec![0.0; p.as_slice().len()];
        raw[2] = f64::INFINITY;
        let g = MlpGrads::from_flat(p.arch(), raw).unwrap();
        assert!(matches!(opt.step(&mut p, &g), Err(NumericsError::NonFiniteGradient { step: 1 })));
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 0);
    }
}
