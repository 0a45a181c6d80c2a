//! Fixed-architecture ReLU multilayer perceptron with hand-written
//! reverse-mode gradients.
//!
//! Parameters live in one flat buffer. Layer `l` occupies a weight block of
//! shape `[in_l, out_l]` (row-major, so `w[i * out_l + j]` connects input `i`
//! to output `j`) followed by its `out_l` biases.

use super::{Batch, NumericsError};
use crate::scalar::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Layer sizes of an MLP: `depth` hidden layers of `width` units each.
///
/// `depth == 0` is a single affine map from input to output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpArch {
    pub input: usize,
    pub width: usize,
    pub depth: usize,
    pub output: usize,
}

impl MlpArch {
    pub fn new(input: usize, width: usize, depth: usize, output: usize) -> Self {
        Self {
            input,
            width,
            depth,
            output,
        }
    }

    /// Sizes of every layer boundary, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.depth + 2);
        dims.push(self.input);
        dims.extend(std::iter::repeat_n(self.width, self.depth));
        dims.push(self.output);
        dims
    }

    pub fn n_layers(&self) -> usize {
        self.depth + 1
    }

    pub fn n_params(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn validate(&self) -> Result<(), NumericsError> {
        if self.input == 0 || self.output == 0 || (self.depth > 0 && self.width == 0) {
            return Err(NumericsError::BadArchitecture(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerSpan {
    offset: usize,
    fan_in: usize,
    fan_out: usize,
}

impl LayerSpan {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }
    fn biases(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

fn spans(arch: &MlpArch) -> Vec<LayerSpan> {
    let mut offset = 0;
    arch.dims()
        .windows(2)
        .map(|w| {
            let span = LayerSpan {
                offset,
                fan_in: w[0],
                fan_out: w[1],
            };
            offset += w[0] * w[1] + w[1];
            span
        })
        .collect()
}

/// Weights and biases of an MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    arch: MlpArch,
    spans: Vec<LayerSpan>,
    data: Vec<T>,
}

/// Gradient of a scalar loss with respect to every entry of an [`MlpParams`],
/// laid out identically.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads<T> {
    arch: MlpArch,
    data: Vec<T>,
}

impl<T: Scalar> MlpGrads<T> {
    pub fn zeros(arch: MlpArch) -> Self {
        Self {
            arch,
            data: vec![T::zero(); arch.n_params()],
        }
    }

    pub fn from_flat(arch: MlpArch, data: Vec<T>) -> Result<Self, NumericsError> {
        if data.len() != arch.n_params() {
            return Err(NumericsError::DimMismatch {
                what: "gradient buffer",
                expected: arch.n_params(),
                got: data.len(),
            });
        }
        Ok(Self { arch, data })
    }

    pub fn arch(&self) -> MlpArch {
        self.arch
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, factor: T) {
        self.data.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.arch, other.arch);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Activations recorded by a forward pass, consumed by [`MlpParams::backward`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    /// `acts[0]` is the input batch; `acts[l + 1]` is the output of layer `l`
    /// (post-ReLU for hidden layers).
    acts: Vec<Batch<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn output(&self) -> &Batch<T> {
        self.acts.last().expect("tape holds at least the input")
    }
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl<T: Scalar> MlpParams<T> {
    /// All-zero parameters.
    pub fn zeros(arch: MlpArch) -> Result<Self, NumericsError> {
        arch.validate()?;
        Ok(Self {
            spans: spans(&arch),
            data: vec![T::zero(); arch.n_params()],
            arch,
        })
    }

    /// He-style uniform fan-in initialization: weights drawn from
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, biases zero.
    pub fn init<R: Rng + ?Sized>(arch: MlpArch, rng: &mut R) -> Result<Self, NumericsError> {
        let mut params = Self::zeros(arch)?;
        for span in params.spans.clone() {
            let bound = (6.0 / span.fan_in as f64).sqrt();
            for w in &mut params.data[span.weights()] {
                *w = T::lit(rng.gen_range(-bound..bound));
            }
        }
        Ok(params)
    }

    /// Wraps a flat parameter buffer in the documented layout.
    pub fn from_flat(arch: MlpArch, data: Vec<T>) -> Result<Self, NumericsError> {
        arch.validate()?;
        if data.len() != arch.n_params() {
            return Err(NumericsError::DimMismatch {
                what: "parameter buffer",
                expected: arch.n_params(),
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFiniteParams);
        }
        Ok(Self {
            spans: spans(&arch),
            data,
            arch,
        })
    }

    pub fn arch(&self) -> MlpArch {
        self.arch
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Mutable view of layer `l` as `(weights [in, out], biases [out])`.
    pub fn layer_mut(&mut self, l: usize) -> (&mut [T], &mut [T]) {
        let span = self.spans[l];
        let (head, tail) = self.data.split_at_mut(span.biases().start);
        (&mut head[span.weights()], &mut tail[..span.fan_out])
    }

    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        let span = self.spans[l];
        (&self.data[span.weights()], &self.data[span.biases()])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Single-input forward pass.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>, NumericsError> {
        let batch = Batch::from_rows(1, x.len(), x.to_vec())?;
        Ok(self.forward_batch(&batch)?.into_data())
    }

    /// Forward pass over a batch without recording activations.
    pub fn forward_batch(&self, x: &Batch<T>) -> Result<Batch<T>, NumericsError> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for l in 0..self.arch.n_layers() {
            cur = self.apply_layer(l, &cur);
        }
        Ok(cur)
    }

    /// Forward pass recording the activations needed for [`Self::backward`].
    pub fn forward_tape(&self, x: &Batch<T>) -> Result<Tape<T>, NumericsError> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.arch.n_layers() + 1);
        acts.push(x.clone());
        for l in 0..self.arch.n_layers() {
            let next = self.apply_layer(l, acts.last().expect("nonempty"));
            acts.push(next);
        }
        Ok(Tape { acts })
    }

    fn check_input(&self, x: &Batch<T>) -> Result<(), NumericsError> {
        if x.cols() != self.arch.input {
            return Err(NumericsError::DimMismatch {
                what: "network input",
                expected: self.arch.input,
                got: x.cols(),
            });
        }
        Ok(())
    }

    fn apply_layer(&self, l: usize, x: &Batch<T>) -> Batch<T> {
        let span = self.spans[l];
        let hidden = l + 1 < self.arch.n_layers();
        let (w, b) = self.layer(l);
        let mut out = Batch::zeros(x.rows(), span.fan_out);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let yr = out.row_mut(r);
            yr.copy_from_slice(b);
            for (i, &xi) in xr.iter().enumerate() {
                if xi != T::zero() {
                    axpy(xi, &w[i * span.fan_out..(i + 1) * span.fan_out], yr);
                }
            }
            if hidden {
                yr.iter_mut().for_each(|y| *y = y.max(T::zero()));
            }
        }
        out
    }

    /// Reverse-mode pass. `grad_out` holds `dL/d output` for every row of the
    /// taped batch; the returned gradient is summed over rows.
    pub fn backward(&self, tape: &Tape<T>, grad_out: &Batch<T>) -> Result<MlpGrads<T>, NumericsError> {
        let out = tape.output();
        if grad_out.rows() != out.rows() || grad_out.cols() != out.cols() {
            return Err(NumericsError::DimMismatch {
                what: "output gradient",
                expected: out.rows() * out.cols(),
                got: grad_out.rows() * grad_out.cols(),
            });
        }
        let mut grads = MlpGrads::zeros(self.arch);
        let mut delta = grad_out.clone();
        for l in (0..self.arch.n_layers()).rev() {
            let span = self.spans[l];
            let input = &tape.acts[l];
            let (w, _) = self.layer(l);
            {
                let g = &mut grads.data;
                let (gw, gb) = g[span.offset..span.offset + span.fan_in * span.fan_out + span.fan_out]
                    .split_at_mut(span.fan_in * span.fan_out);
                for r in 0..delta.rows() {
                    let dr = delta.row(r);
                    axpy(T::one(), dr, gb);
                    for (i, &xi) in input.row(r).iter().enumerate() {
                        if xi != T::zero() {
                            axpy(xi, dr, &mut gw[i * span.fan_out..(i + 1) * span.fan_out]);
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            // Propagate through the weights, then through the ReLU of layer l-1.
            let mut prev = Batch::zeros(delta.rows(), span.fan_in);
            for r in 0..delta.rows() {
                let dr = delta.row(r);
                let act = input.row(r);
                let pr = prev.row_mut(r);
                for i in 0..span.fan_in {
                    if act[i] > T::zero() {
                        pr[i] = dot(&w[i * span.fan_out..(i + 1) * span.fan_out], dr);
                    }
                }
            }
            delta = prev;
        }
        Ok(grads)
    }

    /// Moves every parameter a fraction `rate` of the way toward `online`.
    pub fn ema_toward(&mut self, online: &Self, rate: T) {
        debug_assert_eq!(self.arch, online.arch);
        for (t, &o) in self.data.iter_mut().zip(&online.data) {
            *t += rate * (o - *t);
        }
    }
}

/// Exact gradient of `loss(forward(x))` with respect to the parameters.
///
/// `loss` returns the scalar loss and its gradient with respect to the
/// network output.
pub fn mlp_grad<T, F>(params: &MlpParams<T>, x: &[T], loss: F) -> Result<(T, MlpGrads<T>), NumericsError>
where
    T: Scalar,
    F: FnOnce(&[T]) -> (T, Vec<T>),
{
    let batch = Batch::from_rows(1, x.len(), x.to_vec())?;
    let tape = params.forward_tape(&batch)?;
    let (value, dout) = loss(tape.output().row(0));
    if !value.is_finite() {
        return Err(NumericsError::NonFiniteLoss { batch: 0 });
    }
    let grad_out = Batch::from_rows(1, dout.len(), dout)?;
    let grads = params.backward(&tape, &grad_out)?;
    Ok((value, grads))
}
