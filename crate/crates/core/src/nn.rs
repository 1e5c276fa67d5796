//! Dense feed-forward networks with hand-written reverse-mode gradients and Adam.
//!
//! A [`DenseNet`] is a stack of affine layers with ReLU between them and an identity output
//! layer. Gradients are produced layer by layer from a cached forward [`Trace`]; there is no
//! general computation graph. Weight matrix `l` is stored row-major with shape
//! `(layer_sizes[l + 1], layer_sizes[l])`, so a layer computes `W x + b`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<T> {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<T>>,
    biases: Vec<Array1<T>>,
}

/// Activations recorded by [`DenseNet::trace`]: entry 0 is the input batch, entry `l + 1` the
/// post-activation output of layer `l`. The last entry is the network output.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    activations: Vec<Array2<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Array2<T> {
        self.activations.last().expect("trace holds at least the input")
    }

    pub fn input(&self) -> &Array2<T> {
        &self.activations[0]
    }
}

/// Parameter gradients, shape-congruent with the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

/// Result of a single-vector backward pass.
#[derive(Debug, Clone)]
pub struct Backward<T> {
    pub grads: Gradients<T>,
    pub input_grad: Vec<T>,
}

/// Result of a batched backward pass; parameter gradients are summed over the batch.
#[derive(Debug, Clone)]
pub struct BatchBackward<T> {
    pub grads: Gradients<T>,
    pub input_grad: Option<Array2<T>>,
}

impl<T: Scalar> DenseNet<T> {
    /// Glorot-uniform weights, zero biases. Deterministic in `seed`.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                T::of(rng.random_range(-limit..=limit))
            });
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Array2<T>>,
        biases: Vec<Array1<T>>,
    ) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        let layers = layer_sizes.len() - 1;
        check_len("weight matrix count", layers, weights.len())?;
        check_len("bias vector count", layers, biases.len())?;
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            check_len("weight rows", layer_sizes[l + 1], w.nrows())?;
            check_len("weight columns", layer_sizes[l], w.ncols())?;
            check_len("bias length", layer_sizes[l + 1], b.len())?;
        }
        let net = Self {
            layer_sizes,
            weights,
            biases,
        };
        if !net.is_finite() {
            return Err(Error::Numerical("non-finite network parameter".into()));
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<T>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<T>] {
        &self.biases
    }

    /// Mutable views of one layer's parameters. Views cannot change shapes.
    pub fn layer_mut(
        &mut self,
        layer: usize,
    ) -> (ndarray::ArrayViewMut2<'_, T>, ndarray::ArrayViewMut1<'_, T>) {
        (self.weights[layer].view_mut(), self.biases[layer].view_mut())
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            Activation::Identity
        } else {
            Activation::Relu
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("network input", self.input_dim(), x.len())?;
        let mut a = Array1::from(x.to_vec());
        for l in 0..self.num_layers() {
            let act = self.activation(l);
            let mut pre = self.weights[l].dot(&a);
            pre += &self.biases[l];
            pre.mapv_inplace(|v| act.apply(v));
            a = pre;
        }
        Ok(a.to_vec())
    }

    /// Row-wise forward pass over a `(batch, input_dim)` matrix.
    pub fn forward_batch(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        check_len("network input", self.input_dim(), x.ncols())?;
        let mut a = x.to_owned();
        for l in 0..self.num_layers() {
            a = self.layer_forward(l, a.view());
        }
        Ok(a)
    }

    /// Forward pass that keeps every activation for a later [`DenseNet::backward_trace`].
    pub fn trace(&self, x: ArrayView2<'_, T>) -> Result<Trace<T>> {
        check_len("network input", self.input_dim(), x.ncols())?;
        let mut activations = Vec::with_capacity(self.num_layers() + 1);
        activations.push(x.to_owned());
        for l in 0..self.num_layers() {
            let next = self.layer_forward(l, activations[l].view());
            activations.push(next);
        }
        Ok(Trace { activations })
    }

    fn layer_forward(&self, l: usize, a: ArrayView2<'_, T>) -> Array2<T> {
        let act = self.activation(l);
        let mut pre = a.dot(&self.weights[l].t());
        pre += &self.biases[l];
        pre.mapv_inplace(|v| act.apply(v));
        pre
    }

    /// Gradient of `upstream · forward(x)` with respect to every parameter and to `x`.
    pub fn backward(&self, x: &[T], upstream: &[T]) -> Result<Backward<T>> {
        check_len("network input", self.input_dim(), x.len())?;
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        let trace = self.trace(xb)?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("contiguous slice");
        let out = self.backward_trace(&trace, up, true)?;
        let input_grad = out
            .input_grad
            .expect("requested input gradient")
            .row(0)
            .to_vec();
        Ok(Backward {
            grads: out.grads,
            input_grad,
        })
    }

    /// Backpropagates a `(batch, output_dim)` upstream gradient through a recorded trace.
    /// Parameter gradients are summed over rows. The input gradient is only formed when
    /// `want_input_grad` is set, since for wide inputs it costs as much as a forward pass.
    pub fn backward_trace(
        &self,
        trace: &Trace<T>,
        upstream: ArrayView2<'_, T>,
        want_input_grad: bool,
    ) -> Result<BatchBackward<T>> {
        check_len("trace depth", self.num_layers() + 1, trace.activations.len())?;
        let batch = trace.activations[0].nrows();
        check_len("upstream batch", batch, upstream.nrows())?;
        check_len("upstream gradient", self.output_dim(), upstream.ncols())?;

        let layers = self.num_layers();
        let mut gw: Vec<Array2<T>> = Vec::with_capacity(layers);
        let mut gb: Vec<Array1<T>> = Vec::with_capacity(layers);
        let mut delta = upstream.to_owned();
        let mut input_grad = None;
        for l in (0..layers).rev() {
            let a_in = &trace.activations[l];
            gw.push(delta.t().dot(a_in));
            gb.push(delta.sum_axis(Axis(0)));
            if l == 0 {
                if want_input_grad {
                    input_grad = Some(delta.dot(&self.weights[0]));
                }
                break;
            }
            let mut prev = delta.dot(&self.weights[l]);
            // a_in is the ReLU output of layer l-1; positive exactly where the pre-activation was.
            Zip::from(&mut prev).and(a_in).for_each(|d, &a| {
                if a <= T::zero() {
                    *d = T::zero();
                }
            });
            delta = prev;
        }
        gw.reverse();
        gb.reverse();
        Ok(BatchBackward {
            grads: Gradients {
                weights: gw,
                biases: gb,
            },
            input_grad,
        })
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "a network needs at least 2 layer sizes, got {}",
            layer_sizes.len()
        )));
    }
    if let Some(pos) = layer_sizes.iter().position(|&n| n == 0) {
        return Err(Error::InvalidConfig(format!(
            "layer size at position {pos} must be positive"
        )));
    }
    Ok(())
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &DenseNet<T>) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_zero()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_zero()))
    }

    pub fn scale(&mut self, c: T) {
        self.weights.iter_mut().for_each(|w| *w *= c);
        self.biases.iter_mut().for_each(|b| *b *= c);
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
        Ok(())
    }

    /// All gradient entries in parameter order (layer by layer, weights row-major then bias).
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    fn check_congruent(&self, other: &Gradients<T>) -> Result<()> {
        check_len("gradient layer count", self.weights.len(), other.weights.len())?;
        for (a, b) in self.weights.iter().zip(&other.weights) {
            check_len("gradient weight size", a.len(), b.len())?;
        }
        for (a, b) in self.biases.iter().zip(&other.biases) {
            check_len("gradient bias size", a.len(), b.len())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Moment estimates for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VecAdam<T> {
    config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> VecAdam<T> {
    pub fn new(len: usize, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        check_len("Adam parameters", self.m.len(), params.len())?;
        check_len("Adam gradients", self.m.len(), grads.len())?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at entry {i}")));
        }
        self.step += 1;
        let h = Hyper::new(&self.config, self.step);
        adam_update(params, grads, &mut self.m, &mut self.v, &h);
        Ok(())
    }
}

/// Adam state for a whole [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    config: AdamConfig,
    m_w: Vec<Array2<T>>,
    v_w: Vec<Array2<T>>,
    m_b: Vec<Array1<T>>,
    v_b: Vec<Array1<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(net: &DenseNet<T>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros = Gradients::zeros_like(net);
        Ok(Self {
            config,
            m_w: zeros.weights.clone(),
            v_w: zeros.weights,
            m_b: zeros.biases.clone(),
            v_b: zeros.biases,
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn second_moments_nonnegative(&self) -> bool {
        self.v_w.iter().all(|v| v.iter().all(|x| *x >= T::zero()))
            && self.v_b.iter().all(|v| v.iter().all(|x| *x >= T::zero()))
    }

    /// One bias-corrected Adam update. The network is untouched when the gradients are
    /// malformed or non-finite.
    pub fn step(&mut self, net: &mut DenseNet<T>, grads: &Gradients<T>) -> Result<()> {
        Gradients::zeros_like(net).check_congruent(grads)?;
        check_len("Adam state layers", self.m_w.len(), grads.weights.len())?;
        for (m, g) in self.m_w.iter().zip(&grads.weights) {
            check_len("Adam state weight size", m.len(), g.len())?;
        }
        if !grads.is_finite() {
            return Err(Error::Numerical(
                "non-finite gradient entry; aborting update".into(),
            ));
        }
        self.step += 1;
        let h = Hyper::new(&self.config, self.step);
        for l in 0..net.num_layers() {
            adam_update(
                net.weights[l].as_slice_mut().expect("standard layout"),
                grads.weights[l]
                    .as_standard_layout()
                    .as_slice()
                    .expect("standard layout"),
                self.m_w[l].as_slice_mut().expect("standard layout"),
                self.v_w[l].as_slice_mut().expect("standard layout"),
                &h,
            );
            adam_update(
                net.biases[l].as_slice_mut().expect("standard layout"),
                grads.biases[l].as_slice().expect("standard layout"),
                self.m_b[l].as_slice_mut().expect("standard layout"),
                self.v_b[l].as_slice_mut().expect("standard layout"),
                &h,
            );
        }
        Ok(())
    }
}

struct Hyper<T> {
    lr: T,
    beta1: T,
    beta2: T,
    epsilon: T,
    correction1: T,
    correction2: T,
}

impl<T: Scalar> Hyper<T> {
    fn new(c: &AdamConfig, step: u64) -> Self {
        let t = i32::try_from(step).unwrap_or(i32::MAX);
        let beta1 = T::of(c.beta1);
        let beta2 = T::of(c.beta2);
        Self {
            lr: T::of(c.lr),
            beta1,
            beta2,
            epsilon: T::of(c.epsilon),
            correction1: T::one() - beta1.powi(t),
            correction2: T::one() - beta2.powi(t),
        }
    }
}

fn adam_update<T: Scalar>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], h: &Hyper<T>) {
    let one = T::one();
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = h.beta1 * *m + (one - h.beta1) * g;
        *v = h.beta2 * *v + (one - h.beta2) * g * g;
        let m_hat = *m / h.correction1;
        let v_hat = *v / h.correction2;
        *p = *p - h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
    }
}

/// Splits a `(batch, 2n)` matrix view into its first and second halves by column.
pub(crate) fn split_columns<T: Scalar>(m: ArrayView2<'_, T>, n: usize) -> (Array2<T>, Array2<T>) {
    (m.slice(s![.., ..n]).to_owned(), m.slice(s![.., n..]).to_owned())
}

/// Copies rows `idx` of `m` into a new matrix.
pub(crate) fn gather_rows<T: Scalar>(m: ArrayView2<'_, T>, idx: &[usize]) -> Array2<T> {
    m.select(Axis(0), idx)
}
