//! Named parameter storage, seeded initialization, the Adam optimizer and
//! the small layer building blocks shared by the network modules.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of uniquely named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

/// The tape variables a [`ParamStore`] was bound to for one forward pass.
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    /// Vars in parameter registration order, e.g. the inputs of a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), lookup: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Pushes every parameter onto `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings(self.tensors.iter().map(|t| tape.variable(t.clone())).collect())
    }

    /// Pushes every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Adds the tape gradients of a bound pass into each parameter's grad buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bindings: &Bindings) {
        for (t, &v) in self.tensors.iter_mut().zip(&bindings.0) {
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g),
                None => t.accumulate_grad(&vec![T::zero(); t.numel()]),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast::<U>().with_requires_grad(true)).collect(),
            lookup: self.lookup.clone(),
        }
    }

    /// Replaces parameter values from named tensors. Every parameter must be
    /// present with a matching shape; otherwise nothing is modified.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        let mut by_name: HashMap<&str, &Tensor<T>> = HashMap::new();
        for (n, t) in named {
            by_name.insert(n.as_str(), t);
        }
        let mut missing = Vec::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            match by_name.get(name.as_str()) {
                Some(src) if src.shape() == t.shape() => {}
                Some(src) => missing.push(format!(
                    "{name} (shape {:?}, expected {:?})",
                    src.shape(),
                    t.shape()
                )),
                None => missing.push(name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::IncompleteCheckpoint(missing));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            t.data_mut().copy_from_slice(by_name[name.as_str()].data());
        }
        Ok(())
    }
}

/// Seeded parameter initializer.
#[derive(Debug, Clone)]
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier<T: Element>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    /// Uniform(-a, a).
    pub fn uniform<T: Element>(&mut self, shape: &[usize], a: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.gen_range(-a..a))).collect();
        Tensor::new(shape.to_vec(), data).expect("initializer shape is non-empty")
    }
}

/// Creates zeros; used for biases.
pub fn zeros<T: Element>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Element>(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update from the accumulated grads. A zero learning rate leaves
    /// every parameter bitwise unchanged.
    pub fn step<T: Element>(&mut self, params: &mut ParamStore<T>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for (i, t) in params.tensors.iter_mut().enumerate() {
            let grad: Vec<f64> = match t.grad() {
                Some(g) => g.iter().map(|x| x.as_f64()).collect(),
                None => continue,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, g) in grad.into_iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            }
            if lr == 0.0 {
                continue;
            }
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                *p = T::of(p.as_f64() - update);
            }
        }
    }
}

/// 2-D convolution layer (weights `out x in x k x k`, optional bias).
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = init.xavier(&[c_out, c_in, k, k], c_in * k * k, c_out * k * k);
        let w = store.add(format!("{name}.weight"), w);
        let b = bias.then(|| store.add(format!("{name}.bias"), zeros(&[c_out])));
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let b = self.b.map(|b| p.var(b));
        tape.conv2d(x, p.var(self.w), b, self.stride, self.pad)
    }
}

/// Transposed convolution with kernel size equal to the stride.
#[derive(Debug, Clone, Copy)]
pub struct ConvT {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvT {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let k = stride;
        let w = init.xavier(&[c_in, c_out, k, k], c_in * k * k, c_out * k * k);
        let w = store.add(format!("{name}.weight"), w);
        let b = store.add(format!("{name}.bias"), zeros(&[c_out]));
        Self { w, b, stride }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        tape.conv_transpose2d(x, p.var(self.w), Some(p.var(self.b)), self.stride)
    }
}

/// Affine map on rows: `x[n x in] -> x W^T + b`, `W: out x in`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init.xavier(&[d_out, d_in], d_in, d_out));
        let b = store.add(format!("{name}.bias"), zeros(&[d_out]));
        Self { w, b }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul_nt(x, p.var(self.w))?;
        tape.bias_add(y, p.var(self.b), 1)
    }
}

/// Layer normalization over the last axis of a matrix with learned gain and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()));
        let beta = store.add(format!("{name}.beta"), zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, 1, T::of(Self::EPS))?;
        let g = tape.axis_mul(n, p.var(self.gamma), 1)?;
        tape.bias_add(g, p.var(self.beta), 1)
    }
}

/// Per-channel normalization of a `c x h x w` map over its spatial
/// extent, with learned per-channel gain and shift.
#[derive(Debug, Clone, Copy)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), zeros(&[channels]));
        Self { gamma, beta }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let flat = tape.reshape(x, &[shape[0], shape[1..].iter().product()])?;
        let n = tape.layer_norm(flat, 1, T::of(LayerNorm::EPS))?;
        let g = tape.axis_mul(n, p.var(self.gamma), 0)?;
        let b = tape.bias_add(g, p.var(self.beta), 0)?;
        tape.reshape(b, &shape)
    }
}
