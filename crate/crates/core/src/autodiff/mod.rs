//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes only reference earlier nodes, so tape
//! order is a topological order and [`Tape::backward`] is a single reverse
//! sweep that visits each node once.
//!
//! Gradients accumulate: calling `backward` twice without [`Tape::zero_grad`]
//! adds the second set of gradients onto the first.

mod kernels;
pub mod check;

use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm_rm, Element, Tensor};

pub(crate) use kernels::{col2im_add, im2col, split_axis, ConvGeom};
use kernels::add_into;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let (k, c) = (T::of(GELU_K), T::of(GELU_C));
                let half = T::of(0.5);
                half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the input `x` and the already computed output `y`.
    fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let (k, c) = (T::of(GELU_K), T::of(GELU_C));
                let half = T::of(0.5);
                let t = (k * (x + c * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    BiasAdd {
        x: Var,
        bias: Var,
        axis: usize,
    },
    AxisMul {
        x: Var,
        v: Var,
        axis: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
        cols: Vec<T>,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        out_geom: ConvGeom,
        in_ch: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Act(Var, Activation),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        axis: usize,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Bce {
        logit: Var,
        label: T,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of a forward computation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it participates in differentiation iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!(
                "{what}: shapes {} and {} differ",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Offset(x), &[x])
    }

    /// Adds a vector along `axis` (its length must equal that dimension).
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias).iter().product::<usize>() != shape[axis] {
            return Err(Error::dim(format!(
                "bias_add: bias {} does not match axis {axis} of {}",
                shape_str(self.shape(bias)),
                shape_str(&shape)
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut value = self.value(x).to_vec();
        let b = self.value(bias);
        for o in 0..outer {
            for (l, &bv) in b.iter().enumerate().take(len) {
                let base = (o * len + l) * inner;
                value[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        Ok(self.push(shape, value, Op::BiasAdd { x, bias, axis }, &[x, bias]))
    }

    /// Multiplies by a vector along `axis` (its length must equal that dimension).
    pub fn axis_mul(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(v).iter().product::<usize>() != shape[axis] {
            return Err(Error::dim(format!(
                "axis_mul: vector {} does not match axis {axis} of {}",
                shape_str(self.shape(v)),
                shape_str(&shape)
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut value = self.value(x).to_vec();
        let s = self.value(v);
        for o in 0..outer {
            for (l, &sv) in s.iter().enumerate().take(len) {
                let base = (o * len + l) * inner;
                value[base..base + inner].iter_mut().for_each(|e| *e *= sv);
            }
        }
        Ok(self.push(shape, value, Op::AxisMul { x, v, axis }, &[x, v]))
    }

    /// `a[m x n] * b[n x p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m x n] * b[p x n]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let inner_b = if trans_b { sb.get(1) } else { sb.first() };
        if sa.len() != 2 || sb.len() != 2 || Some(&sa[1]) != inner_b {
            return Err(Error::dim(format!(
                "matmul: cannot multiply {} by {}{}",
                shape_str(&sa),
                shape_str(&sb),
                if trans_b { "^T" } else { "" }
            )));
        }
        let (m, n) = (sa[0], sa[1]);
        let p = if trans_b { sb[0] } else { sb[1] };
        let mut value = vec![T::zero(); m * p];
        gemm_rm(m, n, p, self.value(a), false, self.value(b), trans_b, T::zero(), &mut value);
        Ok(self.push(vec![m, p], value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose needs a matrix, got {}", shape_str(&s))));
        }
        let (r, c) = (s[0], s[1]);
        let index: Vec<usize> = (0..r * c).map(|k| (k % r) * c + k / r).collect();
        self.gather(x, index.into(), &[c, r])
    }

    /// Cross-correlation of `x[c_in x h x w]` with `w[c_out x c_in x k x k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::dim(format!(
                "conv2d: input {} incompatible with kernel {}",
                shape_str(&sx),
                shape_str(&sw)
            )));
        }
        let k = sw[2];
        if k > sx[1] + 2 * pad || k > sx[2] + 2 * pad {
            return Err(Error::dim(format!(
                "conv2d: kernel {k}x{k} larger than padded input {} (pad {pad})",
                shape_str(&sx)
            )));
        }
        let out_ch = sw[0];
        if let Some(b) = b {
            if self.shape(b).iter().product::<usize>() != out_ch {
                return Err(Error::dim(format!(
                    "conv2d: bias {} for {out_ch} output channels",
                    shape_str(self.shape(b))
                )));
            }
        }
        let geom = ConvGeom {
            channels: sx[0],
            height: sx[1],
            width: sx[2],
            kernel: k,
            stride,
            pad,
        };
        let cols = im2col(self.value(x), geom);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut value = vec![T::zero(); out_ch * ncols];
        gemm_rm(out_ch, rows, ncols, self.value(w), false, &cols, false, T::zero(), &mut value);
        if let Some(b) = b {
            let bias = self.value(b);
            for (o, chunk) in value.chunks_mut(ncols).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        let shape = vec![out_ch, geom.out_h(), geom.out_w()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            shape,
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch,
                cols,
            },
            &inputs,
        ))
    }

    /// Transposed convolution of `x[c_in x h x w]` with `w[c_in x c_out x k x k]`,
    /// no padding: output is `c_out x ((h-1)*stride + k) x ((w-1)*stride + k)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::dim(format!(
                "conv_transpose2d: input {} incompatible with kernel {}",
                shape_str(&sx),
                shape_str(&sw)
            )));
        }
        let (in_ch, out_ch, k) = (sw[0], sw[1], sw[2]);
        if let Some(b) = b {
            if self.shape(b).iter().product::<usize>() != out_ch {
                return Err(Error::dim(format!(
                    "conv_transpose2d: bias {} for {out_ch} output channels",
                    shape_str(self.shape(b))
                )));
            }
        }
        let out_geom = ConvGeom {
            channels: out_ch,
            height: (sx[1] - 1) * stride + k,
            width: (sx[2] - 1) * stride + k,
            kernel: k,
            stride,
            pad: 0,
        };
        let hw = sx[1] * sx[2];
        let rows = out_geom.col_rows();
        let mut cols = vec![T::zero(); rows * hw];
        gemm_rm(rows, in_ch, hw, self.value(w), true, self.value(x), false, T::zero(), &mut cols);
        let plane = out_geom.height * out_geom.width;
        let mut value = vec![T::zero(); out_ch * plane];
        col2im_add(&cols, out_geom, &mut value);
        if let Some(b) = b {
            let bias = self.value(b);
            for (o, chunk) in value.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        let shape = vec![out_ch, out_geom.height, out_geom.width];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            shape,
            value,
            Op::ConvT2d {
                x,
                w,
                b,
                out_geom,
                in_ch,
            },
            &inputs,
        ))
    }

    /// 2x2 max pooling with stride 2 over `c x h x w` (h, w even).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::dim(format!("max_pool2 needs c x even x even, got {}", shape_str(&s))));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x);
        let mut value = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = (ch * h + 2 * i) * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    value.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Act(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    fn check_axis(&self, x: Var, axis: usize, what: &str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::dim(format!(
                "{what}: axis {axis} out of range for {}",
                shape_str(self.shape(x))
            )));
        }
        Ok(())
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    value[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    value[at(l)] = value[at(l)] / total;
                }
            }
        }
        Ok(self.push(shape, value, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes each slice along `axis` to zero mean and unit variance.
    /// No affine part; compose with [`Tape::mul`] / [`Tape::bias_add`].
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        self.check_axis(x, axis, "layer_norm")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = vec![T::zero(); src.len()];
        let mut rstd = Vec::with_capacity(outer * inner);
        let n = T::of(len as f64);
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| src[at(l)]).sum::<T>() / n;
                let var = (0..len).map(|l| (src[at(l)] - mean).powi(2)).sum::<T>() / n;
                let r = T::one() / (var + eps).sqrt();
                for l in 0..len {
                    value[at(l)] = (src[at(l)] - mean) * r;
                }
                rstd.push(r);
            }
        }
        Ok(self.push(shape, value, Op::LayerNorm { x, axis, rstd }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![total], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let total = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(vec![1], vec![total], Op::Mean(x), &[x])
    }

    /// Sums out `axis` (the dimension is removed).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum_axis")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                add_into(&mut value[o * inner..(o + 1) * inner], row);
            }
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, &s)| s)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push(out_shape, value, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "reshape: cannot view {} as {}",
                shape_str(self.shape(x)),
                shape_str(shape)
            )));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), &[x]))
    }

    /// `out[k] = x[index[k]]` (flat indices), reshaped to `shape`.
    /// The backward pass scatter-adds, so repeated indices are fine.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let n = self.value(x).len();
        if numel != index.len() {
            return Err(Error::dim(format!(
                "gather: {} indices for output {}",
                index.len(),
                shape_str(shape)
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!("gather: index {bad} out of range for {n} values")));
        }
        let src = self.value(x);
        let value = index.iter().map(|&i| src[i]).collect();
        Ok(self.push(shape.to_vec(), value, Op::Gather { x, index }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        self.check_axis(*first, axis, "concat")?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: {} vs {}",
                    shape_str(&base),
                    shape_str(s)
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut value = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                value.extend_from_slice(&self.value(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let src_shape = self.shape(x).to_vec();
        if len == 0 || start + len > src_shape[axis] {
            return Err(Error::dim(format!(
                "slice {start}..{} out of range for axis {axis} of {}",
                start + len,
                shape_str(&src_shape)
            )));
        }
        let (outer, full, inner) = split_axis(&src_shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            value.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        Ok(self.push(shape, value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Mean of squared differences.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse_loss")?;
        let (p, t) = (self.value(pred), self.value(target));
        let total: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let v = total / T::of(p.len() as f64);
        Ok(self.push(vec![1], vec![v], Op::Mse { pred, target }, &[pred, target]))
    }

    /// Binary cross-entropy on a scalar logit, in the stable
    /// `max(z,0) - z*y + ln(1 + e^-|z|)` form.
    pub fn bce_with_logits(&mut self, logit: Var, label: T) -> Result<Var> {
        if self.value(logit).len() != 1 {
            return Err(Error::dim(format!(
                "bce_with_logits: logit must be scalar, got {}",
                shape_str(self.shape(logit))
            )));
        }
        if label != T::zero() && label != T::one() {
            return Err(Error::Contract(format!("bce label must be 0 or 1, got {label:?}")));
        }
        let z = self.value(logit)[0];
        let v = z.max(T::zero()) - z * label + (T::one() + (-z.abs()).exp()).ln();
        Ok(self.push(vec![1], vec![v], Op::Bce { logit, label }, &[logit]))
    }

    /// Reverse sweep from a scalar `loss`; adds into every reachable
    /// `requires_grad` node's gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(&self.nodes[loss.0].shape)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Contract(
                "loss does not depend on any requires_grad tensor".into(),
            ));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(buf) => add_into(buf, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(d) = adjoint(nodes, adj, *a) {
                    add_into(d, g);
                }
                if let Some(d) = adjoint(nodes, adj, *b) {
                    add_into(d, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = adjoint(nodes, adj, *a) {
                    add_into(d, g);
                }
                if let Some(d) = adjoint(nodes, adj, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(d) = adjoint(nodes, adj, *a) {
                    d.iter_mut().zip(g).zip(vb).for_each(|((d, &g), &y)| *d += g * y);
                }
                if let Some(d) = adjoint(nodes, adj, *b) {
                    d.iter_mut().zip(g).zip(va).for_each(|((d, &g), &x)| *d += g * x);
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = adjoint(nodes, adj, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s);
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if let Some(d) = adjoint(nodes, adj, *x) {
                    add_into(d, g);
                }
            }
            Op::BiasAdd { x, bias, axis } => {
                if let Some(d) = adjoint(nodes, adj, *x) {
                    add_into(d, g);
                }
                if let Some(d) = adjoint(nodes, adj, *bias) {
                    let (outer, len, inner) = split_axis(&node.shape, *axis);
                    for o in 0..outer {
                        for (l, db) in d.iter_mut().enumerate().take(len) {
                            let base = (o * len + l) * inner;
                            *db += g[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::AxisMul { x, v, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let (xv, sv) = (&nodes[x.0].value, &nodes[v.0].value);
                if let Some(d) = adjoint(nodes, adj, *x) {
                    for o in 0..outer {
                        for (l, &s) in sv.iter().enumerate().take(len) {
                            let base = (o * len + l) * inner;
                            for k in base..base + inner {
                                d[k] += g[k] * s;
                            }
                        }
                    }
                }
                if let Some(d) = adjoint(nodes, adj, *v) {
                    for o in 0..outer {
                        for (l, dv) in d.iter_mut().enumerate().take(len) {
                            let base = (o * len + l) * inner;
                            *dv += (base..base + inner).map(|k| g[k] * xv[k]).sum::<T>();
                        }
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let sa = &nodes[a.0].shape;
                let (m, n) = (sa[0], sa[1]);
                let p = node.shape[1];
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(d) = adjoint(nodes, adj, *a) {
                    // da = g * b^T  (or g * b when b was used transposed)
                    gemm_rm(m, p, n, g, false, vb, !*trans_b, T::one(), d);
                }
                if let Some(d) = adjoint(nodes, adj, *b) {
                    if *trans_b {
                        // db[p x n] = g^T * a
                        gemm_rm(p, m, n, g, true, va, false, T::one(), d);
                    } else {
                        // db[n x p] = a^T * g
                        gemm_rm(n, m, p, va, true, g, false, T::one(), d);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch,
                cols,
            } => {
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                if let Some(d) = adjoint(nodes, adj, *w) {
                    gemm_rm(*out_ch, ncols, rows, g, false, cols, true, T::one(), d);
                }
                if let Some(bv) = b {
                    if let Some(d) = adjoint(nodes, adj, *bv) {
                        for (o, chunk) in g.chunks(ncols).enumerate() {
                            d[o] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
                if nodes[x.0].requires_grad {
                    let mut dcols = vec![T::zero(); rows * ncols];
                    gemm_rm(rows, *out_ch, ncols, &nodes[w.0].value, true, g, false, T::zero(), &mut dcols);
                    if let Some(d) = adjoint(nodes, adj, *x) {
                        col2im_add(&dcols, *geom, d);
                    }
                }
            }
            Op::ConvT2d {
                x,
                w,
                b,
                out_geom,
                in_ch,
            } => {
                let dcols = im2col(g, *out_geom);
                let (rows, hw) = (out_geom.col_rows(), out_geom.col_cols());
                if let Some(d) = adjoint(nodes, adj, *x) {
                    gemm_rm(*in_ch, rows, hw, &nodes[w.0].value, false, &dcols, false, T::one(), d);
                }
                if let Some(d) = adjoint(nodes, adj, *w) {
                    gemm_rm(*in_ch, hw, rows, &nodes[x.0].value, false, &dcols, true, T::one(), d);
                }
                if let Some(bv) = b {
                    if let Some(d) = adjoint(nodes, adj, *bv) {
                        let plane = out_geom.height * out_geom.width;
                        for (o, chunk) in g.chunks(plane).enumerate() {
                            d[o] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(d) = adjoint(nodes, adj, *x) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        d[src] += gv;
                    }
                }
            }
            Op::Act(x, kind) => {
                let xv = &nodes[x.0].value;
                if let Some(d) = adjoint(nodes, adj, *x) {
                    for (((d, &g), &xi), &yi) in d.iter_mut().zip(g).zip(xv).zip(&node.value) {
                        *d += g * kind.derivative(xi, yi);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(d) = adjoint(nodes, adj, *x) {
                    let (outer, len, inner) = split_axis(&node.shape, *axis);
                    let y = &node.value;
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                d[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, axis, rstd } => {
                if let Some(d) = adjoint(nodes, adj, *x) {
                    let (outer, len, inner) = split_axis(&node.shape, *axis);
                    let y = &node.value;
                    let n = T::of(len as f64);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let r = rstd[o * inner + i];
                            let mean_g = (0..len).map(|l| g[at(l)]).sum::<T>() / n;
                            let mean_gy = (0..len).map(|l| g[at(l)] * y[at(l)]).sum::<T>() / n;
                            for l in 0..len {
                                d[at(l)] += r * (g[at(l)] - mean_g - y[at(l)] * mean_gy);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = adjoint(nodes, adj, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = adjoint(nodes, adj, *x) {
                    let s = g[0] / T::of(d.len() as f64);
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumAxis { x, axis } => {
                if let Some(d) = adjoint(nodes, adj, *x) {
                    let (outer, len, inner) = split_axis(&nodes[x.0].shape, *axis);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            add_into(&mut d[(o * len + l) * inner..(o * len + l + 1) * inner], src);
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(d) = adjoint(nodes, adj, *x) {
                    for (&src, &gv) in index.iter().zip(g) {
                        d[src] += gv;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].shape[*axis];
                    if let Some(d) = adjoint(nodes, adj, *p) {
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            add_into(
                                &mut d[o * len * inner..(o + 1) * len * inner],
                                &g[from..from + len * inner],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if let Some(d) = adjoint(nodes, adj, *x) {
                    let (outer, full, inner) = split_axis(&nodes[x.0].shape, *axis);
                    let len = node.shape[*axis];
                    for o in 0..outer {
                        let to = (o * full + start) * inner;
                        add_into(&mut d[to..to + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (&nodes[pred.0].value, &nodes[target.0].value);
                let s = T::of(2.0) * g[0] / T::of(p.len() as f64);
                if let Some(d) = adjoint(nodes, adj, *pred) {
                    for ((d, &a), &b) in d.iter_mut().zip(p).zip(t) {
                        *d += s * (a - b);
                    }
                }
                if let Some(d) = adjoint(nodes, adj, *target) {
                    for ((d, &a), &b) in d.iter_mut().zip(p).zip(t) {
                        *d -= s * (a - b);
                    }
                }
            }
            Op::Bce { logit, label } => {
                let z = nodes[logit.0].value[0];
                if let Some(d) = adjoint(nodes, adj, *logit) {
                    d[0] += g[0] * (sigmoid(z) - *label);
                }
            }
        }
    }
}

/// Adjoint buffer of `v`, or `None` if `v` needs no gradient.
fn adjoint<'a, T: Element>(nodes: &[Node<T>], adj: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
}

#[cfg(test)]
mod tests;
