use std::collections::{BTreeMap, BTreeSet};

use super::conv::{self, ConvGeometry};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalisation statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics (biased variance) from a train-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogClamped(Var, T),
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    CrossEntropy {
        probs: Var,
        target: Vec<T>,
        eps: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LogClamped(..) => "log",
            Op::Reshape(_) => "reshape",
            Op::BatchNorm { .. } => "batch_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Vec<T>>,
    leaves: BTreeMap<Var, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn leaf(&self, var: Var) -> Option<&[T]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.leaves.is_empty()
    }
}

/// A computation graph built for one step and dropped after backward.
///
/// Every op checks shapes eagerly and rejects non-finite outputs with
/// [`Error::NumericFault`].
pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    param_nodes: BTreeMap<ParamId, Var>,
    frozen: BTreeSet<ParamId>,
    nodes: Vec<Node<T>>,
    detached_backward_calls: usize,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_nodes: BTreeMap::new(),
            frozen: BTreeSet::new(),
            nodes: Vec::new(),
            detached_backward_calls: 0,
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of backward calls on losses that did not depend on any
    /// gradient-tracked tensor.
    pub fn detached_backward_calls(&self) -> usize {
        self.detached_backward_calls
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        let node = &self.nodes[var.0];
        match (&node.op, &node.value) {
            (_, Some(v)) => v,
            (Op::Param(id), None) => self.params.expect("param graph").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn data_of(&self, var: Var) -> &[T] {
        self.value(var).data()
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.nodes[var.0].value.as_ref().and_then(|t| t.grad())
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFault {
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Input tensor; tracked when its `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(tensor),
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Treats `ids` as constants: they receive no gradient and their weight
    /// gradients are never computed. Must precede the first use of each id.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        for id in ids {
            assert!(!self.param_nodes.contains_key(&id), "parameter {id:?} already in use");
            self.frozen.insert(id);
        }
    }

    /// Parameter from the bound store; repeated lookups share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("Graph::param requires a graph built with_params");
        assert!(id.0 < store.len(), "unknown parameter {id:?}");
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: !self.frozen.contains(&id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new_unchecked(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(op, t, rg)
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::new_unchecked(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(op, t, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, T::one())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = T::from_usize(v.numel()).unwrap();
        let s: T = v.data().iter().copied().sum::<T>() / n;
        let rg = self.rg(a);
        self.push(Op::Mean(a), Tensor::scalar(s), rg)
    }

    /// 2-D matrix product `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), Tensor::new_unchecked(vec![m, n], out), rg)
    }

    /// Fully connected layer `x · wᵀ + b` with `x: [B, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [sw[0]] {
            return Err(Error::Shape {
                op: "linear",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, din, dout) = (sx[0], sx[1], sw[0]);
        let bias = self.value(b).data();
        let mut out: Vec<T> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
        T::gemm(
            batch,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            (din as isize, 1),
            self.value(w).data(),
            (1, din as isize),
            T::one(),
            &mut out,
            (dout as isize, 1),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Op::Linear { x, w, b },
            Tensor::new_unchecked(vec![batch, dout], out),
            rg,
        )
    }

    /// Stride-`stride` convolution with zero "same" padding.
    /// `x: [B, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        conv::check_conv_shapes("conv2d", &sx, &sw, self.shape(b), sw.get(1).copied().unwrap_or(0))?;
        let geom = ConvGeometry::same(sx[1], sw[0], sw[2], stride, sx[2], sx[3]);
        let out = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
            sx[0],
        );
        let shape = vec![sx[0], geom.out_channels, geom.out_h, geom.out_w];
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::Conv2d { x, w, b, geom }, Tensor::new_unchecked(shape, out), rg)
    }

    /// Transposed convolution multiplying each spatial dimension by
    /// `stride`; the exact adjoint of [`Graph::conv2d`] on the output grid.
    /// `x: [B, C, H, W]`, `w: [C, O, k, k]`, `b: [O]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        conv::check_conv_shapes(
            "conv_transpose2d",
            &sx,
            &sw,
            self.shape(b),
            sw.first().copied().unwrap_or(0),
        )?;
        let geom = ConvGeometry::same(sw[1], sx[1], sw[2], stride, sx[2] * stride, sx[3] * stride);
        debug_assert_eq!((geom.out_h, geom.out_w), (sx[2], sx[3]));
        let out = conv::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
            sx[0],
        );
        let shape = vec![sx[0], geom.in_channels, geom.in_h, geom.in_w];
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Op::ConvTranspose2d { x, w, b, geom },
            Tensor::new_unchecked(shape, out),
            rg,
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.leaky_relu(a, T::zero())
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let width = *va.shape().last().unwrap();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let t = Tensor::new_unchecked(va.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(Op::Softmax(a), t, rg)
    }

    /// `ln(clamp(a, eps, 1 - eps))`, for probabilities. The gradient is
    /// zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, eps: T) -> Result<Var> {
        let hi = T::one() - eps;
        self.map(a, Op::LogClamped(a, eps), |x| x.max(eps).min(hi).ln())
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().with_requires_grad(false).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        self.push(Op::Reshape(a), t.without_grad(), rg)
    }

    /// Flattens everything but the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let rest: usize = s[1..].iter().product();
        let b = s[0];
        self.reshape(a, &[b, rest])
    }

    /// Per-channel batch normalisation over `[B, C, ...]`; returns the batch
    /// statistics in train mode so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: sx,
                rhs: vec![0, 0],
            });
        }
        let (batch, channels) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(Error::Shape {
                    op: "batch_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let count = T::from_usize(batch * spatial).unwrap();
        let data = self.value(x).data();
        let channel_iter = |c: usize| {
            (0..batch).flat_map(move |n| {
                let start = (n * channels + c) * spatial;
                start..start + spatial
            })
        };
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                if batch < 2 {
                    return Err(Error::contract("batch_norm in train mode needs batch >= 2"));
                }
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for c in 0..channels {
                    let m = channel_iter(c).map(|i| data[i]).sum::<T>() / count;
                    let v = channel_iter(c).map(|i| (data[i] - m).powi(2)).sum::<T>() / count;
                    mean[c] = m;
                    var[c] = v;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::contract("running statistics do not match channels"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for c in 0..channels {
            for i in channel_iter(c) {
                xhat[i] = (data[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            Tensor::new_unchecked(sx, out),
            rg,
        )?;
        Ok((v, train.then_some(BatchStats { mean, var })))
    }

    /// Categorical cross entropy `-(1/B) Σ_b Σ_k y_bk ln p_bk` between
    /// probability rows `probs: [B, K]` and target distributions.
    pub fn cross_entropy(&mut self, probs: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        let sp = self.shape(probs);
        if sp.len() != 2 || sp != target.shape() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: sp.to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let width = sp[1];
        let tol = T::from_f64_lossy(1e-4);
        for (r, row) in target.data().chunks(width).enumerate() {
            let total: T = row.iter().copied().sum();
            if row.iter().any(|&v| v < T::zero()) || (total - T::one()).abs() > tol {
                return Err(Error::Validation(format!(
                    "cross_entropy target row {r} is not a distribution (sum {total})"
                )));
            }
        }
        let batch = T::from_usize(sp[0]).unwrap();
        let hi = T::one() - eps;
        let p = self.value(probs).data();
        let total: T = p
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| if y == T::zero() { T::zero() } else { y * p.max(eps).min(hi).ln() })
            .sum();
        let rg = self.rg(probs);
        self.push(
            Op::CrossEntropy {
                probs,
                target: target.data().to_vec(),
                eps,
            },
            Tensor::scalar(-total / batch),
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf tensors accumulate their
    /// gradient in place; parameter gradients are returned for the caller to
    /// fold into the store or hand to an optimizer.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            self.detached_backward_calls += 1;
            log::warn!("backward on a loss that does not depend on any tracked tensor");
            return Ok(Gradients::default());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFault {
                    op: format!("backward of {}", self.nodes[i].op.name()),
                });
            }
            self.backward_node(i, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], to: Var, delta: Vec<T>) {
        if !self.rg(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a = *a + d),
            slot => *slot = Some(delta),
        }
    }

    fn send_with(&self, grads: &mut [Option<Vec<T>>], to: Var, f: impl FnOnce() -> Vec<T>) {
        if self.rg(to) {
            let delta = f();
            self.send(grads, to, delta);
        }
    }

    fn backward_node(
        &mut self,
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let node_out = || self.nodes[i].value.as_ref().unwrap().data();
        match &self.nodes[i].op {
            Op::Leaf => {
                self.nodes[i].value.as_mut().unwrap().accumulate_grad(&g)?;
                out.leaves.insert(Var(i), g);
            }
            Op::Param(id) => {
                out.params.insert(*id, g);
            }
            &Op::Add(a, b) => {
                self.send(grads, a, g.clone());
                self.send(grads, b, g);
            }
            &Op::Sub(a, b) => {
                self.send_with(grads, b, || g.iter().map(|&v| -v).collect());
                self.send(grads, a, g);
            }
            &Op::Mul(a, b) => {
                self.send_with(grads, a, || {
                    g.iter().zip(self.data_of(b)).map(|(&d, &y)| d * y).collect()
                });
                self.send_with(grads, b, || {
                    g.iter().zip(self.data_of(a)).map(|(&d, &x)| d * x).collect()
                });
            }
            &Op::Scale(a, s) => self.send(grads, a, g.iter().map(|&v| v * s).collect()),
            &Op::AddScalar(a) => self.send(grads, a, g),
            &Op::Sum(a) => {
                let n = self.value(a).numel();
                self.send(grads, a, vec![g[0]; n]);
            }
            &Op::Mean(a) => {
                let n = self.value(a).numel();
                let d = g[0] / T::from_usize(n).unwrap();
                self.send(grads, a, vec![d; n]);
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                self.send_with(grads, a, || {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), &g, (n as isize, 1), self.data_of(b), (1, n as isize), T::zero(), &mut da, (k as isize, 1));
                    da
                });
                self.send_with(grads, b, || {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), self.data_of(a), (1, k as isize), &g, (n as isize, 1), T::zero(), &mut db, (n as isize, 1));
                    db
                });
            }
            &Op::Linear { x, w, b } => {
                let (batch, din) = (self.shape(x)[0], self.shape(x)[1]);
                let dout = self.shape(w)[0];
                self.send_with(grads, x, || {
                    let mut dx = vec![T::zero(); batch * din];
                    T::gemm(batch, dout, din, T::one(), &g, (dout as isize, 1), self.data_of(w), (din as isize, 1), T::zero(), &mut dx, (din as isize, 1));
                    dx
                });
                self.send_with(grads, w, || {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(dout, batch, din, T::one(), &g, (1, dout as isize), self.data_of(x), (din as isize, 1), T::zero(), &mut dw, (din as isize, 1));
                    dw
                });
                self.send_with(grads, b, || {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, &d)| *a = *a + d);
                    }
                    db
                });
            }
            &Op::Conv2d { x, w, b, geom } => {
                let batch = self.shape(x)[0];
                let cg = conv::conv2d_backward(self.data_of(x), self.data_of(w), &g, &geom, batch, self.rg(x), self.rg(w) || self.rg(b));
                if let Some(dx) = cg.input {
                    self.send(grads, x, dx);
                }
                self.send(grads, w, cg.weight);
                self.send(grads, b, cg.bias);
            }
            &Op::ConvTranspose2d { x, w, b, geom } => {
                let batch = self.shape(x)[0];
                let cg = conv::conv_transpose2d_backward(self.data_of(x), self.data_of(w), &g, &geom, batch, self.rg(x), self.rg(w) || self.rg(b));
                if let Some(dx) = cg.input {
                    self.send(grads, x, dx);
                }
                self.send(grads, w, cg.weight);
                self.send(grads, b, cg.bias);
            }
            &Op::LeakyRelu(a, slope) => {
                let d = g
                    .iter()
                    .zip(self.data_of(a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { d * slope })
                    .collect();
                self.send(grads, a, d);
            }
            &Op::Tanh(a) => {
                let d = g.iter().zip(node_out()).map(|(&d, &y)| d * (T::one() - y * y)).collect();
                self.send(grads, a, d);
            }
            &Op::Sigmoid(a) => {
                let d = g.iter().zip(node_out()).map(|(&d, &y)| d * y * (T::one() - y)).collect();
                self.send(grads, a, d);
            }
            &Op::Softmax(a) => {
                let y = node_out();
                let width = *self.shape(a).last().unwrap();
                let mut d = vec![T::zero(); g.len()];
                for ((dr, gr), yr) in d.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.send(grads, a, d);
            }
            &Op::LogClamped(a, eps) => {
                let hi = T::one() - eps;
                let d = g
                    .iter()
                    .zip(self.data_of(a))
                    .map(|(&d, &x)| if x > eps && x < hi { d / x } else { T::zero() })
                    .collect();
                self.send(grads, a, d);
            }
            &Op::Reshape(a) => self.send(grads, a, g),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let sx = self.shape(x);
                let (batch, channels) = (sx[0], sx[1]);
                let spatial: usize = sx[2..].iter().product();
                let count = T::from_usize(batch * spatial).unwrap();
                let gam = self.data_of(gamma);
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                let mut dx = vec![T::zero(); g.len()];
                for c in 0..channels {
                    let idx = || {
                        (0..batch).flat_map(move |n| {
                            let s = (n * channels + c) * spatial;
                            s..s + spatial
                        })
                    };
                    let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
                    for i in idx() {
                        sum_dy = sum_dy + g[i];
                        sum_dy_xhat = sum_dy_xhat + g[i] * xhat[i];
                    }
                    dgamma[c] = sum_dy_xhat;
                    dbeta[c] = sum_dy;
                    let scale = gam[c] * inv_std[c];
                    for i in idx() {
                        dx[i] = if train {
                            scale * (g[i] - sum_dy / count - xhat[i] * sum_dy_xhat / count)
                        } else {
                            scale * g[i]
                        };
                    }
                }
                self.send(grads, x, dx);
                self.send(grads, gamma, dgamma);
                self.send(grads, beta, dbeta);
            }
            Op::CrossEntropy { probs, target, eps } => {
                let (probs, eps) = (*probs, *eps);
                let hi = T::one() - eps;
                let batch = T::from_usize(self.shape(probs)[0]).unwrap();
                let d = self.data_of(probs)
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        if p > eps && p < hi {
                            -g[0] * y / (p * batch)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.send(grads, probs, d);
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tensor<T> {
    /// Internal constructor for op outputs; finiteness is checked by the graph.
    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::from_parts(shape, data)
    }

    fn without_grad(mut self) -> Self {
        self.zero_grad();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> Tensor<f64> {
        Tensor::vector(values)
    }

    #[test]
    fn elementwise_add() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(v(&[1.0, 2.0]));
        let b = g.constant(v(&[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(v(&[1.0, 2.0]));
        let b = g.constant(v(&[1.0, 2.0, 3.0]));
        match g.add(a, b).unwrap_err() {
            Error::Shape { op, lhs, rhs } => {
                assert_eq!(op, "add");
                assert_eq!((lhs, rhs), (vec![2], vec![3]));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(3));
        let x = Tensor::from_fn([3, 4], |k| k as f64 * 0.3 - 1.0);
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(v(&[0.0; 5]));
        let s = g.softmax(a).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(v(&[1.0, -2.0, 3.0, 0.5]).with_requires_grad(true));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(v(&[1.0, 2.0]).with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn neg_log_sigmoid_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(v(&[0.0]).with_requires_grad(true));
        let s = g.sigmoid(x).unwrap();
        let l = g.log_clamped(s, 1e-7).unwrap();
        let n = g.neg(l).unwrap();
        g.backward(n).unwrap();
        assert!((g.grad(x).unwrap()[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(v(&[1.5, -0.5]).with_requires_grad(true));
        let t = g.tanh(x).unwrap();
        let s = g.sum(t).unwrap();
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(v(&[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn detached_backward_is_counted_noop() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(v(&[1.0, 2.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.is_empty());
        assert_eq!(g.detached_backward_calls(), 1);
    }

    #[test]
    fn overflow_is_a_numeric_fault() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(&[3.0e38]));
        let err = g.scale(x, 10.0).unwrap_err();
        match err {
            Error::NumericFault { op } => assert_eq!(op, "scale"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn batch_norm_train_requires_two_items() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 2, 2, 2]));
        let gm = g.constant(v(&[1.0, 1.0]));
        let bt = g.constant(v(&[0.0, 0.0]));
        assert!(g.batch_norm(x, gm, bt, BatchNormMode::Train, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_rejects_unnormalised_target() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new([1, 2], vec![0.5, 0.5]).unwrap());
        let t = Tensor::new([1, 2], vec![0.7, 0.7]).unwrap();
        assert!(matches!(g.cross_entropy(p, &t, 1e-7), Err(Error::Validation(_))));
    }

    #[test]
    fn param_grads_are_returned() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", v(&[2.0, 3.0]));
        let grads = {
            let mut g = Graph::with_params(&store);
            let wv = g.param(w);
            let again = g.param(w);
            assert_eq!(wv, again);
            let x = g.constant(v(&[1.0, 4.0]));
            let p = g.mul(wv, x).unwrap();
            let s = g.sum(p).unwrap();
            g.backward(s).unwrap()
        };
        assert_eq!(grads.param(w).unwrap(), &[1.0, 4.0]);
        store.accumulate(&grads).unwrap();
        store.accumulate(&grads).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[2.0, 8.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_fn([2, 1, 3, 3], |i| i as f64 * 0.1));
        let b = store.add("b", Tensor::zeros([2]));
        let mut g = Graph::with_params(&store);
        g.freeze([w, b]);
        let x = g.leaf(Tensor::full([1, 1, 4, 4], 1.0).with_requires_grad(true));
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.conv2d(x, wv, bv, 2).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.param(w).is_none() && grads.param(b).is_none());
        assert!(g.grad(x).unwrap().iter().any(|&d| d != 0.0));
    }
}
