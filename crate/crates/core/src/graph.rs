//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Each call on [`Graph`] evaluates one operation eagerly and appends it to
//! the tape, so the recorded order is always topological. [`Graph::backward`]
//! walks the tape once in reverse and may be called only once per graph.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::params::{Gradients, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Mat, MatMut, Real, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Leaf,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Relu {
        input: NodeId,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Dropout {
        input: NodeId,
        mask: Option<Vec<T>>,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mean {
        inputs: Vec<NodeId>,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
    Sum {
        input: NodeId,
    },
    Flatten {
        input: NodeId,
    },
    Tile {
        input: NodeId,
        y0: usize,
        x0: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Relu { .. } => "relu",
            Op::Linear { .. } => "linear",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Add { .. } => "add",
            Op::Mean { .. } => "mean",
            Op::Mse { .. } => "mse_loss",
            Op::Sum { .. } => "sum",
            Op::Flatten { .. } => "flatten",
            Op::Tile { .. } => "tile",
        }
    }
}

#[derive(Debug)]
struct Node<T: Real> {
    op: Op<T>,
    /// `None` for parameters, whose values live in the borrowed [`ParamSet`].
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Operation tape over one forward pass.
pub struct Graph<'p, T: Real = f32> {
    params: Option<&'p ParamSet<T>>,
    nodes: Vec<Node<T>>,
    training: bool,
    consumed: bool,
    leaf_grads: Vec<Option<Vec<T>>>,
    corrupt_conv_backward: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    /// A graph without parameters; trainable values enter through [`Graph::leaf`].
    pub fn new(training: bool) -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            training,
            consumed: false,
            leaf_grads: Vec::new(),
            corrupt_conv_backward: false,
        }
    }

    pub fn with_params(params: &'p ParamSet<T>, training: bool) -> Self {
        Graph {
            params: Some(params),
            ..Graph::new(training)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Makes the convolution backward pass return wrong weight gradients.
    /// Exists so gradient checking can be shown to catch a broken kernel.
    #[doc(hidden)]
    pub fn corrupt_conv_backward(&mut self) {
        self.corrupt_conv_backward = true;
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(pid), _) => self.params.expect("param node without param set").get(*pid),
            (_, Some(v)) => v,
            (_, None) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    /// Gradient of the loss with respect to a leaf, available after backward.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.leaf_grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{} forward", op.name())));
        }
        let requires_grad = match &op {
            Op::Input => false,
            Op::Leaf | Op::Param(_) => true,
            other => inputs_of(other).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, tensor: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Input, tensor)
    }

    /// Differentiable value not owned by a parameter set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Leaf, tensor)
    }

    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        let params = self
            .params
            .ok_or_else(|| Error::InvalidArgument("graph has no parameter set".into()))?;
        if id.0 >= params.len() {
            return Err(Error::InvalidArgument(format!("unknown parameter {}", id.0)));
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn param_named(&mut self, name: &str) -> Result<NodeId> {
        let id = self
            .params
            .and_then(|p| p.find(name))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        self.param(id)
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(weight), stride, pad)?;
        if self.shape(bias) != [geom.out_c] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", self.shape(bias), geom.out_c),
            ));
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let out = Tensor::new(geom.output_shape(), out)?;
        self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            out,
        )
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        let (out, argmax) = kernels::maxpool2_forward(&shape, self.value(input).data())?;
        let out = Tensor::new([shape[0], shape[1], shape[2] / 2, shape[3] / 2], out)?;
        self.push(Op::MaxPool2 { input, argmax }, out)
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let out = Tensor::new(
            x.shape(),
            x.data()
                .iter()
                .map(|&v| if v > T::ZERO { v } else { T::ZERO })
                .collect(),
        )?;
        self.push(Op::Relu { input }, out)
    }

    /// Row-wise affine map: `input (N x D) * weight (D x K) + bias (K)`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (&[n, d], &[wd, k]) = (self.shape(input), self.shape(weight)) else {
            return Err(Error::shape(
                "linear",
                format!(
                    "expected N x D input and D x K weights, got {:?} and {:?}",
                    self.shape(input),
                    self.shape(weight)
                ),
            ));
        };
        if d != wd || self.shape(bias) != [k] {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {:?}, weights {:?}, bias {:?}",
                    self.shape(input),
                    self.shape(weight),
                    self.shape(bias)
                ),
            ));
        }
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        T::gemm(
            n,
            d,
            k,
            T::ONE,
            Mat::rows(self.value(input).data(), d),
            Mat::rows(self.value(weight).data(), k),
            T::ONE,
            MatMut::rows(&mut out, k),
        );
        let out = Tensor::new([n, k], out)?;
        self.push(Op::Linear { input, weight, bias }, out)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// In inference mode the input passes through unchanged.
    pub fn dropout(&mut self, input: NodeId, rate: f64, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let x = self.value(input);
        if !self.training || rate == 0.0 {
            let out = x.clone();
            return self.push(Op::Dropout { input, mask: None }, without_grad(out));
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < rate { T::ZERO } else { keep })
            .collect();
        let out = Tensor::new(x.shape(), x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect())?;
        self.push(
            Op::Dropout {
                input,
                mask: Some(mask),
            },
            out,
        )
    }

    /// Concatenates `N x D_i` tensors along the feature axis.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let n = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(inputs.len());
        for &id in inputs {
            match *self.shape(id) {
                [rows, d] if rows == n => widths.push(d),
                _ => {
                    return Err(Error::shape(
                        "concat",
                        format!("expected {n} x D, got {:?}", self.shape(id)),
                    ))
                }
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&id, &d) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(id).data()[row * d..(row + 1) * d]);
            }
        }
        let out = Tensor::new([n, total], out)?;
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            out,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect())?;
        self.push(Op::Add { a, b }, out)
    }

    /// Elementwise arithmetic mean of equally shaped tensors.
    pub fn mean(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean of zero tensors".into()))?;
        let shape = self.shape(first).to_vec();
        if let Some(bad) = inputs.iter().find(|&&id| self.shape(id) != shape.as_slice()) {
            return Err(Error::shape("mean", format!("{:?} vs {:?}", self.shape(*bad), shape)));
        }
        // f64 accumulation keeps the f32 result correctly rounded under cancellation
        let mut acc = vec![0.0f64; shape.iter().product()];
        for &id in inputs {
            acc.iter_mut()
                .zip(self.value(id).data())
                .for_each(|(a, &v)| *a += v.to_f64());
        }
        let n = inputs.len() as f64;
        let out = Tensor::new(shape, acc.into_iter().map(|a| T::from_f64(a / n)).collect())?;
        self.push(
            Op::Mean {
                inputs: inputs.to_vec(),
            },
            out,
        )
    }

    /// Mean over all entries of the squared difference.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(
                "mse_loss",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let mut acc = 0.0f64;
        for (&a, &b) in p.data().iter().zip(t.data()) {
            let d = (a - b).to_f64();
            acc += d * d;
        }
        let loss = T::from_f64(acc / p.numel() as f64);
        self.push(Op::Mse { pred, target }, Tensor::scalar(loss))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).sum();
        self.push(Op::Sum { input }, Tensor::scalar(T::from_f64(s)))
    }

    /// Reshapes `N x ...` to `N x D`.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let n = *x
            .shape()
            .first()
            .ok_or_else(|| Error::shape("flatten", "rank-0 input"))?;
        let d = x.numel().checked_div(n).unwrap_or(0);
        let out = Tensor::new([n, d], x.data().to_vec())?;
        self.push(Op::Flatten { input }, out)
    }

    /// Spatial window `[y0, y0 + h) x [x0, x0 + w)` of an NCHW tensor.
    pub fn tile(&mut self, input: NodeId, y0: usize, x0: usize, h: usize, w: usize) -> Result<NodeId> {
        let &[n, c, ih, iw] = self.shape(input) else {
            return Err(Error::shape(
                "tile",
                format!("input must be NCHW, got {:?}", self.shape(input)),
            ));
        };
        if y0 + h > ih || x0 + w > iw {
            return Err(Error::shape(
                "tile",
                format!("window {h}x{w} at ({y0},{x0}) exceeds {ih}x{iw}"),
            ));
        }
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            for y in y0..y0 + h {
                let row = (plane * ih + y) * iw;
                out.extend_from_slice(&src[row + x0..row + x0 + w]);
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        self.push(Op::Tile { input, y0, x0 }, out)
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Returns the gradient of every parameter the loss depends on. Leaf
    /// gradients stay readable through [`Graph::grad`]; intermediate
    /// gradients are freed as soon as they have been propagated.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let param_count = self.params.map_or(0, ParamSet::len);
        let mut param_grads: Vec<Option<Vec<T>>> = vec![None; param_count];
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);
        self.leaf_grads = vec![None; self.nodes.len()];

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            if !grad.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("{} backward", self.nodes[idx].op.name())));
            }
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Leaf => self.leaf_grads[idx] = Some(grad),
                Op::Param(pid) => accumulate(&mut param_grads[pid.0], &grad),
                op => {
                    let contributions = self.op_backward(op, idx, &grad)?;
                    for (target, g) in contributions {
                        if self.nodes[target.0].requires_grad {
                            accumulate(&mut grads[target.0], &g);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: param_grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn op_backward(&self, op: &Op<T>, idx: usize, grad: &[T]) -> Result<Vec<(NodeId, Vec<T>)>> {
        let mut out = Vec::new();
        match op {
            Op::Input | Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let mut gw = vec![T::ZERO; w.numel()];
                let mut gb = vec![T::ZERO; geom.out_c];
                let mut gx = self.wants(*input).then(|| vec![T::ZERO; x.numel()]);
                kernels::conv2d_backward(geom, x.data(), w.data(), grad, gx.as_deref_mut(), &mut gw, &mut gb);
                if self.corrupt_conv_backward {
                    for (i, g) in gw.iter_mut().enumerate() {
                        *g *= T::from_f64(if i % 2 == 0 { 1.5 } else { 0.5 });
                    }
                }
                out.push((*weight, gw));
                out.push((*bias, gb));
                if let Some(gx) = gx {
                    out.push((*input, gx));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gx = vec![T::ZERO; self.value(*input).numel()];
                kernels::maxpool2_backward(argmax, grad, &mut gx);
                out.push((*input, gx));
            }
            Op::Relu { input } => {
                let y = self.nodes[idx].value.as_ref().expect("relu output");
                let gx = grad
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                    .collect();
                out.push((*input, gx));
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let k = w.shape()[1];
                let mut gw = vec![T::ZERO; d * k];
                T::gemm(
                    d,
                    n,
                    k,
                    T::ONE,
                    Mat::transposed(x.data(), d),
                    Mat::rows(grad, k),
                    T::ZERO,
                    MatMut::rows(&mut gw, k),
                );
                let mut gb = vec![T::ZERO; k];
                for row in grad.chunks_exact(k) {
                    gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                }
                out.push((*weight, gw));
                out.push((*bias, gb));
                if self.wants(*input) {
                    let mut gx = vec![T::ZERO; n * d];
                    T::gemm(
                        n,
                        k,
                        d,
                        T::ONE,
                        Mat::rows(grad, k),
                        Mat::transposed(w.data(), k),
                        T::ZERO,
                        MatMut::rows(&mut gx, d),
                    );
                    out.push((*input, gx));
                }
            }
            Op::Dropout { input, mask } => {
                let gx = match mask {
                    Some(m) => grad.iter().zip(m).map(|(&g, &s)| g * s).collect(),
                    None => grad.to_vec(),
                };
                out.push((*input, gx));
            }
            Op::Concat { inputs } => {
                let n = self.shape(inputs[0])[0];
                let total: usize = inputs.iter().map(|&i| self.shape(i)[1]).sum();
                let mut offset = 0;
                for &id in inputs {
                    let d = self.shape(id)[1];
                    let mut gx = Vec::with_capacity(n * d);
                    for row in 0..n {
                        gx.extend_from_slice(&grad[row * total + offset..row * total + offset + d]);
                    }
                    offset += d;
                    out.push((id, gx));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, grad.to_vec()));
                out.push((*b, grad.to_vec()));
            }
            Op::Mean { inputs } => {
                let scale = T::from_f64(inputs.len() as f64);
                let g: Vec<T> = grad.iter().map(|&v| v / scale).collect();
                for &id in inputs {
                    out.push((id, g.clone()));
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = grad[0] * T::from_f64(2.0 / p.numel() as f64);
                let gp: Vec<T> = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * scale).collect();
                if self.wants(*target) {
                    out.push((*target, gp.iter().map(|&v| -v).collect()));
                }
                out.push((*pred, gp));
            }
            Op::Sum { input } => {
                out.push((*input, vec![grad[0]; self.value(*input).numel()]));
            }
            Op::Flatten { input } => out.push((*input, grad.to_vec())),
            Op::Tile { input, y0, x0 } => {
                let &[n, c, ih, iw] = self.shape(*input) else {
                    unreachable!()
                };
                let &[_, _, h, w] = self.nodes[idx].value.as_ref().expect("tile output").shape() else {
                    unreachable!()
                };
                let mut gx = vec![T::ZERO; n * c * ih * iw];
                for plane in 0..n * c {
                    for y in 0..h {
                        let dst = (plane * ih + y0 + y) * iw + x0;
                        let src = (plane * h + y) * w;
                        gx[dst..dst + w].copy_from_slice(&grad[src..src + w]);
                    }
                }
                out.push((*input, gx));
            }
        }
        Ok(out)
    }
}

fn inputs_of<T>(op: &Op<T>) -> Vec<NodeId> {
    match op {
        Op::Input | Op::Leaf | Op::Param(_) => Vec::new(),
        Op::Conv2d {
            input, weight, bias, ..
        }
        | Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
        Op::MaxPool2 { input, .. }
        | Op::Relu { input }
        | Op::Dropout { input, .. }
        | Op::Sum { input }
        | Op::Flatten { input }
        | Op::Tile { input, .. } => vec![*input],
        Op::Concat { inputs } | Op::Mean { inputs } => inputs.clone(),
        Op::Add { a, b } => vec![*a, *b],
        Op::Mse { pred, target } => vec![*pred, *target],
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v),
        None => *slot = Some(g.to_vec()),
    }
}

fn without_grad<T: Real>(mut t: Tensor<T>) -> Tensor<T> {
    t.zero_grad();
    t
}
