//! Tape-based reverse-mode differentiation over the kernel set in [`crate::ops`].
//!
//! A [`Graph`] records every op applied during a forward pass together with
//! the operand handles it needs. [`Graph::backward`] walks the tape in
//! reverse, calling each kernel's backward function and summing gradients
//! into operand slots. Nodes that do not depend on any trainable leaf are
//! skipped entirely, so constant correlation volumes cost nothing on the way
//! back.
//!
//! The tape is single-writer: one training step owns it.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Conv4d {
        input: Var,
        wq: Var,
        ws: Var,
        bias: Option<Var>,
        stride: usize,
        groups: usize,
    },
    Pointwise {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Resize(Var),
    AvgSupport(Var),
    Cosine {
        query: Var,
        support: Var,
    },
    CrossEntropy {
        logits: Var,
        target: Tensor<T>,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`; `None` if `var` is not trainable.
    /// Trainable leaves the loss never touched get an all-zero tensor.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = ops::relu(self.value(x));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        vb.expect_dims("add", va.dims())?;
        let values = va
            .values()
            .iter()
            .zip(vb.values())
            .map(|(&x, &y)| x + y)
            .collect();
        let v = Tensor::new(va.dims().to_vec(), values)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        vb.expect_dims("mul", va.dims())?;
        let values = va
            .values()
            .iter()
            .zip(vb.values())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::new(va.dims().to_vec(), values)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn cp4d_conv(
        &mut self,
        input: Var,
        wq: Var,
        ws: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        let v = ops::conv4d_forward(
            self.value(input),
            self.value(wq),
            self.value(ws),
            Some(self.value(bias)),
            stride,
            1,
        )?;
        let op = Op::Conv4d {
            input,
            wq,
            ws,
            bias: Some(bias),
            stride,
            groups: 1,
        };
        Ok(self.push(v, op, &[input, wq, ws, bias]))
    }

    /// Depth-wise pivot convolution with `[c, 3, 3]` kernels.
    pub fn dw4d_conv(&mut self, input: Var, wq: Var, ws: Var) -> Result<Var> {
        let c = self.value(input).dims()[0];
        self.value(wq)
            .expect_dims("dw4d query kernel", &[c, 3, 3])?;
        self.value(ws)
            .expect_dims("dw4d support kernel", &[c, 3, 3])?;
        // Kernels are stored [c, 3, 3]; the grouped kernel reads them as [c, 1, 3, 3].
        let wq4 = self.value(wq).clone().reshape(&[c, 1, 3, 3])?;
        let ws4 = self.value(ws).clone().reshape(&[c, 1, 3, 3])?;
        let v = ops::conv4d_forward(self.value(input), &wq4, &ws4, None, 1, c)?;
        let op = Op::Conv4d {
            input,
            wq,
            ws,
            bias: None,
            stride: 1,
            groups: c,
        };
        Ok(self.push(v, op, &[input, wq, ws]))
    }

    pub fn pw4d_conv(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let v = ops::pw4d_conv(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            v,
            Op::Pointwise {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let v = ops::group_norm(
            self.value(input),
            groups,
            self.value(gamma),
            self.value(beta),
            ops::GROUP_NORM_EPS,
        )?;
        let op = Op::GroupNorm {
            input,
            gamma,
            beta,
            groups,
        };
        Ok(self.push(v, op, &[input, gamma, beta]))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let v = ops::conv2d(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = ops::bilinear_resize(self.value(input), out_h, out_w)?;
        Ok(self.push(v, Op::Resize(input), &[input]))
    }

    pub fn avg_over_support_dims(&mut self, input: Var) -> Result<Var> {
        let v = ops::avg_over_support_dims(self.value(input))?;
        Ok(self.push(v, Op::AvgSupport(input), &[input]))
    }

    pub fn cosine_similarity_map(&mut self, query: Var, support: Var) -> Result<Var> {
        let v = ops::cosine_similarity_map(self.value(query), self.value(support))?;
        Ok(self.push(v, Op::Cosine { query, support }, &[query, support]))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Tensor<T>) -> Result<Var> {
        let loss = ops::softmax_cross_entropy(self.value(logits), &target)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, target },
            &[logits],
        ))
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let tail = self.value(*first).dims()[1..].to_vec();
        let mut channels = 0;
        let mut values = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.dims()[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat: trailing dims {:?} differ from {tail:?}",
                    &t.dims()[1..]
                )));
            }
            channels += t.dims()[0];
            values.extend_from_slice(t.values());
        }
        let mut dims = vec![channels];
        dims.extend(tail);
        let v = Tensor::new(dims, values)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        self.push(v, Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::State(
                "backward called before any forward op was recorded".into(),
            ));
        }
        let Some(root) = self.nodes.get(loss.0) else {
            return Err(Error::State(format!(
                "loss handle {} is not on this tape",
                loss.0
            )));
        };
        if root.value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got dims {:?}",
                root.value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.dims(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        // Trainable leaves that never received gradient get explicit zeros.
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.dims()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let gx = ops::relu_backward(val(*x), g)?;
                accumulate(grads, *x, gx)?;
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, g.clone())?;
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.needs(v) {
                        let gv = g
                            .values()
                            .iter()
                            .zip(self.value(other).values())
                            .map(|(&x, &y)| x * y)
                            .collect();
                        accumulate(grads, v, Tensor::new(g.dims().to_vec(), gv)?)?;
                    }
                }
            }
            &Op::Conv4d {
                input,
                wq,
                ws,
                bias,
                stride,
                groups,
            } => {
                let (kq, ks) = if groups == 1 {
                    (val(wq).clone(), val(ws).clone())
                } else {
                    let c = val(wq).dims()[0];
                    (
                        val(wq).clone().reshape(&[c, 1, 3, 3])?,
                        val(ws).clone().reshape(&[c, 1, 3, 3])?,
                    )
                };
                let r = ops::conv4d_backward(
                    val(input),
                    &kq,
                    &ks,
                    bias.is_some(),
                    stride,
                    groups,
                    g,
                    self.needs(input),
                )?;
                if let Some(gi) = r.input {
                    accumulate(grads, input, gi)?;
                }
                if self.needs(wq) {
                    accumulate(grads, wq, r.wq.reshape(val(wq).dims())?)?;
                }
                if self.needs(ws) {
                    accumulate(grads, ws, r.ws.reshape(val(ws).dims())?)?;
                }
                if let (Some(b), Some(gb)) = (bias, r.bias) {
                    if self.needs(b) {
                        accumulate(grads, b, gb)?;
                    }
                }
            }
            &Op::Pointwise {
                input,
                weight,
                bias,
            } => {
                let r = ops::pw4d_conv_backward(val(input), val(weight), val(bias), g)?;
                self.accumulate_if(grads, input, r.input)?;
                self.accumulate_if(grads, weight, r.weight)?;
                self.accumulate_if(grads, bias, r.bias)?;
            }
            &Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
            } => {
                let r = ops::group_norm_backward(
                    val(input),
                    groups,
                    val(gamma),
                    val(beta),
                    ops::GROUP_NORM_EPS,
                    g,
                )?;
                self.accumulate_if(grads, input, r.input)?;
                self.accumulate_if(grads, gamma, r.gamma)?;
                self.accumulate_if(grads, beta, r.beta)?;
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let r = ops::conv2d_backward(val(input), val(weight), val(bias), g)?;
                self.accumulate_if(grads, input, r.input)?;
                self.accumulate_if(grads, weight, r.weight)?;
                self.accumulate_if(grads, bias, r.bias)?;
            }
            &Op::Resize(x) => {
                let gx = ops::bilinear_resize_backward(val(x).dims(), g)?;
                accumulate(grads, x, gx)?;
            }
            &Op::AvgSupport(x) => {
                let gx = ops::avg_over_support_dims_backward(val(x).dims(), g)?;
                accumulate(grads, x, gx)?;
            }
            &Op::Cosine { query, support } => {
                let (gq, gs) = ops::cosine_similarity_map_backward(val(query), val(support), g)?;
                self.accumulate_if(grads, query, gq)?;
                self.accumulate_if(grads, support, gs)?;
            }
            Op::CrossEntropy { logits, target } => {
                let gl = ops::softmax_cross_entropy_backward(val(*logits), target, g.values()[0])?;
                accumulate(grads, *logits, gl)?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if self.needs(p) {
                        let part = Tensor::new(
                            val(p).dims().to_vec(),
                            g.values()[offset..offset + n].to_vec(),
                        )?;
                        accumulate(grads, p, part)?;
                    }
                    offset += n;
                }
            }
            &Op::Sum(x) => {
                accumulate(grads, x, Tensor::full(val(x).dims(), g.values()[0]))?;
            }
            &Op::Mean(x) => {
                let n = T::of(val(x).len() as f64);
                accumulate(grads, x, Tensor::full(val(x).dims(), g.values()[0] / n))?;
            }
        }
        Ok(())
    }

    fn accumulate_if(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if self.needs(v) {
            accumulate(grads, v, g)?;
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        slot @ None => *slot = Some(g),
        Some(existing) => {
            g.expect_dims("gradient accumulation", existing.dims())?;
            for (e, &x) in existing.values_mut().iter_mut().zip(g.values()) {
                *e += x;
            }
        }
    }
    Ok(())
}
