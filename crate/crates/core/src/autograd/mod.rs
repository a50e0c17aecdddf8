//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! the seeded outputs with respect to every node that requires one.

mod kernels;

use crate::error::{shape, Result};
use crate::tensor::Tensor;

pub use kernels::{col2im, conv_out_len, im2col};

/// Variance floor of [`Graph::batch_norm`].
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Add(Var, Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    ConcatChannels(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        window: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (parameters, or inputs for saliency).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// 2×2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2_forward(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_forward(self.value(x), factor)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample { x, factor }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels_forward(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    /// Normalizes every pixel's channel vector, then applies a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, xhat, inv_std) =
            kernels::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta))?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head self-attention restricted to non-overlapping square windows.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, window: usize, heads: usize) -> Result<Var> {
        let (out, probs) = kernels::window_attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            window,
            heads,
        )?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::WindowAttention {
                q,
                k,
                v,
                window,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let src = self.value(x).data();
        let data = (0..b * c)
            .map(|i| src[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(vec![b, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// Standardizes every column of `x: B×D` over the batch; no affine parameters.
    pub fn batch_norm(&mut self, x: Var) -> Result<Var> {
        let (b, d) = self.value(x).dims2()?;
        if b < 2 {
            return Err(shape(format!("batch norm needs at least 2 rows, got {b}")));
        }
        let src = self.value(x).data();
        let mut xhat = vec![0.0; b * d];
        let mut inv_std = vec![0.0; d];
        for j in 0..d {
            let mean = (0..b).map(|i| src[i * d + j]).sum::<f64>() / b as f64;
            let var = (0..b).map(|i| (src[i * d + j] - mean).powi(2)).sum::<f64>() / b as f64;
            inv_std[j] = 1.0 / (var + BATCH_NORM_EPS).sqrt();
            for i in 0..b {
                xhat[i * d + j] = (src[i * d + j] - mean) * inv_std[j];
            }
        }
        let out = Tensor::new(vec![b, d], xhat.clone())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::BatchNorm { x, xhat, inv_std }, rg))
    }

    /// `x·wᵀ + b` for `x: B×I`, `w: O×I`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Back-propagates `seed` from a single output.
    pub fn backward(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        self.backward_many(vec![(root, seed)])
    }

    /// Back-propagates several seeded outputs at once; their contributions sum.
    pub fn backward_many(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, seed) in seeds {
            if seed.shape() != self.value(v).shape() {
                return Err(shape(format!(
                    "seed {:?} does not match output {:?}",
                    seed.shape(),
                    self.value(v).shape()
                )));
            }
            accumulate(&mut grads, v, seed);
            top = top.max(v.0 + 1);
        }
        for idx in (0..top).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    wants(x),
                )?;
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if wants(w) {
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if wants(b) {
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Relu(x) => {
                if wants(x) {
                    let xv = self.value(*x).data();
                    let mut dx = g.clone();
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if wants(x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let d = dx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        d[src] += gv;
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Upsample { x, factor } => {
                if wants(x) {
                    let dx = kernels::upsample_backward(g, self.value(*x).shape(), *factor)?;
                    accumulate(grads, *x, dx);
                }
            }
            Op::ConcatChannels(a, b) => {
                let (da, db) = kernels::concat_channels_backward(
                    g,
                    self.value(*a).shape(),
                    self.value(*b).shape(),
                )?;
                if wants(a) {
                    accumulate(grads, *a, da);
                }
                if wants(b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) =
                    kernels::layer_norm_backward(g, self.value(*gamma), xhat, inv_std)?;
                if wants(x) {
                    accumulate(grads, *x, dx);
                }
                if wants(gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if wants(beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::WindowAttention {
                q,
                k,
                v,
                window,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = kernels::window_attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    *window,
                    *heads,
                )?;
                if wants(q) {
                    accumulate(grads, *q, dq);
                }
                if wants(k) {
                    accumulate(grads, *k, dk);
                }
                if wants(v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::GlobalAvgPool(x) => {
                if wants(x) {
                    let (b, c, h, w) = self.value(*x).dims4()?;
                    let hw = h * w;
                    let mut dx = Tensor::zeros(&[b, c, h, w]);
                    for (i, &gv) in g.data().iter().enumerate() {
                        let share = gv / hw as f64;
                        dx.data_mut()[i * hw..(i + 1) * hw].fill(share);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm { x, xhat, inv_std } => {
                if wants(x) {
                    let (b, d) = g.dims2()?;
                    let gd = g.data();
                    let mut dx = Tensor::zeros(&[b, d]);
                    for j in 0..d {
                        let sum_g: f64 = (0..b).map(|i| gd[i * d + j]).sum();
                        let sum_gx: f64 = (0..b).map(|i| gd[i * d + j] * xhat[i * d + j]).sum();
                        for i in 0..b {
                            let k = i * d + j;
                            dx.data_mut()[k] = inv_std[j] * (gd[k] - (sum_g + xhat[k] * sum_gx) / b as f64);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), g)?;
                if wants(x) {
                    accumulate(grads, *x, dx);
                }
                if wants(w) {
                    accumulate(grads, *w, dw);
                }
                if wants(b) {
                    accumulate(grads, *b, db);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
