//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass; nodes are stored
//! in topological order (inputs always precede consumers), so a single
//! reverse sweep visits each node exactly once. Gradients of bound
//! parameters accumulate into their [`ParamSet`] slots; `zero_grad` resets
//! them between steps.

use std::collections::HashMap;
use std::rc::Rc;

use super::engine::{check_bias, check_conv, matmul_dims, Engine};
use super::{kernels, quantize, ParamId, ParamSet, Tensor};
use crate::{PfError, Result};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Reshape(Var),
    Gather { x: Var, idx: Rc<Vec<i64>>, in_len: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, b: Var },
    Matmul { a: Var, b: Var, transpose_b: bool, batch: usize, m: usize, k: usize, n: usize },
    SoftmaxLast(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Gelu(Var),
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Var, n: usize, h: usize, wd: usize, cin: usize, cout: usize },
    Abs(Var),
    SumAll(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recording engine for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_cache: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        quantize(&mut data);
        self.nodes.push(Node { shape, data, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Record an input leaf; gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let track = t.requires_grad;
        let (shape, mut data) = t.into_parts();
        quantize(&mut data);
        self.nodes.push(Node { shape, data, op: Op::Leaf(None), needs_grad: track });
        Var(self.nodes.len() - 1)
    }

    /// Gradient of a leaf after `backward`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate
    /// into `ps`; repeated calls without `zero_grad` sum.
    pub fn backward(&mut self, loss: Var, ps: &mut ParamSet) -> Result<()> {
        let lnode = &self.nodes[loss.0];
        if lnode.data.len() != 1 {
            return Err(PfError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lnode.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf(param) => {
                    if let Some(id) = param {
                        ps.accumulate_grad(id, &dy);
                    }
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Reshape(x) => self.acc(&mut grads, x, dy),
                Op::Gather { x, idx, in_len } => {
                    self.acc(&mut grads, x, kernels::gather_bwd(&dy, &idx, in_len))
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, a, dy.clone());
                    self.acc(&mut grads, b, dy);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, a, dy.clone());
                    self.acc(&mut grads, b, dy.iter().map(|g| -g).collect());
                }
                Op::Scale(x, c) => self.acc(&mut grads, x, dy.iter().map(|g| g * c).collect()),
                Op::AddBias { x, b } => {
                    let c = self.nodes[b.0].data.len();
                    self.acc(&mut grads, b, kernels::add_bias_bwd_bias(&dy, c));
                    self.acc(&mut grads, x, dy);
                }
                Op::Matmul { a, b, transpose_b, batch, m, k, n } => {
                    let (da, db) = kernels::matmul_bwd(
                        self.data(a),
                        self.data(b),
                        &dy,
                        batch,
                        m,
                        k,
                        n,
                        transpose_b,
                    );
                    self.acc(&mut grads, a, da);
                    self.acc(&mut grads, b, db);
                }
                Op::SoftmaxLast(x) => {
                    let shape = self.nodes[i].shape.clone();
                    let axis = shape.len() - 1;
                    let dx = kernels::softmax_bwd(&self.nodes[i].data, &dy, &shape, axis);
                    self.acc(&mut grads, x, dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let c = self.nodes[gamma.0].data.len();
                    let (dx, dg, db) =
                        kernels::layer_norm_bwd(self.data(x), c, self.data(gamma), eps, &dy);
                    self.acc(&mut grads, x, dx);
                    self.acc(&mut grads, gamma, dg);
                    self.acc(&mut grads, beta, db);
                }
                Op::Gelu(x) => {
                    let dx = kernels::gelu_bwd(self.data(x), &dy);
                    self.acc(&mut grads, x, dx);
                }
                Op::Relu(x) => {
                    let dx = kernels::relu_bwd(self.data(x), &dy);
                    self.acc(&mut grads, x, dx);
                }
                Op::Conv2d { x, w, b, n, h, wd, cin, cout } => {
                    let (dx, dw, db) =
                        kernels::conv2d_bwd(self.data(x), self.data(w), &dy, n, h, wd, cin, cout);
                    self.acc(&mut grads, x, dx);
                    self.acc(&mut grads, w, dw);
                    self.acc(&mut grads, b, db);
                }
                Op::Abs(x) => {
                    let dx: Vec<f64> = self
                        .data(x)
                        .iter()
                        .zip(&dy)
                        .map(|(&v, &g)| if v > 0.0 { g } else if v < 0.0 { -g } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, x, dx);
                }
                Op::SumAll(x) => {
                    let n = self.nodes[x.0].data.len();
                    self.acc(&mut grads, x, vec![dy[0]; n]);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi += ci;
                }
            }
            slot => *slot = Some(contrib),
        }
    }
}

impl Engine for Tape {
    type Val = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        let (shape, mut data) = t.into_parts();
        quantize(&mut data);
        self.nodes.push(Node { shape, data, op: Op::Leaf(None), needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn param(&mut self, ps: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let p = ps.get(id);
        let mut data = p.value.data().to_vec();
        quantize(&mut data);
        self.nodes.push(Node {
            shape: p.value.shape().to_vec(),
            data,
            op: Op::Leaf(Some(id)),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_cache.insert(id, v);
        v
    }

    fn shape(&self, v: &Var) -> Vec<usize> {
        self.nodes[v.0].shape.clone()
    }

    fn value(&self, v: &Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone()).unwrap()
    }

    fn reshape(&mut self, v: &Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[v.0].data.len() {
            return Err(PfError::Dim(format!(
                "cannot reshape {:?} to {:?}",
                self.nodes[v.0].shape, shape
            )));
        }
        let data = self.nodes[v.0].data.clone();
        let needs = self.needs(*v);
        Ok(self.push(shape, data, Op::Reshape(*v), needs))
    }

    fn gather(&mut self, v: &Var, out_shape: Vec<usize>, idx: Rc<Vec<i64>>) -> Var {
        let in_len = self.nodes[v.0].data.len();
        let data = kernels::gather_fwd(&self.nodes[v.0].data, &idx);
        let needs = self.needs(*v);
        self.push(out_shape, data, Op::Gather { x: *v, idx, in_len }, needs)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(PfError::Dim(format!(
                "add: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<f64> = self.data(*a).iter().zip(self.data(*b)).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(*a) || self.needs(*b);
        Ok(self.push(shape, data, Op::Add(*a, *b), needs))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(PfError::Dim(format!(
                "sub: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<f64> = self.data(*a).iter().zip(self.data(*b)).map(|(x, y)| x - y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(*a) || self.needs(*b);
        Ok(self.push(shape, data, Op::Sub(*a, *b), needs))
    }

    fn scale(&mut self, v: &Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(*v).iter().map(|x| x * c).collect();
        let shape = self.nodes[v.0].shape.clone();
        let needs = self.needs(*v);
        self.push(shape, data, Op::Scale(*v, c), needs)
    }

    fn add_bias(&mut self, x: &Var, b: &Var) -> Result<Var> {
        check_bias(&self.nodes[x.0].shape, &self.nodes[b.0].shape)?;
        let data = kernels::add_bias_fwd(self.data(*x), self.data(*b));
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(*x) || self.needs(*b);
        Ok(self.push(shape, data, Op::AddBias { x: *x, b: *b }, needs))
    }

    fn matmul(&mut self, a: &Var, b: &Var, transpose_b: bool) -> Result<Var> {
        let (batch, m, k, n, out_shape) =
            matmul_dims(&self.nodes[a.0].shape, &self.nodes[b.0].shape, transpose_b)?;
        let data = kernels::matmul_fwd(self.data(*a), self.data(*b), batch, m, k, n, transpose_b);
        let needs = self.needs(*a) || self.needs(*b);
        Ok(self.push(
            out_shape,
            data,
            Op::Matmul { a: *a, b: *b, transpose_b, batch, m, k, n },
            needs,
        ))
    }

    fn softmax_last(&mut self, x: &Var) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let axis = shape.len() - 1;
        let data = kernels::softmax_fwd(self.data(*x), &shape, axis);
        let needs = self.needs(*x);
        self.push(shape, data, Op::SoftmaxLast(*x), needs)
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let c = check_bias(&self.nodes[x.0].shape, &self.nodes[gamma.0].shape)?;
        check_bias(&self.nodes[x.0].shape, &self.nodes[beta.0].shape)?;
        let data =
            kernels::layer_norm_fwd(self.data(*x), c, self.data(*gamma), self.data(*beta), eps);
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(*x) || self.needs(*gamma) || self.needs(*beta);
        Ok(self.push(shape, data, Op::LayerNorm { x: *x, gamma: *gamma, beta: *beta, eps }, needs))
    }

    fn gelu(&mut self, x: &Var) -> Var {
        let data = kernels::gelu_fwd(self.data(*x));
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(*x);
        self.push(shape, data, Op::Gelu(*x), needs)
    }

    fn relu(&mut self, x: &Var) -> Var {
        let data = kernels::relu_fwd(self.data(*x));
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(*x);
        self.push(shape, data, Op::Relu(*x), needs)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let (n, h, wd, cin, cout) =
            check_conv(&self.nodes[x.0].shape, &self.nodes[w.0].shape, &self.nodes[b.0].shape)?;
        let data =
            kernels::conv2d_fwd(self.data(*x), self.data(*w), self.data(*b), n, h, wd, cin, cout);
        let needs = self.needs(*x) || self.needs(*w) || self.needs(*b);
        Ok(self.push(
            vec![n, h, wd, cout],
            data,
            Op::Conv2d { x: *x, w: *w, b: *b, n, h, wd, cin, cout },
            needs,
        ))
    }

    fn abs(&mut self, x: &Var) -> Var {
        let data: Vec<f64> = self.data(*x).iter().map(|v| v.abs()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(*x);
        self.push(shape, data, Op::Abs(*x), needs)
    }

    fn mean_all(&mut self, x: &Var) -> Var {
        let n = self.nodes[x.0].data.len();
        let s = self.sum_all(x);
        self.scale(&s, 1.0 / n as f64)
    }
}

impl Tape {
    pub fn sum_all(&mut self, x: &Var) -> Var {
        let s: f64 = self.data(*x).iter().sum();
        let needs = self.needs(*x);
        self.push(vec![], vec![s], Op::SumAll(*x), needs)
    }
}
