//! The `Engine` abstraction: the same model code runs either eagerly (pure
//! inference, intermediates freed as they go out of scope) or on a [`Tape`]
//! that records every operation for reverse-mode differentiation.

use std::rc::Rc;

use super::{kernels, quantize, ParamId, ParamSet, Tensor};
use crate::{PfError, Result};

/// Shape bookkeeping for (batched) matmul shared by both engines.
pub(crate) fn matmul_dims(
    a: &[usize],
    b: &[usize],
    transpose_b: bool,
) -> Result<(usize, usize, usize, usize, Vec<usize>)> {
    let (batch, m, k) = match a.len() {
        2 => (1, a[0], a[1]),
        3 => (a[0], a[1], a[2]),
        _ => return Err(PfError::Dim(format!("matmul lhs must be rank 2 or 3, got {a:?}"))),
    };
    if b.len() != a.len() || (b.len() == 3 && b[0] != batch) {
        return Err(PfError::Dim(format!("matmul rank/batch mismatch: {a:?} x {b:?}")));
    }
    let (bk, n) = if transpose_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if bk != k {
        return Err(PfError::Dim(format!(
            "matmul inner extents differ: {a:?} x {b:?} (transpose_b={transpose_b})"
        )));
    }
    let out_shape = if a.len() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    Ok((batch, m, k, n, out_shape))
}

pub(crate) fn check_bias(x: &[usize], b: &[usize]) -> Result<usize> {
    let c = *x.last().ok_or_else(|| PfError::Dim("bias add on rank-0 tensor".into()))?;
    if b != [c] {
        return Err(PfError::Dim(format!(
            "bias shape {b:?} does not match trailing extent of {x:?}"
        )));
    }
    Ok(c)
}

pub(crate) fn check_conv(x: &[usize], w: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    if x.len() != 4 {
        return Err(PfError::Dim(format!("conv2d input must be NHWC, got {x:?}")));
    }
    let (n, h, wd, cin) = (x[0], x[1], x[2], x[3]);
    if w.len() != 4 || w[0] != 3 || w[1] != 3 || w[2] != cin {
        return Err(PfError::Dim(format!(
            "conv2d kernel must be [3,3,{cin},Cout], got {w:?} for input {x:?}"
        )));
    }
    let cout = w[3];
    if b != [cout] {
        return Err(PfError::Dim(format!("conv2d bias shape {b:?}, expected [{cout}]")));
    }
    Ok((n, h, wd, cin, cout))
}

/// Common interface of the eager evaluator and the recording tape.
pub trait Engine {
    type Val: Clone;

    fn constant(&mut self, t: Tensor) -> Self::Val;
    fn param(&mut self, ps: &ParamSet, id: ParamId) -> Self::Val;
    fn shape(&self, v: &Self::Val) -> Vec<usize>;
    /// Materialize the value (copies on the tape engine).
    fn value(&self, v: &Self::Val) -> Tensor;

    fn reshape(&mut self, v: &Self::Val, shape: Vec<usize>) -> Result<Self::Val>;
    fn gather(&mut self, v: &Self::Val, out_shape: Vec<usize>, idx: Rc<Vec<i64>>) -> Self::Val;
    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn sub(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn scale(&mut self, v: &Self::Val, c: f64) -> Self::Val;
    fn add_bias(&mut self, x: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn matmul(&mut self, a: &Self::Val, b: &Self::Val, transpose_b: bool) -> Result<Self::Val>;
    fn softmax_last(&mut self, x: &Self::Val) -> Self::Val;
    fn layer_norm(
        &mut self,
        x: &Self::Val,
        gamma: &Self::Val,
        beta: &Self::Val,
        eps: f64,
    ) -> Result<Self::Val>;
    fn gelu(&mut self, x: &Self::Val) -> Self::Val;
    fn relu(&mut self, x: &Self::Val) -> Self::Val;
    fn conv2d(&mut self, x: &Self::Val, w: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn abs(&mut self, x: &Self::Val) -> Self::Val;
    fn mean_all(&mut self, x: &Self::Val) -> Self::Val;

    /// Affine map over the trailing axis: `[.., in] -> [.., out]`.
    fn linear(&mut self, x: &Self::Val, w: &Self::Val, b: Option<&Self::Val>) -> Result<Self::Val> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(PfError::Dim(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let flat = self.reshape(x, vec![rows, ws[0]])?;
        let mut y = self.matmul(&flat, w, false)?;
        if let Some(b) = b {
            y = self.add_bias(&y, b)?;
        }
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(ws[1]);
        self.reshape(&y, out_shape)
    }

    /// Mean of |a - b| over every element.
    fn l1_loss(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        let d = self.sub(a, b)?;
        let d = self.abs(&d);
        Ok(self.mean_all(&d))
    }
}

/// Direct evaluation without gradient recording.
#[derive(Default)]
pub struct Eager;

impl Eager {
    pub fn new() -> Self {
        Eager
    }
}

fn q(mut data: Vec<f64>) -> Vec<f64> {
    quantize(&mut data);
    data
}

impl Engine for Eager {
    type Val = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        let (shape, data) = t.into_parts();
        Tensor::new(shape, q(data)).unwrap()
    }

    fn param(&mut self, ps: &ParamSet, id: ParamId) -> Tensor {
        let p = ps.get(id);
        Tensor::new(p.value.shape().to_vec(), q(p.value.data().to_vec())).unwrap()
    }

    fn shape(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn value(&self, v: &Tensor) -> Tensor {
        v.clone()
    }

    fn reshape(&mut self, v: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        v.clone().reshape(shape)
    }

    fn gather(&mut self, v: &Tensor, out_shape: Vec<usize>, idx: Rc<Vec<i64>>) -> Tensor {
        Tensor::new(out_shape, kernels::gather_fwd(v.data(), &idx)).expect("gather index table")
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(PfError::Dim(format!("add: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Tensor::new(a.shape().to_vec(), q(data))
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(PfError::Dim(format!("sub: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Tensor::new(a.shape().to_vec(), q(data))
    }

    fn scale(&mut self, v: &Tensor, c: f64) -> Tensor {
        let data = v.data().iter().map(|x| x * c).collect();
        Tensor::new(v.shape().to_vec(), q(data)).unwrap()
    }

    fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_bias(x.shape(), b.shape())?;
        Tensor::new(x.shape().to_vec(), q(kernels::add_bias_fwd(x.data(), b.data())))
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
        let (batch, m, k, n, out_shape) = matmul_dims(a.shape(), b.shape(), transpose_b)?;
        let data = kernels::matmul_fwd(a.data(), b.data(), batch, m, k, n, transpose_b);
        Tensor::new(out_shape, q(data))
    }

    fn softmax_last(&mut self, x: &Tensor) -> Tensor {
        let axis = x.shape().len() - 1;
        let data = kernels::softmax_fwd(x.data(), x.shape(), axis);
        Tensor::new(x.shape().to_vec(), q(data)).unwrap()
    }

    fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let c = check_bias(x.shape(), gamma.shape())?;
        check_bias(x.shape(), beta.shape())?;
        let data = kernels::layer_norm_fwd(x.data(), c, gamma.data(), beta.data(), eps);
        Tensor::new(x.shape().to_vec(), q(data))
    }

    fn gelu(&mut self, x: &Tensor) -> Tensor {
        Tensor::new(x.shape().to_vec(), q(kernels::gelu_fwd(x.data()))).unwrap()
    }

    fn relu(&mut self, x: &Tensor) -> Tensor {
        Tensor::new(x.shape().to_vec(), q(kernels::relu_fwd(x.data()))).unwrap()
    }

    fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, h, wd, cin, cout) = check_conv(x.shape(), w.shape(), b.shape())?;
        let data = kernels::conv2d_fwd(x.data(), w.data(), b.data(), n, h, wd, cin, cout);
        Tensor::new(vec![n, h, wd, cout], q(data))
    }

    fn abs(&mut self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|v| v.abs()).collect();
        Tensor::new(x.shape().to_vec(), q(data)).unwrap()
    }

    fn mean_all(&mut self, x: &Tensor) -> Tensor {
        // two rounding points (sum, then scale) to match the tape engine
        let s = q(vec![x.data().iter().sum::<f64>()])[0];
        Tensor::new(vec![], q(vec![s / x.numel() as f64])).unwrap()
    }
}
