use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, numel, strides, Tensor};

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out` in row-major order.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total = numel(out);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary {
    kind: BinaryKind,
}

impl Backward for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let out = output.shape();
        let mut ga = needs[0].then(|| vec![0.0; a.len()]);
        let mut gb = needs[1].then(|| vec![0.0; b.len()]);
        let sa = broadcast_strides(a.shape(), out);
        let sb = broadcast_strides(b.shape(), out);
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(out, &sa, &sb, |o, ia, ib| {
            let g = grad[o];
            let (da, db) = match self.kind {
                BinaryKind::Add => (g, g),
                BinaryKind::Sub => (g, -g),
                BinaryKind::Mul => (g * bd[ib], g * ad[ia]),
                BinaryKind::Div => (g / bd[ib], -g * ad[ia] / (bd[ib] * bd[ib])),
            };
            if let Some(ga) = &mut ga {
                ga[ia] += da;
            }
            if let Some(gb) = &mut gb {
                gb[ib] += db;
            }
        });
        vec![ga, gb]
    }
}

struct Affine {
    scale: f64,
}

impl Backward for Affine {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * self.scale).collect())]
    }
}

struct Relu;

impl Backward for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        // Subgradient at exactly 0 is 0.
        vec![Some(
            grad.iter()
                .zip(x)
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
        )]
    }
}

struct Sigmoid;

impl Backward for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(
            grad.iter()
                .zip(output.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
        )]
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct SumAll;

impl Backward for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0]; inputs[0].len()])]
    }
}

/// Reduction of a tensor onto a broadcast-compatible smaller shape.
struct SumTo;

impl Backward for SumTo {
    fn name(&self) -> &'static str {
        "sum_to"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let mut gx = vec![0.0; x.len()];
        let sy = broadcast_strides(output.shape(), x.shape());
        let sx = strides(x.shape());
        for_each_broadcast(x.shape(), &sx, &sy, |_, ix, iy| gx[ix] = grad[iy]);
        vec![Some(gx)]
    }
}

impl Tape {
    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; numel(&out_shape)];
        if ta.shape() == tb.shape() {
            for ((o, x), y) in out.iter_mut().zip(ta.data()).zip(tb.data()) {
                *o = apply(kind, *x, *y);
            }
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let (ad, bd) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = apply(kind, ad[ia], bd[ib]));
        }
        Ok(self.push(Tensor::from_parts(out_shape, out), &[a, b], Binary { kind }))
    }

    /// Broadcasting `a + b` (equal ranks; each extent equal or 1).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| scale * v + shift).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), &[x], Affine { scale })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), &[x], Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), &[x], Sigmoid)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), &[x], SumAll)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Sums `x` over every axis where `shape` has extent 1.
    pub fn sum_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let compatible = shape.len() == t.rank()
            && shape.iter().zip(t.shape()).all(|(&s, &d)| s == d || s == 1);
        if !compatible {
            return Err(Error::dim(format!("cannot reduce {:?} to {:?}", t.shape(), shape)));
        }
        let mut out = vec![0.0; numel(shape)];
        let sx = strides(t.shape());
        let sy = broadcast_strides(shape, t.shape());
        let d = t.data();
        for_each_broadcast(t.shape(), &sx, &sy, |_, ix, iy| out[iy] += d[ix]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), &[x], SumTo))
    }
}

fn apply(kind: BinaryKind, x: f64, y: f64) -> f64 {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}
