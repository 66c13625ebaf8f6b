use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Trans};
use crate::tensor::{numel, Tensor};

/// Batch count and matrix extents of a rank-2 or rank-3 operand.
fn matrix_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [r, c] => Some((1, r, c)),
        [b, r, c] => Some((b, r, c)),
        _ => None,
    }
}

struct MatMul {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let MatMul { batch, m, k, n } = *self;
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = needs[0].then(|| {
            let mut ga = vec![0.0; batch * m * k];
            for i in 0..batch {
                let g = &grad[i * m * n..(i + 1) * m * n];
                let bb = &b[i * k * n..(i + 1) * k * n];
                gemm(m, n, k, 1.0, g, Trans::No, bb, Trans::Yes, 0.0, &mut ga[i * m * k..(i + 1) * m * k]);
            }
            ga
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![0.0; batch * k * n];
            for i in 0..batch {
                let g = &grad[i * m * n..(i + 1) * m * n];
                let aa = &a[i * m * k..(i + 1) * m * k];
                gemm(k, m, n, 1.0, aa, Trans::Yes, g, Trans::No, 0.0, &mut gb[i * k * n..(i + 1) * k * n]);
            }
            gb
        });
        vec![ga, gb]
    }
}

struct Transpose {
    batch: usize,
    rows: usize,
    cols: usize,
}

fn transpose_batched(batch: usize, rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let off = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[off + c * rows + r] = src[off + r * cols + c];
            }
        }
    }
    out
}

impl Backward for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        // Gradient layout is the transposed (cols × rows) one.
        vec![Some(transpose_batched(self.batch, self.cols, self.rows, grad))]
    }
}

struct Reshape;

impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

struct Concat {
    outer: usize,
    /// Per-input contiguous block length (channels × inner).
    blocks: Vec<usize>,
}

impl Backward for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.blocks.iter().sum();
        let mut start = 0;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (&blk, &need) in self.blocks.iter().zip(needs) {
            if need {
                let mut g = Vec::with_capacity(self.outer * blk);
                for o in 0..self.outer {
                    let base = o * total + start;
                    g.extend_from_slice(&grad[base..base + blk]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            start += blk;
        }
        out
    }
}

struct Softmax {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Backward for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let y = output.data();
        let mut gx = vec![0.0; y.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.len * self.inner + i;
                let dot: f64 = (0..self.len)
                    .map(|j| grad[base + j * self.inner] * y[base + j * self.inner])
                    .sum();
                for j in 0..self.len {
                    let p = base + j * self.inner;
                    gx[p] = y[p] * (grad[p] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

impl Tape {
    /// Matrix product of rank-2 operands, or per-item product of rank-3 batches.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::dim(format!("matmul of {sa:?} and {sb:?}"));
        let (ba, m, k) = matrix_dims(&sa).ok_or_else(mismatch)?;
        let (bb, k2, n) = matrix_dims(&sb).ok_or_else(mismatch)?;
        if sa.len() != sb.len() || ba != bb || k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; ba * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..ba {
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &ad[i * m * k..(i + 1) * m * k],
                    Trans::No,
                    &bd[i * k * n..(i + 1) * k * n],
                    Trans::No,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![ba, m, n] };
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], MatMul { batch: ba, m, k, n }))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, rows, cols) =
            matrix_dims(&s).ok_or_else(|| Error::dim(format!("transpose needs rank 2 or 3, got {s:?}")))?;
        let out = transpose_batched(batch, rows, cols, self.value(x).data());
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Ok(self.push(Tensor::from_parts(shape, out), &[x], Transpose { batch, rows, cols }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, &[x], Reshape))
    }

    /// Concatenation along axis 1 (channels for N×C×H×W activations).
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::contract("concat of zero tensors"))?)
            .to_vec();
        if first.len() < 2 {
            return Err(Error::dim(format!("concat needs rank >= 2, got {first:?}")));
        }
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::dim(format!(
                    "concat inputs disagree outside the channel axis: {first:?} vs {s:?}"
                )));
            }
            channels += s[1];
        }
        let blocks: Vec<usize> = xs.iter().map(|&v| self.shape(v)[1] * inner).collect();
        let mut out = Vec::with_capacity(outer * channels * inner);
        for o in 0..outer {
            for (&v, &blk) in xs.iter().zip(&blocks) {
                out.extend_from_slice(&self.value(v).data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        Ok(self.push(Tensor::from_parts(shape, out), xs, Concat { outer, blocks }))
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() {
            return Err(Error::dim(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len).map(|j| d[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (d[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    z += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= z;
                }
            }
        }
        let shape = s.to_vec();
        debug_assert_eq!(numel(&shape), out.len());
        Ok(self.push(Tensor::from_parts(shape, out), &[x], Softmax { outer, len, inner }))
    }

    /// Softmax over the last axis, so every row sums to one.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        self.softmax(x, r - 1)
    }
}
