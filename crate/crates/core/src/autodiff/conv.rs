//! 2-D cross-correlation lowered to im2col + GEMM, batched over samples.

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{gemm, Trans};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// `floor((extent + 2·pad − kernel)/stride) + 1`, or `None` when the kernel does not fit.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

fn im2col(g: &Geometry, x: &[f64], cols: &mut [f64]) {
    let spatial = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * spatial..][..spatial];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geometry, cols: &[f64], dx: &mut [f64]) {
    let spatial = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * spatial..][..spatial];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward(g: &Geometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let in_len = g.cin * g.h * g.w;
    let spatial = g.ho * g.wo;
    let out_len = g.cout * spatial;
    let mut out = vec![0.0; g.n * out_len];
    exec::for_each_chunk(&mut out, out_len, |s, y| {
        let xs = &x[s * in_len..(s + 1) * in_len];
        if g.pointwise() {
            gemm(g.cout, g.cin, spatial, 1.0, w, Trans::No, xs, Trans::No, 0.0, y);
        } else {
            let mut cols = vec![0.0; g.patch() * spatial];
            im2col(g, xs, &mut cols);
            gemm(g.cout, g.patch(), spatial, 1.0, w, Trans::No, &cols, Trans::No, 0.0, y);
        }
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                y[o * spatial..(o + 1) * spatial].iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

struct Conv2d {
    geom: Geometry,
    has_bias: bool,
}

impl Backward for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let g = &self.geom;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let in_len = g.cin * g.h * g.w;
        let spatial = g.ho * g.wo;
        let out_len = g.cout * spatial;
        let (need_x, need_w) = (needs[0], needs[1]);
        let need_b = self.has_bias && needs[2];

        // Per-sample partials computed independently, then reduced in sample order.
        let partials = exec::map_indexed(g.n, |s| {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let gy = &grad[s * out_len..(s + 1) * out_len];
            let cols = if g.pointwise() || !need_w {
                None
            } else {
                let mut c = vec![0.0; g.patch() * spatial];
                im2col(g, xs, &mut c);
                Some(c)
            };
            let dw = need_w.then(|| {
                let mut dw = vec![0.0; g.cout * g.patch()];
                let rhs = cols.as_deref().unwrap_or(xs);
                gemm(g.cout, spatial, g.patch(), 1.0, gy, Trans::No, rhs, Trans::Yes, 0.0, &mut dw);
                dw
            });
            let dx = need_x.then(|| {
                if g.pointwise() {
                    let mut dx = vec![0.0; in_len];
                    gemm(g.cin, g.cout, spatial, 1.0, w, Trans::Yes, gy, Trans::No, 0.0, &mut dx);
                    dx
                } else {
                    let mut dcols = vec![0.0; g.patch() * spatial];
                    gemm(g.patch(), g.cout, spatial, 1.0, w, Trans::Yes, gy, Trans::No, 0.0, &mut dcols);
                    let mut dx = vec![0.0; in_len];
                    col2im(g, &dcols, &mut dx);
                    dx
                }
            });
            (dx, dw)
        });

        let mut gx = need_x.then(|| Vec::with_capacity(g.n * in_len));
        let mut gw = need_w.then(|| vec![0.0; w.len()]);
        for (dx, dw) in partials {
            if let (Some(gx), Some(dx)) = (&mut gx, dx) {
                gx.extend_from_slice(&dx);
            }
            if let (Some(gw), Some(dw)) = (&mut gw, dw) {
                gw.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            }
        }
        let mut out = vec![gx, gw];
        if self.has_bias {
            out.push(need_b.then(|| {
                let mut gb = vec![0.0; g.cout];
                for s in 0..g.n {
                    for (o, acc) in gb.iter_mut().enumerate() {
                        *acc += grad[s * out_len + o * spatial..][..spatial].iter().sum::<f64>();
                    }
                }
                gb
            }));
        }
        out
    }
}

fn geometry(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Geometry> {
    let [n, cin, h, wd] = <[usize; 4]>::try_from(x)
        .map_err(|_| Error::dim(format!("conv2d input must be N×C×H×W, got {x:?}")))?;
    let [cout, wcin, kh, kw] = <[usize; 4]>::try_from(w)
        .map_err(|_| Error::dim(format!("conv2d weight must be O×I×kh×kw, got {w:?}")))?;
    if cin != wcin {
        return Err(Error::dim(format!(
            "conv2d channel mismatch: input {x:?} vs weight {w:?}"
        )));
    }
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(wd, kw, stride, pad);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(Error::dim(format!(
            "conv2d kernel {kh}×{kw} does not fit input {h}×{wd} with padding {pad}"
        )));
    };
    Ok(Geometry { n, cin, h, w: wd, cout, kh, kw, stride, pad, ho, wo })
}

impl Tape {
    /// Cross-correlation (no kernel flip) of `x` (N×Cin×H×W) with `w` (Cout×Cin×kh×kw).
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = geometry(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::dim(format!(
                    "conv2d bias must have shape [{}], got {:?}",
                    geom.cout,
                    self.shape(b)
                )));
            }
        }
        let out = forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = vec![geom.n, geom.cout, geom.ho, geom.wo];
        let rule = Conv2d { geom, has_bias: bias.is_some() };
        let value = Tensor::from_parts(shape, out);
        Ok(match bias {
            Some(b) => self.push(value, &[x, w, b], rule),
            None => self.push(value, &[x, w], rule),
        })
    }
}

/// Direct nested-loop convolution kept as an independent oracle.
pub fn conv2d_naive(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = geometry(x.shape(), w.shape(), stride, pad)?;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.ho, g.wo]);
    for n in 0..g.n {
        for o in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut s = bias.map_or(0.0, |b| b.data()[o]);
                    for c in 0..g.cin {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let iy = (oy * g.stride + i) as isize - g.pad as isize;
                                let ix = (ox * g.stride + j) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    s += x.at(&[n, c, iy as usize, ix as usize]) * w.at(&[o, c, i, j]);
                                }
                            }
                        }
                    }
                    let off = out.offset(&[n, o, oy, ox]);
                    out.data_mut()[off] = s;
                }
            }
        }
    }
    Ok(out)
}
