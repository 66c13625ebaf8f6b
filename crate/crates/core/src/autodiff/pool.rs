use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn nchw(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape).map_err(|_| Error::dim(format!("{what} needs N×C×H×W input, got {shape:?}")))
}

/// Routes each output gradient to one saved input position.
struct Gather {
    name: &'static str,
    source: Vec<usize>,
}

impl Backward for Gather {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; inputs[0].len()];
        for (&src, g) in self.source.iter().zip(grad) {
            gx[src] += g;
        }
        vec![Some(gx)]
    }
}

struct GlobalAvg {
    spatial: usize,
}

impl Backward for GlobalAvg {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let inv = 1.0 / self.spatial as f64;
        vec![Some(grad.iter().flat_map(|g| std::iter::repeat(g * inv).take(self.spatial)).collect())]
    }
}

/// Source index pair and interpolation weight along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel (align-corners = false) sampling positions.
fn taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

struct Bilinear {
    rows: Vec<Tap>,
    cols: Vec<Tap>,
    planes: usize,
    h: usize,
    w: usize,
}

impl Backward for Bilinear {
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let mut gx = vec![0.0; self.planes * self.h * self.w];
        for p in 0..self.planes {
            let src = &mut gx[p * self.h * self.w..(p + 1) * self.h * self.w];
            for (y, ry) in self.rows.iter().enumerate() {
                for (x, cx) in self.cols.iter().enumerate() {
                    let g = grad[(p * oh + y) * ow + x];
                    let (gt, gb) = (g * (1.0 - ry.frac), g * ry.frac);
                    src[ry.lo * self.w + cx.lo] += gt * (1.0 - cx.frac);
                    src[ry.lo * self.w + cx.hi] += gt * cx.frac;
                    src[ry.hi * self.w + cx.lo] += gb * (1.0 - cx.frac);
                    src[ry.hi * self.w + cx.hi] += gb * cx.frac;
                }
            }
        }
        vec![Some(gx)]
    }
}

impl Tape {
    /// 2×2 max pooling with stride 2. Ties resolve to the first position in raster order.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.shape(x), "max_pool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("max_pool2x2 needs even extents, got {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut source = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    out.push(d[best]);
                    source.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(value, &[x], Gather { name: "max_pool2x2", source }))
    }

    /// Mean over H×W, giving N×C×1×1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.shape(x), "global_avg_pool")?;
        let sp = h * w;
        let out = self
            .value(x)
            .data()
            .chunks_exact(sp)
            .map(|p| p.iter().sum::<f64>() / sp as f64)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, c, 1, 1], out), &[x], GlobalAvg { spatial: sp }))
    }

    /// Maximum over H×W, giving N×C×1×1. Ties resolve to the first position.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.shape(x), "global_max_pool")?;
        let sp = h * w;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut source = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let plane = &d[p * sp..(p + 1) * sp];
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            out.push(plane[best]);
            source.push(p * sp + best);
        }
        let value = Tensor::from_parts(vec![n, c, 1, 1], out);
        Ok(self.push(value, &[x], Gather { name: "global_max_pool", source }))
    }

    /// Bilinear resampling to `out_h`×`out_w` with half-pixel centres.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = nchw(self.shape(x), "bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("bilinear_resize target extents must be positive"));
        }
        let rows = taps(h, out_h);
        let cols = taps(w, out_w);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for p in 0..n * c {
            let src = &d[p * h * w..(p + 1) * h * w];
            for ry in &rows {
                for cx in &cols {
                    // a + t·(b − a) keeps constant regions exactly constant.
                    let lerp = |row: usize| {
                        let a = src[row * w + cx.lo];
                        a + cx.frac * (src[row * w + cx.hi] - a)
                    };
                    let top = lerp(ry.lo);
                    let bottom = lerp(ry.hi);
                    out.push(top + ry.frac * (bottom - top));
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, out_h, out_w], out);
        Ok(self.push(value, &[x], Bilinear { rows, cols, planes: n * c, h, w }))
    }
}
