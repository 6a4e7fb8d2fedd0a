//! Spatial resampling: bilinear upsampling, integer width shifts and
//! disparity-driven width warping.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Source taps `(i0, i1, t)` per output index for align-corners-off
/// resampling by an integer factor, clamped to the edges.
fn taps<T: Real>(len: usize, factor: usize) -> Vec<(usize, usize, T)> {
    (0..len * factor)
        .map(|i| {
            let src = (i as f64 + 0.5) / factor as f64 - 0.5;
            let src = src.clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

fn upsample_forward<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("upsample", "rank", ">= 2", s.len()));
    }
    if factor == 0 {
        return Err(Error::contract("upsample", "factor must be positive"));
    }
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    let planes: usize = s[..r - 2].iter().product();
    let (oh, ow) = (h * factor, w * factor);
    let ty = taps::<T>(h, factor);
    let tx = taps::<T>(w, factor);
    let xs = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &xs[p * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = src[y0 * w + x0] + fx * (src[y0 * w + x1] - src[y0 * w + x0]);
                let bot = src[y1 * w + x0] + fx * (src[y1 * w + x1] - src[y1 * w + x0]);
                out.push(top + fy * (bot - top));
            }
        }
    }
    let mut shape = s.to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out)
}

/// Bilinear upsampling of the last two axes by an integer factor.
pub fn upsample_bilinear<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    upsample_forward(x, factor)
}

pub fn upsample_bilinear_2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    upsample_forward(x, 2)
}

fn shift_forward<T: Real>(x: &Tensor<T>, d: isize) -> Result<Tensor<T>> {
    let w = *x.shape().last().expect("rank >= 1");
    if d.unsigned_abs() >= w {
        return Err(Error::shape(
            "shift_width",
            "width",
            format!("> |d| = {}", d.unsigned_abs()),
            w,
        ));
    }
    let mut out = vec![T::zero(); x.numel()];
    for (orow, irow) in out.chunks_mut(w).zip(x.data().chunks(w)) {
        for (xo, o) in orow.iter_mut().enumerate() {
            let xi = xo as isize - d;
            if xi >= 0 && (xi as usize) < w {
                *o = irow[xi as usize];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Moves values by `d` columns along the last axis: `out[x] = in[x - d]`,
/// zero where `x - d` falls outside the row.
pub fn shift_width<T: Real>(x: &Tensor<T>, d: isize) -> Result<Tensor<T>> {
    shift_forward(x, d)
}

/// Clamped sample position along a row; `slope_ok` is false where the clamp
/// is active so the position gradient vanishes there.
#[inline]
fn warp_tap<T: Real>(pos: T, w: usize) -> (usize, usize, T, bool) {
    let hi = T::lit((w - 1) as f64);
    let inside = pos >= T::zero() && pos <= hi;
    let p = pos.max(T::zero()).min(hi);
    if w == 1 {
        return (0, 0, T::zero(), false);
    }
    let i0 = (p.floor().as_f64() as usize).min(w - 2);
    (i0, i0 + 1, p - T::lit(i0 as f64), inside)
}

fn check_warp<T: Real>(x: &Tensor<T>, disp: &Tensor<T>) -> Result<[usize; 4]> {
    let [n, c, h, w] = x.dims4("warp_width")?;
    let ds = disp.dims4("warp_width")?;
    if ds[1] != 1 {
        return Err(Error::shape("warp_width", "disparity channels", 1, ds[1]));
    }
    for (axis, (a, b)) in ["batch", "", "height", "width"]
        .iter()
        .zip([n, 1, h, w].iter().zip(ds))
    {
        if *a != b {
            return Err(Error::shape("warp_width", axis, a, b));
        }
    }
    Ok([n, c, h, w])
}

fn warp_forward<T: Real>(x: &Tensor<T>, disp: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = check_warp(x, disp)?;
    let (xs, ds) = (x.data(), disp.data());
    let mut out = vec![T::zero(); xs.len()];
    for ni in 0..n {
        for y in 0..h {
            let drow = &ds[(ni * h + y) * w..][..w];
            for ci in 0..c {
                let base = ((ni * c + ci) * h + y) * w;
                let irow = &xs[base..base + w];
                for xo in 0..w {
                    let pos = T::lit(xo as f64) - drow[xo];
                    let (i0, i1, t, _) = warp_tap(pos, w);
                    out[base + xo] = irow[i0] + t * (irow[i1] - irow[i0]);
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Samples each row of `x` at `column - disp` with linear interpolation,
/// clamping out-of-range positions to the border.
pub fn warp_width<T: Real>(x: &Tensor<T>, disp: &Tensor<T>) -> Result<Tensor<T>> {
    warp_forward(x, disp)
}

impl<T: Real> Graph<T> {
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = upsample_forward(self.value(x), factor)?;
        let flops = 6 * out.numel() as u64;
        Ok(self.record(out, Op::Upsample { x, factor }, &[x], flops))
    }

    pub fn upsample_2x(&mut self, x: Var) -> Result<Var> {
        self.upsample(x, 2)
    }

    pub fn shift_width(&mut self, x: Var, d: isize) -> Result<Var> {
        let out = shift_forward(self.value(x), d)?;
        Ok(self.record(out, Op::Shift { x, d }, &[x], 0))
    }

    pub fn warp_width(&mut self, x: Var, disp: Var) -> Result<Var> {
        let out = warp_forward(self.value(x), self.value(disp))?;
        let flops = 4 * out.numel() as u64;
        Ok(self.record(out, Op::Warp { x, disp }, &[x, disp], flops))
    }
}

pub(super) fn upsample_backward<T: Real>(
    graph: &Graph<T>,
    x: Var,
    factor: usize,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let s = graph.shape(x).to_vec();
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    let planes: usize = s[..r - 2].iter().product();
    let ty = taps::<T>(h, factor);
    let tx = taps::<T>(w, factor);
    let mut dx = Tensor::zeros(s);
    let d = dx.data_mut();
    let gs = g.data();
    let mut k = 0;
    for p in 0..planes {
        let dst = &mut d[p * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let gv = gs[k];
                k += 1;
                let top = gv * (T::one() - fy);
                let bot = gv * fy;
                dst[y0 * w + x0] += top * (T::one() - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bot * (T::one() - fx);
                dst[y1 * w + x1] += bot * fx;
            }
        }
    }
    vec![(x, dx)]
}

pub(super) fn shift_backward<T: Real>(
    graph: &Graph<T>,
    x: Var,
    d: isize,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let _ = graph;
    vec![(x, shift_forward(g, -d).expect("shift grad"))]
}

pub(super) fn warp_backward<T: Real>(
    graph: &Graph<T>,
    x: Var,
    disp: Var,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let xt = graph.value(x);
    let dt = graph.value(disp);
    let [n, c, h, w] = xt.dims4("warp_width").expect("validated");
    let (xs, ds, gs) = (xt.data(), dt.data(), g.data());
    let mut dx = vec![T::zero(); xs.len()];
    let mut dd = vec![T::zero(); ds.len()];
    for ni in 0..n {
        for y in 0..h {
            let drow = (ni * h + y) * w;
            for ci in 0..c {
                let base = ((ni * c + ci) * h + y) * w;
                for xo in 0..w {
                    let pos = T::lit(xo as f64) - ds[drow + xo];
                    let (i0, i1, t, inside) = warp_tap(pos, w);
                    let gv = gs[base + xo];
                    dx[base + i0] += gv * (T::one() - t);
                    dx[base + i1] += gv * t;
                    if inside {
                        // d out / d disp = -(x[i1] - x[i0])
                        dd[drow + xo] -= gv * (xs[base + i1] - xs[base + i0]);
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(2);
    if graph.needs_grad(x) {
        out.push((x, Tensor::new(xt.shape().to_vec(), dx).expect("warp dx")));
    }
    if graph.needs_grad(disp) {
        out.push((disp, Tensor::new(dt.shape().to_vec(), dd).expect("warp dd")));
    }
    out
}
