//! Direct 2D/3D convolution. 2D tensors are handled as 3D with unit depth.

use super::exec::for_each_plane;
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Kernel extents, strides and zero padding per spatial axis (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Square 2D kernel with symmetric padding.
    pub fn d2(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [1, k, k],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    /// Cubic 3D kernel, unit stride.
    pub fn d3(k: usize, pad: usize) -> Self {
        Self {
            kernel: [k, k, k],
            stride: [1, 1, 1],
            pad: [pad, pad, pad],
        }
    }

    pub fn is_2d(&self) -> bool {
        self.kernel[0] == 1 && self.stride[0] == 1 && self.pad[0] == 0
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extents for spatial input extents `[d, h, w]`.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        const AXES: [&str; 3] = ["depth", "height", "width"];
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return Err(Error::shape(
                    "conv",
                    AXES[a],
                    format!(">= {} after padding", self.kernel[a]),
                    padded,
                ));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// A convolution layer with concrete weights, for use outside a [`Graph`].
#[derive(Clone, Debug)]
pub struct ConvSpec<T: Real = f32> {
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out × in × kd × kh × kw`, or `out × in × kh × kw` for 2D layers.
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvSpec<T> {
    pub fn new(geom: ConvGeom, weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ws = weights.shape();
        let (o, c) = (ws[0], *ws.get(1).unwrap_or(&0));
        let expected = o * c * geom.kernel_volume();
        if weights.numel() != expected || ws.len() < 4 {
            return Err(Error::shape(
                "ConvSpec",
                "weights",
                format!("out x in x {:?}", geom.kernel),
                format!("{ws:?}"),
            ));
        }
        if bias.numel() != o {
            return Err(Error::shape("ConvSpec", "bias", o, bias.numel()));
        }
        Ok(Self {
            geom,
            in_channels: c,
            out_channels: o,
            weights,
            bias,
        })
    }
}

/// Evaluates a convolution without recording it.
pub fn convolve<T: Real>(x: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let (out, _) = forward(x, &spec.weights, Some(&spec.bias), &spec.geom)?;
    Ok(out)
}

struct Dims {
    n: usize,
    c: usize,
    o: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Dims {
    fn iplane(&self) -> usize {
        self.input.iter().product()
    }
    fn oplane(&self) -> usize {
        self.output.iter().product()
    }
}

fn dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, geom: &ConvGeom) -> Result<Dims> {
    let xs = x.shape();
    let ws = w.shape();
    let (n, c, input) = match *xs {
        [n, c, h, w] if geom.is_2d() => (n, c, [1, h, w]),
        [n, c, d, h, w] => (n, c, [d, h, w]),
        _ => {
            return Err(Error::shape(
                "conv",
                "rank",
                if geom.is_2d() { "4 or 5" } else { "5" },
                format!("{xs:?}"),
            ))
        }
    };
    let (o, wc, kernel) = match *ws {
        [o, wc, kh, kw] => (o, wc, [1, kh, kw]),
        [o, wc, kd, kh, kw] => (o, wc, [kd, kh, kw]),
        _ => return Err(Error::shape("conv", "weight rank", "4 or 5", format!("{ws:?}"))),
    };
    if kernel != geom.kernel {
        return Err(Error::shape(
            "conv",
            "kernel",
            format!("{:?}", geom.kernel),
            format!("{kernel:?}"),
        ));
    }
    if wc != c {
        return Err(Error::shape("conv", "channels", wc, c));
    }
    let output = geom.output_extents(input)?;
    Ok(Dims {
        n,
        c,
        o,
        input,
        output,
    })
}

/// Input index range `[lo, hi)` of output positions touching valid input for
/// kernel tap `k`, stride 1.
#[inline]
fn valid_range(k: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (in_len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

#[inline]
fn in_index(o: usize, stride: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
    let p = o * stride + k;
    if p < pad || p - pad >= len {
        None
    } else {
        Some(p - pad)
    }
}

pub(super) fn forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: &ConvGeom,
) -> Result<(Tensor<T>, u64)> {
    let d = dims(x, w, geom)?;
    if let Some(b) = b {
        if b.numel() != d.o {
            return Err(Error::shape("conv", "bias", d.o, b.numel()));
        }
    }
    let (iplane, oplane) = (d.iplane(), d.oplane());
    let [id, ih, iw] = d.input;
    let [od, oh, ow] = d.output;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let kvol = geom.kernel_volume();
    let macs = d.n * d.o * oplane * d.c * kvol;
    let xs = x.data();
    let ws = w.data();
    let bs = b.map(|b| b.data());
    let mut out = vec![T::zero(); d.n * d.o * oplane];
    for_each_plane(&mut out, oplane, macs, |idx, plane| {
        let (ni, oi) = (idx / d.o, idx % d.o);
        if let Some(bs) = bs {
            plane.fill(bs[oi]);
        }
        for ci in 0..d.c {
            let xin = &xs[(ni * d.c + ci) * iplane..][..iplane];
            let wk = &ws[(oi * d.c + ci) * kvol..][..kvol];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wk[(kz * kh + ky) * kw + kx];
                        let (lo, hi) = valid_range(kx, pw, iw, ow);
                        for oz in 0..od {
                            let Some(iz) = in_index(oz, sd, kz, pd, id) else {
                                continue;
                            };
                            for oy in 0..oh {
                                let Some(iy) = in_index(oy, sh, ky, ph, ih) else {
                                    continue;
                                };
                                let orow = &mut plane[(oz * oh + oy) * ow..][..ow];
                                let irow = &xin[(iz * ih + iy) * iw..][..iw];
                                if sw == 1 {
                                    let shift = kx as isize - pw as isize;
                                    for ox in lo..hi {
                                        orow[ox] += wv * irow[(ox as isize + shift) as usize];
                                    }
                                } else {
                                    for (ox, o) in orow.iter_mut().enumerate() {
                                        if let Some(ix) = in_index(ox, sw, kx, pw, iw) {
                                            *o += wv * irow[ix];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    let mut shape = vec![d.n, d.o];
    if x.rank() == 5 {
        shape.extend_from_slice(&d.output);
    } else {
        shape.extend_from_slice(&d.output[1..]);
    }
    Ok((Tensor::new(shape, out)?, 2 * macs as u64))
}

impl<T: Real> Graph<T> {
    /// Records a convolution. `x` is `N×C×H×W` (2D geometry) or `N×C×D×H×W`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (out, flops) = forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(out, Op::Conv { x, w, b, geom }, &inputs, flops))
    }
}

pub(super) fn backward<T: Real>(
    graph: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeom,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let xt = graph.value(x);
    let wt = graph.value(w);
    let d = dims(xt, wt, geom).expect("conv dims validated in forward");
    let (iplane, oplane) = (d.iplane(), d.oplane());
    let [id, ih, iw] = d.input;
    let [od, oh, ow] = d.output;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let kvol = geom.kernel_volume();
    let macs = d.n * d.o * oplane * d.c * kvol;
    let xs = xt.data();
    let ws = wt.data();
    let gs = g.data();
    let mut out = Vec::new();

    if graph.needs_grad(w) {
        let mut dw = vec![T::zero(); wt.numel()];
        for_each_plane(&mut dw, d.c * kvol, macs, |oi, dwo| {
            for ni in 0..d.n {
                let gp = &gs[(ni * d.o + oi) * oplane..][..oplane];
                for ci in 0..d.c {
                    let xin = &xs[(ni * d.c + ci) * iplane..][..iplane];
                    for kz in 0..kd {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let (lo, hi) = valid_range(kx, pw, iw, ow);
                                let mut acc = T::zero();
                                for oz in 0..od {
                                    let Some(iz) = in_index(oz, sd, kz, pd, id) else {
                                        continue;
                                    };
                                    for oy in 0..oh {
                                        let Some(iy) = in_index(oy, sh, ky, ph, ih) else {
                                            continue;
                                        };
                                        let grow = &gp[(oz * oh + oy) * ow..][..ow];
                                        let irow = &xin[(iz * ih + iy) * iw..][..iw];
                                        if sw == 1 {
                                            let shift = kx as isize - pw as isize;
                                            for ox in lo..hi {
                                                acc += grow[ox]
                                                    * irow[(ox as isize + shift) as usize];
                                            }
                                        } else {
                                            for (ox, &gv) in grow.iter().enumerate() {
                                                if let Some(ix) = in_index(ox, sw, kx, pw, iw) {
                                                    acc += gv * irow[ix];
                                                }
                                            }
                                        }
                                    }
                                }
                                dwo[ci * kvol + (kz * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        });
        out.push((w, Tensor::new(wt.shape().to_vec(), dw).expect("dw")));
    }

    if let Some(b) = b {
        if graph.needs_grad(b) {
            let mut db = vec![T::zero(); d.o];
            for ni in 0..d.n {
                for (oi, acc) in db.iter_mut().enumerate() {
                    *acc += gs[(ni * d.o + oi) * oplane..][..oplane]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
            }
            out.push((b, Tensor::new(vec![d.o], db).expect("db")));
        }
    }

    if graph.needs_grad(x) {
        let mut dx = vec![T::zero(); xt.numel()];
        for_each_plane(&mut dx, iplane, macs, |idx, dxp| {
            let (ni, ci) = (idx / d.c, idx % d.c);
            for oi in 0..d.o {
                let gp = &gs[(ni * d.o + oi) * oplane..][..oplane];
                let wk = &ws[(oi * d.c + ci) * kvol..][..kvol];
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wk[(kz * kh + ky) * kw + kx];
                            let (lo, hi) = valid_range(kx, pw, iw, ow);
                            for oz in 0..od {
                                let Some(iz) = in_index(oz, sd, kz, pd, id) else {
                                    continue;
                                };
                                for oy in 0..oh {
                                    let Some(iy) = in_index(oy, sh, ky, ph, ih) else {
                                        continue;
                                    };
                                    let grow = &gp[(oz * oh + oy) * ow..][..ow];
                                    let drow = &mut dxp[(iz * ih + iy) * iw..][..iw];
                                    if sw == 1 {
                                        let shift = kx as isize - pw as isize;
                                        for ox in lo..hi {
                                            drow[(ox as isize + shift) as usize] += wv * grow[ox];
                                        }
                                    } else {
                                        for (ox, &gv) in grow.iter().enumerate() {
                                            if let Some(ix) = in_index(ox, sw, kx, pw, iw) {
                                                drow[ix] += wv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        out.push((x, Tensor::new(xt.shape().to_vec(), dx).expect("dx")));
    }
    out
}
