//! Matching-cost volumes and the soft-argmin readout.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn distance_forward<T: Real>(
    left: &Tensor<T>,
    right: &Tensor<T>,
    offsets: &[i32],
) -> Result<Tensor<T>> {
    let [n, c, h, w] = left.dims4("distance_volume")?;
    if right.shape() != left.shape() {
        let rs = right.dims4("distance_volume")?;
        for (axis, (a, b)) in ["batch", "channels", "height", "width"]
            .iter()
            .zip([n, c, h, w].iter().zip(rs))
        {
            if *a != b {
                return Err(Error::shape("distance_volume", axis, a, b));
            }
        }
    }
    if offsets.is_empty() {
        return Err(Error::contract("distance_volume", "offset list is empty"));
    }
    let d = offsets.len();
    let (ls, rs) = (left.data(), right.data());
    let inv_c = T::lit(1.0 / c as f64);
    let mut out = vec![T::zero(); n * d * h * w];
    for ni in 0..n {
        for (di, &off) in offsets.iter().enumerate() {
            let plane = &mut out[(ni * d + di) * h * w..][..h * w];
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for y in 0..h {
                    let lrow = &ls[base + y * w..][..w];
                    let rrow = &rs[base + y * w..][..w];
                    let orow = &mut plane[y * w..][..w];
                    for x in 0..w {
                        let xr = x as i64 - off as i64;
                        let r = if xr >= 0 && (xr as usize) < w {
                            rrow[xr as usize]
                        } else {
                            T::zero()
                        };
                        orow[x] += (lrow[x] - r).abs();
                    }
                }
            }
            for v in plane.iter_mut() {
                *v *= inv_c;
            }
        }
    }
    Tensor::new(vec![n, 1, d, h, w], out)
}

/// Distance-based cost volume:
/// `cost[n, 0, k, y, x] = mean_c |left[n, c, y, x] - right[n, c, y, x - offsets[k]]|`,
/// with right features outside the row taken as zero.
pub fn distance_volume<T: Real>(
    left: &Tensor<T>,
    right: &Tensor<T>,
    offsets: &[i32],
) -> Result<Tensor<T>> {
    distance_forward(left, right, offsets)
}

/// Accepts `N×D×H×W` or `N×1×D×H×W`; returns `(n, d, h, w)`.
fn cost_dims<T: Real>(cost: &Tensor<T>, offsets: usize) -> Result<[usize; 4]> {
    let dims = match *cost.shape() {
        [n, d, h, w] => [n, d, h, w],
        [n, 1, d, h, w] => [n, d, h, w],
        _ => {
            return Err(Error::shape(
                "soft_argmin",
                "rank",
                "N x D x H x W or N x 1 x D x H x W",
                format!("{:?}", cost.shape()),
            ))
        }
    };
    if dims[1] != offsets {
        return Err(Error::shape("soft_argmin", "hypotheses", offsets, dims[1]));
    }
    Ok(dims)
}

fn soft_argmin_forward<T: Real>(cost: &Tensor<T>, offsets: &[T]) -> Result<(Tensor<T>, Vec<T>)> {
    let [n, d, h, w] = cost_dims(cost, offsets.len())?;
    let hw = h * w;
    let cs = cost.data();
    let mut probs = vec![T::zero(); cs.len()];
    let mut out = vec![T::zero(); n * hw];
    for ni in 0..n {
        let base = ni * d * hw;
        for p in 0..hw {
            let at = |k: usize| base + k * hw + p;
            let mut mx = T::neg_infinity();
            for k in 0..d {
                mx = mx.max(-cs[at(k)]);
            }
            let mut sum = T::zero();
            for k in 0..d {
                let e = (-cs[at(k)] - mx).exp();
                probs[at(k)] = e;
                sum += e;
            }
            let mut acc = T::zero();
            for (k, &o) in offsets.iter().enumerate() {
                let pk = probs[at(k)] / sum;
                probs[at(k)] = pk;
                acc += pk * o;
            }
            out[ni * hw + p] = acc;
        }
    }
    Ok((Tensor::new(vec![n, 1, h, w], out)?, probs))
}

/// Expected offset under `softmax(-cost)` along the hypothesis axis.
pub fn soft_argmin<T: Real>(cost: &Tensor<T>, offsets: &[T]) -> Result<Tensor<T>> {
    soft_argmin_forward(cost, offsets).map(|(t, _)| t)
}

impl<T: Real> Graph<T> {
    pub fn distance_volume(&mut self, left: Var, right: Var, offsets: &[i32]) -> Result<Var> {
        let out = distance_forward(self.value(left), self.value(right), offsets)?;
        let flops = 3 * (out.numel() * self.shape(left)[1]) as u64;
        Ok(self.record(
            out,
            Op::DistanceVolume {
                left,
                right,
                offsets: offsets.to_vec(),
            },
            &[left, right],
            flops,
        ))
    }

    pub fn soft_argmin(&mut self, cost: Var, offsets: &[T]) -> Result<Var> {
        let (out, probs) = soft_argmin_forward(self.value(cost), offsets)?;
        let flops = 5 * self.value(cost).numel() as u64;
        Ok(self.record(
            out,
            Op::SoftArgmin {
                cost,
                offsets: offsets.to_vec(),
                probs,
            },
            &[cost],
            flops,
        ))
    }
}

pub(super) fn distance_backward<T: Real>(
    graph: &Graph<T>,
    left: Var,
    right: Var,
    offsets: &[i32],
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let lt = graph.value(left);
    let rt = graph.value(right);
    let [n, c, h, w] = lt.dims4("distance_volume").expect("validated");
    let d = offsets.len();
    let (ls, rs, gs) = (lt.data(), rt.data(), g.data());
    let inv_c = T::lit(1.0 / c as f64);
    let mut dl = vec![T::zero(); ls.len()];
    let mut dr = vec![T::zero(); rs.len()];
    for ni in 0..n {
        for (di, &off) in offsets.iter().enumerate() {
            let gp = &gs[(ni * d + di) * h * w..][..h * w];
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for y in 0..h {
                    for x in 0..w {
                        let gv = gp[y * w + x] * inv_c;
                        let xr = x as i64 - off as i64;
                        let inside = xr >= 0 && (xr as usize) < w;
                        let r = if inside {
                            rs[base + y * w + xr as usize]
                        } else {
                            T::zero()
                        };
                        let diff = ls[base + y * w + x] - r;
                        let s = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        dl[base + y * w + x] += gv * s;
                        if inside {
                            dr[base + y * w + xr as usize] -= gv * s;
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(2);
    if graph.needs_grad(left) {
        out.push((left, Tensor::new(lt.shape().to_vec(), dl).expect("dl")));
    }
    if graph.needs_grad(right) {
        out.push((right, Tensor::new(rt.shape().to_vec(), dr).expect("dr")));
    }
    out
}

pub(super) fn soft_argmin_backward<T: Real>(
    graph: &Graph<T>,
    cost: Var,
    offsets: &[T],
    probs: &[T],
    out: &Tensor<T>,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let ct = graph.value(cost);
    let [n, d, h, w] = cost_dims(ct, offsets.len()).expect("validated");
    let hw = h * w;
    let (os, gs) = (out.data(), g.data());
    let mut dc = vec![T::zero(); ct.numel()];
    for ni in 0..n {
        for p in 0..hw {
            let mean = os[ni * hw + p];
            let gv = gs[ni * hw + p];
            for (k, &o) in offsets.iter().enumerate() {
                let i = (ni * d + k) * hw + p;
                // d/dcost_k of sum_j o_j softmax(-cost)_j
                dc[i] = -gv * probs[i] * (o - mean);
            }
        }
    }
    vec![(cost, Tensor::new(ct.shape().to_vec(), dc).expect("dc"))]
}
