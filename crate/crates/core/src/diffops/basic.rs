//! Structural and elementwise glue operators.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

impl<T: Real> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                "all",
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let n = out.numel() as u64;
        Ok(self.record(out, Op::Add { a, b }, &[a, b], n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        let n = out.numel() as u64;
        Ok(self.record(out, Op::Sub { a, b }, &[a, b], n))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v * k);
        let n = out.numel() as u64;
        self.record(out, Op::Scale { x, k }, &[x], n)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape(
                "mul_const",
                "all",
                format!("{:?}", self.shape(x)),
                format!("{:?}", c.shape()),
            ));
        }
        let mut out = self.value(x).clone();
        for (o, &k) in out.data_mut().iter_mut().zip(c.data()) {
            *o *= k;
        }
        let n = out.numel() as u64;
        Ok(self.record(
            out,
            Op::MulConst {
                x,
                c: c.data().to_vec(),
            },
            &[x],
            n,
        ))
    }

    /// `sum_i k_i * v_i` over same-shaped operands, evaluated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::contract("weighted_sum", "no terms"))?;
        for &(v, _) in terms {
            self.same_shape("weighted_sum", first, v)?;
        }
        let mut out = Tensor::zeros(self.shape(first).to_vec());
        for &(v, k) in terms {
            for (o, &x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += k * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let n = (out.numel() * terms.len() * 2) as u64;
        Ok(self.record(
            out,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            &vars,
            n,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        let n = v.numel() as u64;
        self.record(Tensor::scalar(m), Op::Mean { x }, &[x], n)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    "non-concat",
                    format!("{base:?}"),
                    format!("{s:?}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.record(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
            0,
        ))
    }

    /// Selects `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::contract(
                "narrow",
                format!("range {start}..{} invalid for shape {s:?} axis {axis}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, Op::Narrow { x, axis, start }, &[x], 0))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.record(out, Op::Reshape { x }, &[x], 0))
    }
}

pub(super) fn concat_backward<T: Real>(
    g_: &Graph<T>,
    parts: &[Var],
    axis: usize,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let s = g.shape();
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let total = s[axis];
    let mut out = Vec::with_capacity(parts.len());
    let mut offset = 0;
    for &p in parts {
        let ps = g_.shape(p).to_vec();
        let len = ps[axis] * inner;
        if g_.needs_grad(p) {
            let mut data = Vec::with_capacity(outer * len);
            for o in 0..outer {
                let base = o * total * inner + offset;
                data.extend_from_slice(&g.data()[base..base + len]);
            }
            out.push((p, Tensor::new(ps, data).expect("concat grad")));
        }
        offset += len;
    }
    out
}

pub(super) fn narrow_backward<T: Real>(
    g_: &Graph<T>,
    x: Var,
    axis: usize,
    start: usize,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let s = g_.shape(x).to_vec();
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let len = g.shape()[axis];
    let mut dx = Tensor::zeros(s.clone());
    for o in 0..outer {
        let dst = (o * s[axis] + start) * inner;
        let src = o * len * inner;
        dx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    vec![(x, dx)]
}
