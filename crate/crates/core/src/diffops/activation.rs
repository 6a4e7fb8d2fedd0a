use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::contract(
            "softmax",
            format!("axis {axis} out of range for rank {}", x.rank()),
        ));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut mx = T::neg_infinity();
            for k in 0..len {
                mx = mx.max(xs[at(k)]);
            }
            let mut sum = T::zero();
            for k in 0..len {
                let e = (xs[at(k)] - mx).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

impl<T: Real> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let out = relu(self.value(x));
        let n = out.numel() as u64;
        self.record(out, Op::Relu { x }, &[x], n)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(x), axis)?;
        let n = 4 * out.numel() as u64;
        Ok(self.record(out, Op::Softmax { x, axis }, &[x], n))
    }
}

pub(super) fn relu_backward<T: Real>(graph: &Graph<T>, x: Var, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
    let mut dx = g.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(graph.value(x).data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    vec![(x, dx)]
}

pub(super) fn softmax_backward<T: Real>(
    x: Var,
    y: &Tensor<T>,
    axis: usize,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (ys, gs) = (y.data(), g.data());
    let mut dx = vec![T::zero(); ys.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| ys[at(k)] * gs[at(k)]).sum();
            for k in 0..len {
                dx[at(k)] = ys[at(k)] * (gs[at(k)] - dot);
            }
        }
    }
    vec![(x, Tensor::new(y.shape().to_vec(), dx).expect("softmax grad"))]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f32>::new([3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_and_logistic() {
        let u = softmax(&Tensor::<f64>::zeros([3]), 0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let l = softmax(&Tensor::<f64>::new([2], vec![-1.0, 0.0]).unwrap(), 0).unwrap();
        assert!((l.data()[0] - 0.26894).abs() < 1e-5);
        assert!((l.data()[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_along_middle_axis() {
        let x = Tensor::<f64>::from_fn([2, 3, 4], |i| (i as f64 * 0.37).sin() * 5.0);
        let y = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| y.data()[(o * 3 + k) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(softmax(&x, 3).is_err());
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let x = Tensor::<f32>::new([2], vec![1000.0, -1000.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!(y.is_finite());
        assert_eq!(y.data()[0], 1.0);
    }
}
