use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// 2×2 max pooling with stride 2 over the last two axes. Returns the pooled
/// tensor and, per output element, the flat input index that won.
fn forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(Error::shape("max_pool_2x2", "rank", ">= 3", s.len()));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h % 2 != 0 {
        return Err(Error::shape("max_pool_2x2", "height", "even extent", h));
    }
    if w % 2 != 0 {
        return Err(Error::shape("max_pool_2x2", "width", "even extent", w));
    }
    let planes: usize = s[..s.len() - 2].iter().product();
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if xs[i] > xs[best] {
                        best = i;
                    }
                }
                out.push(xs[best]);
                arg.push(best);
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok((Tensor::new(shape, out)?, arg))
}

pub fn max_pool_2x2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    forward(x).map(|(t, _)| t)
}

impl<T: Real> Graph<T> {
    pub fn max_pool_2x2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = forward(self.value(x))?;
        let flops = 3 * out.numel() as u64;
        Ok(self.record(out, Op::MaxPool { x, argmax }, &[x], flops))
    }
}

pub(super) fn backward<T: Real>(
    graph: &Graph<T>,
    x: Var,
    argmax: &[usize],
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let mut dx = Tensor::zeros(graph.shape(x).to_vec());
    let d = dx.data_mut();
    for (&i, &gv) in argmax.iter().zip(g.data()) {
        d[i] += gv;
    }
    vec![(x, dx)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn picks_window_max() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max_pool_2x2(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f32>::full([2, 3, 4, 6], 2.5);
        let y = max_pool_2x2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn matches_window_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::from_fn([1, 1, 8, 8], |_| rng.random_range(-5.0..5.0));
        let y = max_pool_2x2(&x).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(2 * oy + dy) * 8 + 2 * ox + dx]);
                    }
                }
                assert_eq!(y.data()[oy * 4 + ox], m);
            }
        }
    }

    #[test]
    fn odd_extent_is_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 3, 4]);
        let err = max_pool_2x2(&x).unwrap_err().to_string();
        assert!(err.contains("height"));
    }

    #[test]
    fn gradient_routes_to_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.input_with_grad(
            Tensor::new([1, 1, 2, 2], vec![1.0, 5.0, 3.0, 4.0]).unwrap(),
        );
        let y = g.max_pool_2x2(x).unwrap();
        let l = g.mean(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
