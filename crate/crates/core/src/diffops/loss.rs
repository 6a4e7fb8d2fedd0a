//! Loss operators. Both reduce to means over the pixels that carry labels.

use log::warn;

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

impl<T: Real> Graph<T> {
    /// Mean smooth-L1 over pixels where `mask` is set; 0 when none are.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>, mask: &[bool]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "smooth_l1",
                "all",
                format!("{:?}", p.shape()),
                format!("{:?}", target.shape()),
            ));
        }
        if mask.len() != p.numel() {
            return Err(Error::shape("smooth_l1", "mask", p.numel(), mask.len()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut sum = T::zero();
        for ((&a, &b), &m) in p.data().iter().zip(target.data()).zip(mask) {
            if m {
                sum += smooth_l1_value(a - b);
            }
        }
        let value = if count == 0 {
            warn!("smooth_l1: no valid pixels, loss defined as 0");
            T::zero()
        } else {
            sum / T::lit(count as f64)
        };
        let flops = 4 * p.numel() as u64;
        Ok(self.record(
            Tensor::scalar(value),
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[pred],
            flops,
        ))
    }

    /// Per-sample class-weighted cross entropy, shape `[N]`.
    ///
    /// `logits` is `N×K×H×W`, `labels` holds `N·H·W` class ids and pixels
    /// labelled `ignore` do not contribute. Each entry is the mean over that
    /// sample's labelled pixels of `-weights[gt] * ln softmax(logits)[gt]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u8],
        weights: &[T],
        ignore: u8,
    ) -> Result<Var> {
        let lt = self.value(logits);
        let [n, k, h, w] = lt.dims4("cross_entropy")?;
        if weights.len() != k {
            return Err(Error::shape("cross_entropy", "weights", k, weights.len()));
        }
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::shape("cross_entropy", "labels", n * hw, labels.len()));
        }
        let ls = lt.data();
        let mut probs = vec![T::zero(); ls.len()];
        let mut losses = vec![T::zero(); n];
        let mut counts = vec![0usize; n];
        for ni in 0..n {
            let mut acc = T::zero();
            for p in 0..hw {
                let at = |c: usize| (ni * k + c) * hw + p;
                let mut mx = T::neg_infinity();
                for c in 0..k {
                    mx = mx.max(ls[at(c)]);
                }
                let mut sum = T::zero();
                for c in 0..k {
                    let e = (ls[at(c)] - mx).exp();
                    probs[at(c)] = e;
                    sum += e;
                }
                for c in 0..k {
                    probs[at(c)] = probs[at(c)] / sum;
                }
                let gt = labels[ni * hw + p];
                if gt == ignore {
                    continue;
                }
                let gt = gt as usize;
                if gt >= k {
                    return Err(Error::contract(
                        "cross_entropy",
                        format!("label {gt} out of range for {k} classes"),
                    ));
                }
                // log-softmax computed from logits for accuracy
                let log_p = ls[at(gt)] - mx - sum.ln();
                acc += -weights[gt] * log_p;
                counts[ni] += 1;
            }
            losses[ni] = if counts[ni] == 0 {
                warn!("cross_entropy: sample {ni} has no labelled pixels, loss defined as 0");
                T::zero()
            } else {
                acc / T::lit(counts[ni] as f64)
            };
        }
        let flops = 6 * ls.len() as u64;
        Ok(self.record(
            Tensor::new(vec![n], losses)?,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                weights: weights.to_vec(),
                probs,
                counts,
            },
            &[logits],
            flops,
        ))
    }
}

/// Smooth-L1 of a single residual: quadratic below 1, linear above.
pub fn smooth_l1_value<T: Real>(e: T) -> T {
    let a = e.abs();
    if a < T::one() {
        T::lit(0.5) * e * e
    } else {
        a - T::lit(0.5)
    }
}

fn smooth_l1_slope<T: Real>(e: T) -> T {
    if e.abs() < T::one() {
        e
    } else {
        e.signum()
    }
}

pub(super) fn smooth_l1_backward<T: Real>(
    graph: &Graph<T>,
    pred: Var,
    target: &[T],
    mask: &[bool],
    count: usize,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let p = graph.value(pred);
    let mut dp = Tensor::zeros(p.shape().to_vec());
    if count > 0 {
        let k = g.item() / T::lit(count as f64);
        for (((d, &a), &b), &m) in dp.data_mut().iter_mut().zip(p.data()).zip(target).zip(mask) {
            if m {
                *d = k * smooth_l1_slope(a - b);
            }
        }
    }
    vec![(pred, dp)]
}

#[allow(clippy::too_many_arguments)]
pub(super) fn cross_entropy_backward<T: Real>(
    graph: &Graph<T>,
    logits: Var,
    labels: &[u8],
    ignore: u8,
    weights: &[T],
    probs: &[T],
    counts: &[usize],
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let lt = graph.value(logits);
    let [n, k, h, w] = lt.dims4("cross_entropy").expect("validated");
    let hw = h * w;
    let mut d = vec![T::zero(); lt.numel()];
    for ni in 0..n {
        if counts[ni] == 0 {
            continue;
        }
        let scale = g.data()[ni] / T::lit(counts[ni] as f64);
        for p in 0..hw {
            let gt = labels[ni * hw + p];
            if gt == ignore {
                continue;
            }
            let gt = gt as usize;
            let wgt = weights[gt] * scale;
            for c in 0..k {
                let i = (ni * k + c) * hw + p;
                let hot = if c == gt { T::one() } else { T::zero() };
                d[i] = wgt * (probs[i] - hot);
            }
        }
    }
    vec![(logits, Tensor::new(lt.shape().to_vec(), d).expect("ce grad"))]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1_value(0.5f64), 0.125);
        assert_eq!(smooth_l1_value(1.0f64), 0.5);
        assert_eq!(smooth_l1_value(3.0f64), 2.5);
        assert_eq!(smooth_l1_value(-3.0f64), 2.5);
    }

    #[test]
    fn smooth_l1_is_c1_at_one() {
        let h = 1e-9;
        let below = (smooth_l1_value(1.0f64) - smooth_l1_value(1.0 - h)) / h;
        let above = (smooth_l1_value(1.0 + h) - smooth_l1_value(1.0f64)) / h;
        assert!((below - 1.0).abs() < 1e-6);
        assert!((above - 1.0).abs() < 1e-6);
        assert_eq!(smooth_l1_slope(1.0f64), 1.0);
        assert_eq!(smooth_l1_slope(1.0f64 - 1e-12), 1.0 - 1e-12);
    }

    #[test]
    fn masked_mean_skips_invalid() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::new([3], vec![0.5, 3.0, 100.0]).unwrap());
        let l = g
            .smooth_l1(p, &Tensor::zeros([3]), &[true, true, false])
            .unwrap();
        assert!((g.value(l).item() - (0.125 + 2.5) / 2.0).abs() < 1e-12);
        let none = g.smooth_l1(p, &Tensor::zeros([3]), &[false; 3]).unwrap();
        assert_eq!(g.value(none).item(), 0.0);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros([1, 4, 2, 2]));
        let l = g.cross_entropy(x, &[0, 1, 2, 3], &[1.0; 4], 255).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_near_zero() {
        let mut g = Graph::<f64>::new();
        let mut t = Tensor::zeros([1, 3, 1, 2]);
        t.data_mut()[0] = 20.0; // class 0 at pixel 0
        t.data_mut()[2 + 1] = 20.0; // class 1 at pixel 1
        let x = g.input(t);
        let l = g.cross_entropy(x, &[0, 1], &[1.0; 3], 255).unwrap();
        assert!(g.value(l).item() < 1e-3);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros([2, 2, 1, 2]));
        let l = g.cross_entropy(x, &[0, 255, 255, 255], &[1.0; 2], 255).unwrap();
        let v = g.value(l);
        assert!((v.data()[0] - 2f64.ln()).abs() < 1e-12);
        assert_eq!(v.data()[1], 0.0);
        assert!(g.cross_entropy(x, &[0, 7, 0, 0], &[1.0; 2], 255).is_err());
    }
}
