use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    /// Added to the variance inside the square root.
    pub eps: f64,
    /// Weight of the new batch statistic in the running average.
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

struct Forward<T> {
    out: Tensor<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    running: Option<(Tensor<T>, Tensor<T>)>,
}

#[allow(clippy::too_many_arguments)]
fn forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    training: bool,
    cfg: BatchNormConfig,
) -> Result<Forward<T>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("batch_norm", "rank", ">= 2", s.len()));
    }
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    for (what, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.numel() != c {
            return Err(Error::Shape {
                op: "batch_norm",
                axis: "channels",
                expected: format!("{c} ({what})"),
                got: t.numel().to_string(),
            });
        }
    }
    let m = n * inner;
    if m == 0 {
        return Err(Error::contract("batch_norm", "channel with zero elements"));
    }
    let xs = x.data();
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    if training {
        for ni in 0..n {
            for (ci, mu) in mean.iter_mut().enumerate() {
                let p = &xs[(ni * c + ci) * inner..][..inner];
                *mu += p.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        for mu in &mut mean {
            *mu /= m as f64;
        }
        for ni in 0..n {
            for ci in 0..c {
                let p = &xs[(ni * c + ci) * inner..][..inner];
                let mu = mean[ci];
                var[ci] += p
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= m as f64;
        }
    } else {
        for ci in 0..c {
            mean[ci] = running_mean.data()[ci].as_f64();
            var[ci] = running_var.data()[ci].as_f64();
        }
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::lit(1.0 / (v + cfg.eps).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&v| T::lit(v)).collect();
    let mut out = vec![T::zero(); xs.len()];
    let mut xhat = vec![T::zero(); xs.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            let (mu, is) = (mean_t[ci], inv_std[ci]);
            let (ga, be) = (gamma.data()[ci], beta.data()[ci]);
            for i in base..base + inner {
                let h = (xs[i] - mu) * is;
                xhat[i] = h;
                out[i] = ga * h + be;
            }
        }
    }
    let running = training.then(|| {
        let mom = cfg.momentum;
        let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
        let rm = Tensor::from_fn([c], |i| {
            T::lit((1.0 - mom) * running_mean.data()[i].as_f64() + mom * mean[i])
        });
        let rv = Tensor::from_fn([c], |i| {
            T::lit((1.0 - mom) * running_var.data()[i].as_f64() + mom * var[i] * unbias)
        });
        (rm, rv)
    });
    Ok(Forward {
        out: Tensor::new(s.to_vec(), out)?,
        xhat,
        inv_std,
        running,
    })
}

/// Batch normalization over axis 1. In training mode the batch statistics are
/// used and the updated running statistics are returned alongside the output.
#[allow(clippy::type_complexity)]
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    training: bool,
    cfg: BatchNormConfig,
) -> Result<(Tensor<T>, Option<(Tensor<T>, Tensor<T>)>)> {
    let f = forward(x, gamma, beta, running_mean, running_var, training, cfg)?;
    Ok((f.out, f.running))
}

impl<T: Real> Graph<T> {
    /// Records batch normalization; the mode follows [`Graph::is_training`].
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        cfg: BatchNormConfig,
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>)> {
        let training = self.is_training();
        let f = forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            training,
            cfg,
        )?;
        let flops = 4 * f.out.numel() as u64;
        let v = self.record(
            f.out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: f.xhat,
                inv_std: f.inv_std,
                training,
            },
            &[x, gamma, beta],
            flops,
        );
        Ok((v, f.running))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<T: Real>(
    graph: &Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    training: bool,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let s = graph.shape(x).to_vec();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let m = T::lit((n * inner) as f64);
    let gs = g.data();
    let gam = graph.value(gamma).data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            for i in base..base + inner {
                dgamma[ci] += gs[i] * xhat[i];
                dbeta[ci] += gs[i];
            }
        }
    }
    let mut out = Vec::with_capacity(3);
    if graph.needs_grad(x) {
        let mut dx = vec![T::zero(); gs.len()];
        for ci in 0..c {
            let k = gam[ci] * inv_std[ci];
            if training {
                // dxhat = g * gamma; sums over the channel's batch slice.
                let (sum_g, sum_gx) = (dbeta[ci], dgamma[ci]);
                for ni in 0..n {
                    let base = (ni * c + ci) * inner;
                    for i in base..base + inner {
                        dx[i] = k / m * (m * gs[i] - sum_g - xhat[i] * sum_gx);
                    }
                }
            } else {
                for ni in 0..n {
                    let base = (ni * c + ci) * inner;
                    for i in base..base + inner {
                        dx[i] = k * gs[i];
                    }
                }
            }
        }
        out.push((x, Tensor::new(s, dx).expect("bn dx")));
    }
    out.push((gamma, Tensor::new(vec![c], dgamma).expect("dgamma")));
    out.push((beta, Tensor::new(vec![c], dbeta).expect("dbeta")));
    out
}
