//! Finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-3;

/// Largest input the checker accepts, in elements.
pub const MAX_INPUT_ELEMENTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    /// `max_j |analytic_j - numeric_j|` divided by the largest gradient
    /// magnitude of this input.
    pub max_rel_error: f64,
    pub probes: usize,
    /// Probes where the one-sided differences disagree, i.e. the function has
    /// a kink within one step (tied max-pool, ReLU at zero, ...). They are
    /// excluded from `max_rel_error`.
    pub non_differentiable: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn non_differentiable(&self) -> usize {
        self.inputs.iter().map(|r| r.non_differentiable).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Compares the reverse-mode gradient of `op` against central differences.
///
/// `op` is evaluated in a training-mode graph and must be pure. A non-scalar
/// output is reduced with fixed pseudo-random weights so every output element
/// participates.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    for t in inputs {
        if t.numel() > MAX_INPUT_ELEMENTS {
            return Err(Error::contract(
                "grad_check",
                format!("input has {} elements (max {MAX_INPUT_ELEMENTS})", t.numel()),
            ));
        }
    }
    let mut projection: Option<Tensor<f64>> = None;
    let mut eval = |inputs: &[Tensor<f64>], keep: bool| -> Result<(f64, Option<Graph<f64>>, Vec<Var>)> {
        let mut g = Graph::<f64>::training();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.input_with_grad(t.clone()))
            .collect();
        let y = op(&mut g, &vars)?;
        let w = projection
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                Tensor::from_fn(g.shape(y).to_vec(), |_| rng.random_range(0.5..1.5))
            })
            .clone();
        let weighted = g.mul_const(y, &w)?;
        let loss = g.mean(weighted);
        let v = g.value(loss).item();
        if keep {
            g.backward(loss)?;
            Ok((v, Some(g), vars))
        } else {
            Ok((v, None, vars))
        }
    };

    let (base, graph, vars) = eval(inputs, true)?;
    let graph = graph.expect("kept");
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let analytic = graph
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut numeric = vec![0.0; input.numel()];
        let mut kink = vec![false; input.numel()];
        let mut probe = inputs.to_vec();
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let (up, _, _) = eval(&probe, false)?;
            probe[i].data_mut()[j] = orig - STEP;
            let (down, _, _) = eval(&probe, false)?;
            probe[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * STEP);
            let fwd = (up - base) / STEP;
            let bwd = (base - down) / STEP;
            kink[j] = (fwd - bwd).abs() > 0.05 * fwd.abs().max(bwd.abs()).max(1e-9)
                && (fwd - bwd).abs() > 1e-6;
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let mut max_err = 0f64;
        for j in 0..input.numel() {
            if kink[j] {
                continue;
            }
            max_err = max_err.max((analytic.data()[j] - numeric[j]).abs() / scale);
        }
        reports.push(InputReport {
            max_rel_error: max_err,
            probes: input.numel(),
            non_differentiable: kink.iter().filter(|&&k| k).count(),
        });
    }
    Ok(GradCheckReport {
        tolerance,
        inputs: reports,
    })
}
