//! Differentiable operators and the reverse-mode tape that records them.
//!
//! A [`Graph`] is built fresh for every forward pass. Operators append nodes
//! holding their output value plus whatever they need for the backward sweep;
//! [`Graph::backward`] then walks the nodes in reverse and accumulates
//! gradients into every node that was marked as requiring one.
//!
//! Fixed conventions (the ones callers most often need to look up):
//!
//! | operator           | convention                                                        |
//! |--------------------|-------------------------------------------------------------------|
//! | `conv`             | explicit per-axis stride and zero padding, cross-correlation form |
//! | `max_pool_2x2`     | stride 2, ties resolve to the first element in row-major order    |
//! | `batch_norm`       | eps inside the square root, running stats use unbiased variance   |
//! | `upsample`         | bilinear, align-corners off, edge clamp                           |
//! | `shift_width`      | zero fill                                                         |
//! | `warp_width`       | linear interpolation at `x - disp`, clamp to border               |
//! | `distance_volume`  | channel-mean absolute difference, zero-filled shifts              |
//! | `soft_argmin`      | softmax over negated costs                                        |

mod activation;
mod basic;
mod conv;
pub mod exec;
mod gradcheck;
mod loss;
mod norm;
mod pool;
mod resample;
mod volume;

use std::collections::{BTreeMap, HashMap};

pub use activation::{relu, softmax};
pub use conv::{convolve, ConvGeom, ConvSpec};
pub use gradcheck::{grad_check, GradCheckReport, InputReport};
pub use loss::smooth_l1_value;
pub use norm::{batch_norm, BatchNormConfig};
pub use pool::max_pool_2x2;
pub use resample::{shift_width, upsample_bilinear, upsample_bilinear_2x, warp_width};
pub use volume::{distance_volume, soft_argmin};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Shift {
        x: Var,
        d: isize,
    },
    Warp {
        x: Var,
        disp: Var,
    },
    DistanceVolume {
        left: Var,
        right: Var,
        offsets: Vec<i32>,
    },
    SoftArgmin {
        cost: Var,
        offsets: Vec<T>,
        probs: Vec<T>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        ignore: u8,
        weights: Vec<T>,
        probs: Vec<T>,
        counts: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    MulConst {
        x: Var,
        c: Vec<T>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    Mean {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: Var,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv",
            Op::MaxPool { .. } => "max_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Upsample { .. } => "upsample",
            Op::Shift { .. } => "shift_width",
            Op::Warp { .. } => "warp_width",
            Op::DistanceVolume { .. } => "distance_volume",
            Op::SoftArgmin { .. } => "soft_argmin",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Scale { .. } => "scale",
            Op::MulConst { .. } => "mul_const",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Mean { .. } => "mean",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    name: String,
}

/// Operator counts and analytic FLOPs attributed to one pipeline stage.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageCounters {
    pub ops: BTreeMap<&'static str, usize>,
    pub flops: u64,
}

impl StageCounters {
    pub fn total_ops(&self) -> usize {
        self.ops.values().sum()
    }
}

/// Number of stage slots tracked by the instrumentation: slot 0 is the shared
/// encoder, slots 1..=3 the pyramid stages.
pub const STAGE_SLOTS: usize = 4;

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    scope: Vec<String>,
    scope_path: String,
    stage: usize,
    counters: [StageCounters; STAGE_SLOTS],
    training: bool,
    params: HashMap<usize, Var>,
    stat_updates: Vec<(usize, Tensor<T>)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph in evaluation mode (batch norm uses running statistics).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            scope: Vec::new(),
            scope_path: String::new(),
            stage: 0,
            counters: Default::default(),
            training: false,
            params: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn training() -> Self {
        Self {
            training: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn name(&self, v: Var) -> &str {
        &self.nodes[v.0].name
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
        self.scope_path = self.scope.join(".");
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
        self.scope_path = self.scope.join(".");
    }

    /// Attributes subsequent operators to `stage` (0 = shared, 1..=3).
    pub fn set_stage(&mut self, stage: usize) {
        assert!(stage < STAGE_SLOTS);
        self.stage = stage;
    }

    pub fn counters(&self) -> &[StageCounters; STAGE_SLOTS] {
        &self.counters
    }

    pub fn total_flops(&self) -> u64 {
        self.counters.iter().map(|c| c.flops).sum()
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false, 0)
    }

    /// An input that collects a gradient during [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true, 0)
    }

    /// Leaf for a model parameter identified by `key`. Repeated calls with the
    /// same key return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, key: usize, value: impl FnOnce() -> Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value(), Op::Leaf, trainable, 0);
        self.params.insert(key, v);
        v
    }

    /// Parameter keys and the graph nodes they were bound to.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&k, &v)| (k, v))
    }

    /// Queues a running-statistic replacement produced in training mode.
    pub(crate) fn queue_stat_update(&mut self, key: usize, value: Tensor<T>) {
        self.stat_updates.push((key, value));
    }

    pub fn take_stat_updates(&mut self) -> Vec<(usize, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Name of the first node (in execution order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.nodes
            .iter()
            .find(|n| !n.value.is_finite())
            .map(|n| n.name.as_str())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, flops: u64) -> Var {
        let kind = op.kind();
        if !matches!(op, Op::Leaf) {
            let c = &mut self.counters[self.stage];
            *c.ops.entry(kind).or_default() += 1;
            c.flops += flops;
        }
        let name = if self.scope_path.is_empty() {
            kind.to_string()
        } else {
            format!("{}.{kind}", self.scope_path)
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operator whose gradient requirement is inherited from `inputs`.
    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], flops: u64) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs, flops)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse sweep from a single-element `loss`. Leaf gradients remain
    /// readable through [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                "numel",
                1,
                self.nodes[loss.0].value.numel(),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::full(self.nodes[loss.0].value.shape().to_vec(), T::one());
        self.grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                self.grads[i] = None;
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            let contributions = self.node_backward(i, &g);
            for (v, t) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { x, w, b, geom } => conv::backward(self, *x, *w, *b, geom, g),
            Op::MaxPool { x, argmax } => pool::backward(self, *x, argmax, g),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => norm::backward(self, *x, *gamma, *beta, xhat, inv_std, *training, g),
            Op::Relu { x } => activation::relu_backward(self, *x, g),
            Op::Softmax { x, axis } => activation::softmax_backward(*x, out, *axis, g),
            Op::Upsample { x, factor } => resample::upsample_backward(self, *x, *factor, g),
            Op::Shift { x, d } => resample::shift_backward(self, *x, *d, g),
            Op::Warp { x, disp } => resample::warp_backward(self, *x, *disp, g),
            Op::DistanceVolume {
                left,
                right,
                offsets,
            } => volume::distance_backward(self, *left, *right, offsets, g),
            Op::SoftArgmin {
                cost,
                offsets,
                probs,
            } => volume::soft_argmin_backward(self, *cost, offsets, probs, out, g),
            Op::SmoothL1 {
                pred,
                target,
                mask,
                count,
            } => loss::smooth_l1_backward(self, *pred, target, mask, *count, g),
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                weights,
                probs,
                counts,
            } => loss::cross_entropy_backward(
                self, *logits, labels, *ignore, weights, probs, counts, g,
            ),
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub { a, b } => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Scale { x, k } => vec![(*x, g.map(|v| v * *k))],
            Op::MulConst { x, c } => {
                let mut t = g.clone();
                for (v, &k) in t.data_mut().iter_mut().zip(c) {
                    *v *= k;
                }
                vec![(*x, t)]
            }
            Op::WeightedSum { terms } => terms
                .iter()
                .map(|&(v, k)| (v, g.map(|gv| gv * k)))
                .collect(),
            Op::Mean { x } => {
                let xs = self.shape(*x).to_vec();
                let n = T::lit(self.value(*x).numel() as f64);
                vec![(*x, Tensor::full(xs, g.item() / n))]
            }
            Op::Concat { parts, axis } => basic::concat_backward(self, parts, *axis, g),
            Op::Narrow { x, axis, start } => basic::narrow_backward(self, *x, *axis, *start, g),
            Op::Reshape { x } => {
                let xs = self.shape(*x).to_vec();
                vec![(*x, g.clone().reshape(xs).expect("reshape grad"))]
            }
        }
    }
}
