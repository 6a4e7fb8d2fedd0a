//! Multi-task training objective.
//!
//! ```text
//! L = Σ_stage W_st · (W_d·L_d + W_s·L_s + W_dr·L_dr)
//! ```
//!
//! `L_d`/`L_dr` are masked smooth-L1 losses on the decoder and refined
//! disparities, `L_s` the class-weighted cross entropy. Supervision happens at
//! each stage's own resolution against nearest-neighbour downsampled ground
//! truth, with disparities divided by the downsampling factor.

use log::warn;

use crate::diffops::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::ForwardOutputs;
use crate::stage::Stage;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub stage: [f64; 3],
    pub disparity: f64,
    pub semantic: f64,
    pub refined: f64,
    /// Coarse-annotation reweighting strength.
    pub gamma: f64,
    /// Class-weight variance parameter.
    pub k: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            stage: [0.25, 0.5, 1.0],
            disparity: 1.0,
            semantic: 2.0,
            refined: 2.0,
            gamma: 0.1,
            k: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.stage[0],
            self.stage[1],
            self.stage[2],
            self.disparity,
            self.semantic,
            self.refined,
            self.gamma,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || !self.k.is_finite() {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Sub-loss values of one stage; absent branches are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageLosses {
    pub disparity: f64,
    pub semantic: f64,
    pub refined: f64,
}

/// Weighted sum over the stages present in `stage_losses`.
pub fn total_loss(stage_losses: &[(Stage, StageLosses)], w: &LossWeights) -> f64 {
    stage_losses
        .iter()
        .map(|(s, l)| {
            w.stage[s.index()]
                * (w.disparity * l.disparity + w.semantic * l.semantic + w.refined * l.refined)
        })
        .sum()
}

/// Per-class pixel probabilities over a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub probs: Vec<f64>,
}

impl ClassStats {
    /// Frequencies of each class among all pixels, unlabelled ones included
    /// in the denominator.
    pub fn from_labels<'a>(
        maps: impl IntoIterator<Item = &'a [u8]>,
        n_classes: usize,
        ignore: u8,
    ) -> Result<Self> {
        let mut counts = vec![0u64; n_classes];
        let mut total = 0u64;
        for m in maps {
            for &id in m {
                total += 1;
                if id == ignore {
                    continue;
                }
                let slot = counts.get_mut(id as usize).ok_or_else(|| {
                    Error::contract(
                        "ClassStats",
                        format!("class id {id} out of range for {n_classes} classes"),
                    )
                })?;
                *slot += 1;
            }
        }
        if total == 0 {
            return Err(Error::contract("ClassStats", "no pixels"));
        }
        Ok(Self {
            probs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        })
    }
}

/// `W_j = N / (ln(P_j + k) · Σ_i 1/ln(P_i + k))`.
pub fn class_weights(stats: &ClassStats, k: f64) -> Result<Vec<f64>> {
    let n = stats.probs.len();
    if n == 0 {
        return Err(Error::contract("class_weights", "no classes"));
    }
    let mut logs = Vec::with_capacity(n);
    for (j, &p) in stats.probs.iter().enumerate() {
        let l = (p + k).ln();
        if !(l > 0.0) {
            return Err(Error::contract(
                "class_weights",
                format!("class {j}: ln(P + k) = ln({}) is not positive", p + k),
            ));
        }
        logs.push(l);
    }
    let inv_sum: f64 = logs.iter().map(|l| 1.0 / l).sum();
    Ok(logs.iter().map(|l| n as f64 / (l * inv_sum)).collect())
}

/// Scale factor `1 + γ·A_unlab / (A_tot − A_unlab)`.
pub fn coarse_factor(a_unlab: f64, a_tot: f64, gamma: f64) -> Result<f64> {
    if !(0.0..a_tot).contains(&a_unlab) {
        return Err(Error::contract(
            "coarse_reweight",
            format!("unlabelled area {a_unlab} must lie in [0, {a_tot})"),
        ));
    }
    Ok(1.0 + gamma * a_unlab / (a_tot - a_unlab))
}

pub fn coarse_reweight(loss: f64, a_unlab: f64, a_tot: f64, gamma: f64) -> Result<f64> {
    Ok(loss * coarse_factor(a_unlab, a_tot, gamma)?)
}

/// Masked mean smooth-L1 between `pred` and `gt`.
pub fn smooth_l1<T: Real>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>, valid: &[bool]) -> Result<Var> {
    g.smooth_l1(pred, gt, valid)
}

/// Batch mean of per-sample class-weighted cross entropy, each sample scaled
/// by its coarse-annotation factor. Fully unlabelled samples are skipped.
pub fn weighted_cross_entropy<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    gt: &[u8],
    weights: &[f64],
    ignore: u8,
    gamma: f64,
) -> Result<Var> {
    let n = g.shape(logits)[0];
    let wt: Vec<T> = weights.iter().map(|&w| T::lit(w)).collect();
    let per_sample = g.cross_entropy(logits, gt, &wt, ignore)?;
    let hw = gt.len() / n;
    let mut factors = vec![0.0; n];
    let mut labelled = 0;
    for (i, f) in factors.iter_mut().enumerate() {
        let unlab = gt[i * hw..][..hw].iter().filter(|&&c| c == ignore).count();
        if unlab < hw {
            *f = coarse_factor(unlab as f64, hw as f64, gamma)?;
            labelled += 1;
        }
    }
    if labelled == 0 {
        warn!("weighted_cross_entropy: batch has no labelled pixels, loss defined as 0");
    } else {
        // mean() divides by n; average over labelled samples instead
        let k = n as f64 / labelled as f64;
        factors.iter_mut().for_each(|f| *f *= k);
    }
    let scale = Tensor::new(vec![n], factors.into_iter().map(T::lit).collect())?;
    let weighted = g.mul_const(per_sample, &scale)?;
    Ok(g.mean(weighted))
}

/// Nearest-neighbour downsample of an `N×1×H×W` disparity map by `factor`,
/// sampling at `factor·i + factor/2`, with values divided by `factor`.
pub fn downsample_disparity<T: Real>(
    gt: &Tensor<T>,
    valid: &[bool],
    factor: usize,
) -> Result<(Tensor<T>, Vec<bool>)> {
    let [n, c, h, w] = gt.dims4("downsample_disparity")?;
    if c != 1 {
        return Err(Error::shape("downsample_disparity", "channels", 1, c));
    }
    if valid.len() != gt.numel() {
        return Err(Error::shape("downsample_disparity", "mask", gt.numel(), valid.len()));
    }
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::contract(
            "downsample_disparity",
            format!("{h}x{w} is not divisible by {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::lit(1.0 / factor as f64);
    let mut out = Vec::with_capacity(n * oh * ow);
    let mut mask = Vec::with_capacity(n * oh * ow);
    for ni in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let i = (ni * h + y * factor + factor / 2) * w + x * factor + factor / 2;
                out.push(gt.data()[i] * inv);
                mask.push(valid[i]);
            }
        }
    }
    Ok((Tensor::new(vec![n, 1, oh, ow], out)?, mask))
}

/// Nearest-neighbour downsample of `n×h×w` class ids.
pub fn downsample_classes(ids: &[u8], n: usize, h: usize, w: usize, factor: usize) -> Result<Vec<u8>> {
    if ids.len() != n * h * w {
        return Err(Error::shape("downsample_classes", "len", n * h * w, ids.len()));
    }
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::contract(
            "downsample_classes",
            format!("{h}x{w} is not divisible by {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(n * oh * ow);
    for ni in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                out.push(ids[(ni * h + y * factor + factor / 2) * w + x * factor + factor / 2]);
            }
        }
    }
    Ok(out)
}

/// Full-resolution ground truth for a batch.
#[derive(Clone, Debug)]
pub struct Targets<T: Real = f32> {
    /// `N×1×H×W`, pixels.
    pub disparity: Tensor<T>,
    pub valid: Vec<bool>,
    /// `N·H·W` class ids, when semantic labels exist.
    pub classes: Option<Vec<u8>>,
    pub ignore: u8,
}

/// Graph nodes of one stage's sub-losses.
#[derive(Clone, Copy, Debug)]
pub struct StageTerms {
    pub disparity: Var,
    pub semantic: Option<Var>,
    pub refined: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub stages: Vec<(Stage, StageTerms)>,
}

impl ObjectiveTerms {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> Vec<(Stage, StageLosses)> {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item().as_f64());
        self.stages
            .iter()
            .map(|(s, t)| {
                (
                    *s,
                    StageLosses {
                        disparity: v(Some(t.disparity)),
                        semantic: v(t.semantic),
                        refined: v(t.refined),
                    },
                )
            })
            .collect()
    }
}

/// Builds every sub-loss for the stages in `out` and their weighted sum.
pub fn objective<T: Real>(
    g: &mut Graph<T>,
    out: &ForwardOutputs,
    targets: &Targets<T>,
    weights: &LossWeights,
    class_weights: &[f64],
) -> Result<ObjectiveTerms> {
    let [n, _, h, w] = targets.disparity.dims4("objective")?;
    let mut stages = Vec::with_capacity(out.stages.len());
    let mut sum = Vec::new();
    for so in &out.stages {
        let s = so.stage;
        let f = s.downsample();
        let (gt, valid) = downsample_disparity(&targets.disparity, &targets.valid, f)?;
        let disparity = smooth_l1(g, so.disparity.disparity, &gt, &valid)?;
        let refined = match &so.refined {
            Some(r) => Some(smooth_l1(g, r.disparity, &gt, &valid)?),
            None => None,
        };
        let semantic = match (&so.logits, &targets.classes) {
            (Some(l), Some(ids)) => {
                let small = downsample_classes(ids, n, h, w, f)?;
                Some(weighted_cross_entropy(
                    g,
                    l.scores,
                    &small,
                    class_weights,
                    targets.ignore,
                    weights.gamma,
                )?)
            }
            _ => None,
        };
        let ws = weights.stage[s.index()];
        sum.push((disparity, T::lit(ws * weights.disparity)));
        if let Some(v) = semantic {
            sum.push((v, T::lit(ws * weights.semantic)));
        }
        if let Some(v) = refined {
            sum.push((v, T::lit(ws * weights.refined)));
        }
        stages.push((
            s,
            StageTerms {
                disparity,
                semantic,
                refined,
            },
        ));
    }
    let total = g.weighted_sum(&sum)?;
    Ok(ObjectiveTerms { total, stages })
}
