//! Coarse-to-fine disparity decoder.
//!
//! Stage 1 searches the full range at 1/16 resolution; stages 2 and 3 warp
//! the right features by the upsampled previous estimate and search a ±2
//! residual. Each stage first maps the pyramid level to a task-specific
//! embedding (one 3×3 convolution + batch norm, shared by both views).

use rand::Rng;

use crate::diffops::{ConvGeom, Graph, Var};
use crate::encoder::stage_channels;
use crate::error::{Error, Result};
use crate::nn::{Builder, ConvBlock, ParamStore};
use crate::stage::Stage;
use crate::tensor::Real;

/// Output channels of the three 3D convolutions regularizing a volume.
pub fn regularizer_channels(stage: Stage) -> [usize; 3] {
    match stage {
        Stage::One => [16, 16, 1],
        _ => [4, 4, 1],
    }
}

/// A single-channel matching-cost volume `N×1×D×h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub costs: Var,
    pub offsets: Vec<i32>,
    pub stage: Stage,
}

impl CostVolume {
    pub fn depth(&self) -> usize {
        self.offsets.len()
    }

    fn offsets_as<T: Real>(&self) -> Vec<T> {
        self.offsets.iter().map(|&o| T::lit(o as f64)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityStageOutput {
    /// `N×1×h×w`, in pixels at the stage's scale.
    pub disparity: Var,
    /// The regularized volume the estimate was read from.
    pub volume: CostVolume,
    /// Upsampled previous estimate the residual was added to (stages 2, 3).
    pub base: Option<Var>,
}

pub fn build_distance_volume<T: Real>(
    g: &mut Graph<T>,
    left: Var,
    right: Var,
    offsets: &[i32],
    stage: Stage,
) -> Result<CostVolume> {
    let costs = g.distance_volume(left, right, offsets)?;
    Ok(CostVolume {
        costs,
        offsets: offsets.to_vec(),
        stage,
    })
}

/// Expected hypothesis under `softmax(-cost)`, shape `N×1×h×w`.
pub fn soft_argmin<T: Real>(g: &mut Graph<T>, v: &CostVolume) -> Result<Var> {
    let offs = v.offsets_as::<T>();
    g.soft_argmin(v.costs, &offs)
}

/// Bilinear 2× upsample with values doubled to stay in pixels of the new scale.
pub fn upsample_disparity_2x<T: Real>(g: &mut Graph<T>, d: Var) -> Result<Var> {
    full_resolution_disparity(g, d, 2)
}

/// Bilinear upsample by `factor` with values scaled by the same factor.
pub fn full_resolution_disparity<T: Real>(g: &mut Graph<T>, d: Var, factor: usize) -> Result<Var> {
    let s = g.shape(d);
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(
            "upsample_disparity",
            "channels",
            "N x 1 x h x w",
            format!("{s:?}"),
        ));
    }
    let up = g.upsample(d, factor)?;
    Ok(g.scale(up, T::lit(factor as f64)))
}

#[derive(Clone, Debug)]
struct StageNet {
    embed: ConvBlock,
    regularizer: [ConvBlock; 3],
}

#[derive(Clone, Debug)]
pub struct DispNet {
    stages: Vec<StageNet>,
}

impl DispNet {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, c: usize) -> Self {
        b.scoped("disp", |b| {
            let stages = Stage::ALL
                .iter()
                .map(|&s| {
                    b.scoped(&s.to_string(), |b| {
                        let ch = stage_channels(c, s);
                        let embed = b.block("embed", ch, ch, ConvGeom::d2(3, 1, 1), true, false);
                        let [c1, c2, c3] = regularizer_channels(s);
                        let k = ConvGeom::d3(3, 1);
                        let regularizer = [
                            b.block("reg0", 1, c1, k, true, true),
                            b.block("reg1", c1, c2, k, true, true),
                            b.block("reg2", c2, c3, k, false, false),
                        ];
                        StageNet { embed, regularizer }
                    })
                })
                .collect();
            Self { stages }
        })
    }

    pub fn param_count(c: usize) -> usize {
        let k2 = ConvGeom::d2(3, 1, 1);
        let k3 = ConvGeom::d3(3, 1);
        Stage::ALL
            .iter()
            .map(|&s| {
                let ch = stage_channels(c, s);
                let [c1, c2, c3] = regularizer_channels(s);
                ConvBlock::param_count(ch, ch, &k2, true)
                    + ConvBlock::param_count(1, c1, &k3, true)
                    + ConvBlock::param_count(c1, c2, &k3, true)
                    + ConvBlock::param_count(c2, c3, &k3, false)
            })
            .sum()
    }

    /// Task embedding of both views. The views go through one batch so the
    /// shared layer sees them identically.
    pub fn embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        left: Var,
        right: Var,
        stage: Stage,
    ) -> Result<(Var, Var)> {
        let n = g.shape(left)[0];
        let both = g.concat(&[left, right], 0)?;
        let e = self.stages[stage.index()].embed.forward(g, store, both)?;
        Ok((g.narrow(e, 0, 0, n)?, g.narrow(e, 0, n, n)?))
    }

    pub fn regularize_volume<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v: &CostVolume,
    ) -> Result<CostVolume> {
        let s = g.shape(v.costs);
        if s.len() != 5 || s[1] != 1 {
            return Err(Error::shape(
                "regularize_volume",
                "channels",
                "N x 1 x D x h x w",
                format!("{s:?}"),
            ));
        }
        let mut x = v.costs;
        for block in &self.stages[v.stage.index()].regularizer {
            x = block.forward(g, store, x)?;
        }
        Ok(CostVolume {
            costs: x,
            offsets: v.offsets.clone(),
            stage: v.stage,
        })
    }

    /// One decoder stage on pyramid features `left`/`right` at the stage's
    /// resolution. `prev` is the previous stage's disparity.
    pub fn disparity_stage<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        left: Var,
        right: Var,
        prev: Option<Var>,
        stage: Stage,
    ) -> Result<DisparityStageOutput> {
        g.push_scope("disp");
        let out = self.stage_inner(g, store, left, right, prev, stage);
        g.pop_scope();
        out
    }

    fn stage_inner<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        left: Var,
        right: Var,
        prev: Option<Var>,
        stage: Stage,
    ) -> Result<DisparityStageOutput> {
        let (fl, fr) = self.embed(g, store, left, right, stage)?;
        let base = match (stage.is_residual(), prev) {
            (false, _) => None,
            (true, Some(p)) => Some(upsample_disparity_2x(g, p)?),
            (true, None) => {
                return Err(Error::contract(
                    "disparity_stage",
                    format!("{stage} needs the previous stage's disparity"),
                ))
            }
        };
        let fr = match base {
            Some(b) => g.warp_width(fr, b)?,
            None => fr,
        };
        let raw = build_distance_volume(g, fl, fr, &stage.offsets(), stage)?;
        let volume = self.regularize_volume(g, store, &raw)?;
        let est = soft_argmin(g, &volume)?;
        let disparity = match base {
            Some(b) => g.add(b, est)?,
            None => est,
        };
        Ok(DisparityStageOutput {
            disparity,
            volume,
            base,
        })
    }

    /// Regularizer blocks of a stage, for tests that hand-set weights.
    pub fn regularizer(&self, stage: Stage) -> &[ConvBlock; 3] {
        &self.stages[stage.index()].regularizer
    }

    pub fn embedding(&self, stage: Stage) -> &ConvBlock {
        &self.stages[stage.index()].embed
    }
}
