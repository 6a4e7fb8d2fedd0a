//! Disparity refinement from hybrid semantic + disparity volumes.
//!
//! The stage's regularized volume is reorganized with hypotheses as
//! channels, concatenated with semantics compressed to the same channel
//! count (and, after stage 1, the upsampled previous refined disparity),
//! and three 2D convolutions predict a correction added back onto the
//! volume before the soft-argmin readout.

use rand::Rng;

use crate::diffops::{ConvGeom, Graph, Var};
use crate::dispnet::{upsample_disparity_2x, CostVolume};
use crate::error::{Error, Result};
use crate::nn::{Builder, ConvBlock, ParamStore};
use crate::semnet::SemanticLogits;
use crate::stage::Stage;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedOutput {
    /// `N×1×h×w`, pixels at the stage's scale.
    pub disparity: Var,
    /// Upsampled previous refined disparity (stages 2, 3).
    pub base: Option<Var>,
}

#[derive(Clone, Debug)]
struct StageNet {
    compress: ConvBlock,
    convs: [ConvBlock; 3],
}

#[derive(Clone, Debug)]
pub struct Synergy {
    stages: Vec<StageNet>,
}

fn hybrid_channels(stage: Stage) -> usize {
    let d = stage.offsets().len();
    2 * d + usize::from(stage.is_residual())
}

impl Synergy {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, n_classes: usize) -> Self {
        b.scoped("synergy", |b| {
            let k = ConvGeom::d2(3, 1, 1);
            let stages = Stage::ALL
                .iter()
                .map(|&s| {
                    b.scoped(&s.to_string(), |b| {
                        let d = s.offsets().len();
                        let compress =
                            b.block("compress", n_classes, d, ConvGeom::d2(1, 1, 0), true, true);
                        let convs = [
                            b.block("conv0", hybrid_channels(s), 2 * d, k, true, true),
                            b.block("conv1", 2 * d, d, k, true, true),
                            b.block("conv2", d, d, k, false, false),
                        ];
                        StageNet { compress, convs }
                    })
                })
                .collect();
            Self { stages }
        })
    }

    pub fn param_count(n_classes: usize) -> usize {
        let k = ConvGeom::d2(3, 1, 1);
        Stage::ALL
            .iter()
            .map(|&s| {
                let d = s.offsets().len();
                ConvBlock::param_count(n_classes, d, &ConvGeom::d2(1, 1, 0), true)
                    + ConvBlock::param_count(hybrid_channels(s), 2 * d, &k, true)
                    + ConvBlock::param_count(2 * d, d, &k, true)
                    + ConvBlock::param_count(d, d, &k, false)
            })
            .sum()
    }

    /// 1×1 convolution + BN + ReLU from `K` logits to `D` channels.
    pub fn compress_semantics<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        logits: &SemanticLogits,
        volume: &CostVolume,
    ) -> Result<Var> {
        let (ls, vs) = (g.shape(logits.scores), g.shape(volume.costs));
        if logits.stage != volume.stage || ls[2..] != vs[3..] {
            return Err(Error::shape(
                "compress_semantics",
                "scale",
                format!("{:?} at {}", &vs[3..], volume.stage),
                format!("{:?} at {}", &ls[2..], logits.stage),
            ));
        }
        self.stages[volume.stage.index()]
            .compress
            .forward(g, store, logits.scores)
    }

    /// Refined disparity for one stage. `sem` is the compressed semantics.
    pub fn refine_stage<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        volume: &CostVolume,
        sem: Var,
        prev_refined: Option<Var>,
        stage: Stage,
    ) -> Result<RefinedOutput> {
        g.push_scope("synergy");
        let out = self.refine_inner(g, store, volume, sem, prev_refined, stage);
        g.pop_scope();
        out
    }

    fn refine_inner<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        volume: &CostVolume,
        sem: Var,
        prev_refined: Option<Var>,
        stage: Stage,
    ) -> Result<RefinedOutput> {
        let base = match (stage.is_residual(), prev_refined) {
            (false, _) => None,
            (true, Some(p)) => Some(upsample_disparity_2x(g, p)?),
            (true, None) => {
                return Err(Error::contract(
                    "refine_stage",
                    format!("{stage} needs the previous refined disparity"),
                ))
            }
        };
        let vs = g.shape(volume.costs).to_vec();
        let [n, _, d, h, w] = [vs[0], vs[1], vs[2], vs[3], vs[4]];
        let reorg = g.reshape(volume.costs, [n, d, h, w])?;
        let mut parts = vec![reorg, sem];
        parts.extend(base);
        let hybrid = g.concat(&parts, 1)?;
        let mut x = hybrid;
        for block in &self.stages[stage.index()].convs {
            x = block.forward(g, store, x)?;
        }
        let corrected = g.add(reorg, x)?;
        let offs: Vec<T> = volume.offsets.iter().map(|&o| T::lit(o as f64)).collect();
        let est = g.soft_argmin(corrected, &offs)?;
        let disparity = match base {
            Some(b) => g.add(b, est)?,
            None => est,
        };
        Ok(RefinedOutput { disparity, base })
    }

    /// Residual convolutions of a stage, for tests that hand-set weights.
    pub fn residual_convs(&self, stage: Stage) -> &[ConvBlock; 3] {
        &self.stages[stage.index()].convs
    }
}
