//! Shared feature extractor.
//!
//! Two 3×3 convolutions (stride 2, then 1) bring the input to half resolution
//! with `c` channels; four blocks of 2×2 max-pool followed by two 3×3
//! convolutions then produce 2c, 4c, 8c and 16c channels at 1/4 … 1/32.
//! Every convolution is followed by batch norm and ReLU.

use rand::Rng;

use crate::diffops::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, ConvBlock, ParamStore};
use crate::stage::Stage;
use crate::tensor::Real;

/// Spatial extents must be multiples of this.
pub const DIVISOR: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub f2: Var,
    pub f4: Var,
    pub f8: Var,
    pub f16: Var,
    pub f32: Var,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [Var; 5] {
        [self.f2, self.f4, self.f8, self.f16, self.f32]
    }

    /// Features at a stage's resolution.
    pub fn at(&self, stage: Stage) -> Var {
        match stage {
            Stage::One => self.f16,
            Stage::Two => self.f8,
            Stage::Three => self.f4,
        }
    }

    /// Splits a pyramid computed on `[left; right]` along the batch axis.
    pub fn split_batch<T: Real>(&self, g: &mut Graph<T>, n: usize) -> Result<(Self, Self)> {
        let mut left = [self.f2; 5];
        let mut right = [self.f2; 5];
        for (i, v) in self.levels().into_iter().enumerate() {
            left[i] = g.narrow(v, 0, 0, n)?;
            right[i] = g.narrow(v, 0, n, n)?;
        }
        Ok((Self::from_levels(left), Self::from_levels(right)))
    }

    fn from_levels(l: [Var; 5]) -> Self {
        Self {
            f2: l[0],
            f4: l[1],
            f8: l[2],
            f16: l[3],
            f32: l[4],
        }
    }
}

/// Channel count of each pyramid level, finest first.
pub fn level_channels(c: usize) -> [usize; 5] {
    [c, 2 * c, 4 * c, 8 * c, 16 * c]
}

/// Channels of the pyramid level a stage reads.
pub fn stage_channels(c: usize, stage: Stage) -> usize {
    match stage {
        Stage::One => 8 * c,
        Stage::Two => 4 * c,
        Stage::Three => 2 * c,
    }
}

pub fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height % DIVISOR != 0 || width % DIVISOR != 0 || height == 0 || width == 0 {
        return Err(Error::NotDivisible { height, width });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Encoder {
    c: usize,
    stem: [ConvBlock; 2],
    blocks: Vec<[ConvBlock; 2]>,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, c: usize) -> Self {
        b.scoped("encoder", |b| {
            let stem = [
                b.block("conv0", 3, c, ConvGeom::d2(3, 2, 1), true, true),
                b.block("conv1", c, c, ConvGeom::d2(3, 1, 1), true, true),
            ];
            let chans = level_channels(c);
            let blocks = (0..4)
                .map(|i| {
                    let (cin, cout) = (chans[i], chans[i + 1]);
                    b.scoped(&format!("block{}", i + 1), |b| {
                        [
                            b.block("a", cin, cout, ConvGeom::d2(3, 1, 1), true, true),
                            b.block("b", cout, cout, ConvGeom::d2(3, 1, 1), true, true),
                        ]
                    })
                })
                .collect();
            Self { c, stem, blocks }
        })
    }

    pub fn channel_factor(&self) -> usize {
        self.c
    }

    /// Trainable parameters (weights, biases, batch-norm affine terms).
    pub fn param_count(c: usize) -> usize {
        4599 * c * c + 213 * c
    }

    /// Runs the encoder on normalized `N×3×H×W` images.
    pub fn extract_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        img: Var,
    ) -> Result<FeaturePyramid> {
        let [_, ch, h, w] = g.value(img).dims4("extract_features")?;
        if ch != 3 {
            return Err(Error::shape("extract_features", "channels", 3, ch));
        }
        check_divisible(h, w)?;
        g.push_scope("encoder");
        let out = self.run(g, store, img);
        g.pop_scope();
        out
    }

    fn run<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, img: Var) -> Result<FeaturePyramid> {
        let mut x = self.stem[0].forward(g, store, img)?;
        x = self.stem[1].forward(g, store, x)?;
        let mut levels = [x; 5];
        for (i, [a, b]) in self.blocks.iter().enumerate() {
            x = g.max_pool_2x2(x)?;
            x = a.forward(g, store, x)?;
            x = b.forward(g, store, x)?;
            levels[i + 1] = x;
        }
        Ok(FeaturePyramid::from_levels(levels))
    }
}

/// Closed-form count, summed layer by layer, used to cross-check
/// [`Encoder::param_count`].
pub fn param_count_by_layer(c: usize) -> usize {
    let k = ConvGeom::d2(3, 1, 1);
    let chans = level_channels(c);
    let mut n = ConvBlock::param_count(3, c, &k, true) + ConvBlock::param_count(c, c, &k, true);
    for i in 0..4 {
        n += ConvBlock::param_count(chans[i], chans[i + 1], &k, true);
        n += ConvBlock::param_count(chans[i + 1], chans[i + 1], &k, true);
    }
    n
}
