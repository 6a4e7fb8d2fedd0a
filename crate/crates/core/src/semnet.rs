//! Three-stage semantic decoder with residual logit accumulation.

use rand::Rng;

use crate::diffops::{ConvGeom, Graph, Var};
use crate::encoder::{stage_channels, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv, ConvBlock, ParamStore};
use crate::stage::Stage;
use crate::tensor::{Real, Tensor};

/// Class id marking unlabelled pixels.
pub const IGNORE_ID: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticLogits {
    /// `N×K×h×w` raw scores.
    pub scores: Var,
    pub stage: Stage,
}

/// Per-pixel class ids, row-major `n×h×w`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u8>,
}

impl ClassMap {
    pub fn sample(&self, i: usize) -> &[u8] {
        let hw = self.height * self.width;
        &self.ids[i * hw..][..hw]
    }
}

#[derive(Clone, Debug)]
struct Head {
    a: ConvBlock,
    b: ConvBlock,
    out: Conv,
}

#[derive(Clone, Debug)]
pub struct SemNet {
    n_classes: usize,
    heads: Vec<Head>,
}

fn head_input_channels(c: usize, stage: Stage) -> usize {
    match stage {
        // f16 concatenated with the upsampled f32
        Stage::One => 8 * c + 16 * c,
        _ => stage_channels(c, stage),
    }
}

impl SemNet {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, c: usize, n_classes: usize) -> Self {
        b.scoped("sem", |b| {
            let k = ConvGeom::d2(3, 1, 1);
            let heads = Stage::ALL
                .iter()
                .map(|&s| {
                    b.scoped(&s.to_string(), |b| {
                        let (cin, ch) = (head_input_channels(c, s), stage_channels(c, s));
                        Head {
                            a: b.block("a", cin, ch, k, true, true),
                            b: b.block("b", ch, ch, k, true, true),
                            out: b.scoped("out", |b| b.conv(ch, n_classes, ConvGeom::d2(1, 1, 0))),
                        }
                    })
                })
                .collect();
            Self { n_classes, heads }
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn param_count(c: usize, n_classes: usize) -> usize {
        let k = ConvGeom::d2(3, 1, 1);
        Stage::ALL
            .iter()
            .map(|&s| {
                let (cin, ch) = (head_input_channels(c, s), stage_channels(c, s));
                ConvBlock::param_count(cin, ch, &k, true)
                    + ConvBlock::param_count(ch, ch, &k, true)
                    + Conv::param_count(ch, n_classes, &ConvGeom::d2(1, 1, 0))
            })
            .sum()
    }

    /// Head output for a stage, before the residual addition.
    pub fn head<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pyramid: &FeaturePyramid,
        stage: Stage,
    ) -> Result<Var> {
        let x = match stage {
            Stage::One => {
                let up = g.upsample_2x(pyramid.f32)?;
                g.concat(&[pyramid.f16, up], 1)?
            }
            _ => pyramid.at(stage),
        };
        let h = &self.heads[stage.index()];
        let x = h.a.forward(g, store, x)?;
        let x = h.b.forward(g, store, x)?;
        h.out.forward(g, store, x)
    }

    /// Stage logits: head output plus the 2× upsampled previous logits.
    pub fn semantic_stage<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pyramid: &FeaturePyramid,
        prev: Option<&SemanticLogits>,
        stage: Stage,
    ) -> Result<SemanticLogits> {
        g.push_scope("sem");
        let out = (|| {
            let head = self.head(g, store, pyramid, stage)?;
            let scores = accumulate(g, head, prev, stage)?;
            Ok(SemanticLogits { scores, stage })
        })();
        g.pop_scope();
        out
    }
}

/// `head + upsample_2x(prev)`; stage 1 takes `head` unchanged.
pub fn accumulate<T: Real>(
    g: &mut Graph<T>,
    head: Var,
    prev: Option<&SemanticLogits>,
    stage: Stage,
) -> Result<Var> {
    if !stage.is_residual() {
        return Ok(head);
    }
    let Some(prev) = prev else {
        return Err(Error::contract(
            "semantic_stage",
            format!("{stage} needs the previous stage's logits"),
        ));
    };
    let (k_prev, k) = (g.shape(prev.scores)[1], g.shape(head)[1]);
    if k_prev != k {
        return Err(Error::shape("semantic_stage", "classes", k, k_prev));
    }
    let up = g.upsample_2x(prev.scores)?;
    g.add(head, up)
}

/// Per-pixel argmax over the class axis; ties go to the lowest class index.
pub fn predict_classes<T: Real>(logits: &Tensor<T>) -> Result<ClassMap> {
    let [n, k, h, w] = logits.dims4("predict_classes")?;
    if k > 256 {
        return Err(Error::contract("predict_classes", format!("{k} classes exceed u8 ids")));
    }
    let hw = h * w;
    let ls = logits.data();
    let mut ids = Vec::with_capacity(n * hw);
    for ni in 0..n {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = ls[ni * k * hw + p];
            for c in 1..k {
                let v = ls[(ni * k + c) * hw + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            ids.push(best as u8);
        }
    }
    Ok(ClassMap {
        batch: n,
        height: h,
        width: w,
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffops::BatchNormConfig;
    use crate::encoder::Encoder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage_one_logit_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng, BatchNormConfig::default());
        let enc = Encoder::new(&mut b, 1);
        let sem = SemNet::new(&mut b, 1, 5);
        let mut g = Graph::new();
        let img = g.input(Tensor::from_fn([1, 3, 64, 128], |i| (i % 7) as f32 / 7.0));
        let p = enc.extract_features(&mut g, &store, img).unwrap();
        let l1 = sem.semantic_stage(&mut g, &store, &p, None, Stage::One).unwrap();
        assert_eq!(g.shape(l1.scores), &[1, 5, 4, 8]);
        let l2 = sem.semantic_stage(&mut g, &store, &p, Some(&l1), Stage::Two).unwrap();
        assert_eq!(g.shape(l2.scores), &[1, 5, 8, 16]);
        let l3 = sem.semantic_stage(&mut g, &store, &p, Some(&l2), Stage::Three).unwrap();
        assert_eq!(g.shape(l3.scores), &[1, 5, 16, 32]);
        assert_eq!(store.trainable_count(), Encoder::param_count(1) + SemNet::param_count(1, 5));
    }

    #[test]
    fn residual_identities() {
        let mut g = Graph::<f64>::new();
        let head = g.input(Tensor::from_fn([1, 3, 4, 4], |i| i as f64 * 0.1));
        let zero_prev = SemanticLogits {
            scores: g.input(Tensor::zeros([1, 3, 2, 2])),
            stage: Stage::One,
        };
        let out = accumulate(&mut g, head, Some(&zero_prev), Stage::Two).unwrap();
        assert!(g.value(out).bitwise_eq(g.value(head)));

        let zero_head = g.input(Tensor::zeros([1, 3, 4, 4]));
        let prev = SemanticLogits {
            scores: g.input(Tensor::from_fn([1, 3, 2, 2], |i| i as f64)),
            stage: Stage::One,
        };
        let out = accumulate(&mut g, zero_head, Some(&prev), Stage::Two).unwrap();
        let up = crate::diffops::upsample_bilinear_2x(g.value(prev.scores)).unwrap();
        assert!(g.value(out).bitwise_eq(&up));

        let wrong = SemanticLogits {
            scores: g.input(Tensor::zeros([1, 4, 2, 2])),
            stage: Stage::One,
        };
        assert!(accumulate(&mut g, head, Some(&wrong), Stage::Two).is_err());
        assert!(accumulate(&mut g, head, None, Stage::Three).is_err());
    }

    #[test]
    fn argmax_examples() {
        let mut t = Tensor::<f32>::zeros([1, 4, 2, 2]);
        for p in 0..4 {
            t.data_mut()[2 * 4 + p] = 1.0;
        }
        assert!(predict_classes(&t).unwrap().ids.iter().all(|&c| c == 2));

        let tie = Tensor::<f32>::new([1, 4, 1, 1], vec![0.0, 5.0, 1.0, 5.0]).unwrap();
        assert_eq!(predict_classes(&tie).unwrap().ids, vec![1]);
    }

    #[test]
    fn argmax_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, k, h, w) = (2, 6, 3, 5);
        let t = Tensor::<f32>::from_fn([n, k, h, w], |_| rng.random_range(-3.0..3.0));
        let m = predict_classes(&t).unwrap();
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let at = |c: usize| t.data()[((ni * k + c) * h + y) * w + x];
                    let mut best = 0;
                    for c in 0..k {
                        if at(c) > at(best) {
                            best = c;
                        }
                    }
                    assert_eq!(m.ids[(ni * h + y) * w + x] as usize, best);
                }
            }
        }
    }
}
