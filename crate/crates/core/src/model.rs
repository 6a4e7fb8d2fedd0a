//! The joint network: encoder, disparity and semantic decoders, refinement.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffops::{BatchNormConfig, Graph, Var};
use crate::dispnet::{DispNet, DisparityStageOutput};
use crate::encoder::{Encoder, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{Builder, ParamStore};
use crate::semnet::{SemNet, SemanticLogits};
use crate::stage::Stage;
use crate::synergy::{RefinedOutput, Synergy};
use crate::tensor::{Real, Tensor};

/// Which branches a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Disparity,
    DisparitySemantic,
    Full,
}

impl Variant {
    pub fn has_semantic(self) -> bool {
        self != Variant::Disparity
    }

    pub fn has_synergy(self) -> bool {
        self == Variant::Full
    }

    pub fn code(self) -> u32 {
        match self {
            Variant::Disparity => 0,
            Variant::DisparitySemantic => 1,
            Variant::Full => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Variant::Disparity),
            1 => Some(Variant::DisparitySemantic),
            2 => Some(Variant::Full),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Disparity => "disparity",
            Variant::DisparitySemantic => "disparity-semantic",
            Variant::Full => "full",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disparity" => Ok(Variant::Disparity),
            "disparity-semantic" => Ok(Variant::DisparitySemantic),
            "full" => Ok(Variant::Full),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected disparity, disparity-semantic or full)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channel factor.
    pub c: usize,
    pub n_classes: usize,
    pub variant: Variant,
    pub bn: BatchNormConfig,
}

impl ModelConfig {
    pub fn new(c: usize, n_classes: usize, variant: Variant) -> Self {
        Self {
            c,
            n_classes,
            variant,
            bn: BatchNormConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 {
            return Err(Error::Config("channel factor c must be positive".into()));
        }
        if self.variant.has_semantic() && !(1..=255).contains(&self.n_classes) {
            return Err(Error::Config(format!(
                "class count {} outside 1..=255",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Trainable parameters of the configured model.
    pub fn param_count(&self) -> usize {
        let mut n = Encoder::param_count(self.c) + DispNet::param_count(self.c);
        if self.variant.has_semantic() {
            n += SemNet::param_count(self.c, self.n_classes);
        }
        if self.variant.has_synergy() {
            n += Synergy::param_count(self.n_classes);
        }
        n
    }
}

/// Per-channel pixel statistics used to normalize input images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: [127.5; 3],
            std: [64.0; 3],
        }
    }
}

impl NormStats {
    /// Statistics of `N×3×H×W` images.
    pub fn estimate<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0usize;
        for img in images {
            let [n, c, h, w] = img.dims4("NormStats::estimate")?;
            if c != 3 {
                return Err(Error::shape("NormStats::estimate", "channels", 3, c));
            }
            let hw = h * w;
            for ni in 0..n {
                for (ci, (s, q)) in sum.iter_mut().zip(&mut sq).enumerate() {
                    for &v in &img.data()[(ni * 3 + ci) * hw..][..hw] {
                        *s += v as f64;
                        *q += (v as f64) * (v as f64);
                    }
                }
            }
            count += n * hw;
        }
        if count == 0 {
            return Err(Error::contract("NormStats::estimate", "no pixels"));
        }
        let mut out = Self::default();
        for c in 0..3 {
            let m = sum[c] / count as f64;
            let var = (sq[c] / count as f64 - m * m).max(0.0);
            out.mean[c] = m as f32;
            out.std[c] = var.sqrt().max(1e-3) as f32;
        }
        Ok(out)
    }

    pub fn normalize<T: Real>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, h, w] = img.dims4("normalize")?;
        if c != 3 {
            return Err(Error::shape("normalize", "channels", 3, c));
        }
        let hw = h * w;
        let mut out = img.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % 3;
            *v = (*v - T::lit(self.mean[ch] as f64)) / T::lit(self.std[ch] as f64);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Last stage to execute.
    pub stage_stop: Stage,
    /// Run the refinement branch (only meaningful for [`Variant::Full`]).
    pub refine: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            stage_stop: Stage::Three,
            refine: true,
        }
    }
}

/// Shared features of both views.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub left: FeaturePyramid,
    pub right: FeaturePyramid,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BranchTimes {
    pub disparity: Duration,
    pub semantic: Duration,
    pub refine: Duration,
}

impl BranchTimes {
    pub fn total(&self) -> Duration {
        self.disparity + self.semantic + self.refine
    }
}

#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub stage: Stage,
    pub disparity: DisparityStageOutput,
    pub logits: Option<SemanticLogits>,
    pub refined: Option<RefinedOutput>,
    pub times: BranchTimes,
}

impl StageOutputs {
    /// Refined disparity when available, otherwise the decoder's estimate.
    pub fn final_disparity(&self) -> Var {
        self.refined
            .as_ref()
            .map_or(self.disparity.disparity, |r| r.disparity)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub encoded: Encoded,
    pub encode_time: Duration,
    pub stages: Vec<StageOutputs>,
}

impl ForwardOutputs {
    pub fn last(&self) -> &StageOutputs {
        self.stages.last().expect("at least one stage runs")
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub norm: NormStats,
    pub store: ParamStore<T>,
    encoder: Encoder,
    disp: DispNet,
    sem: Option<SemNet>,
    synergy: Option<Synergy>,
}

struct Layout {
    encoder: Encoder,
    disp: DispNet,
    sem: Option<SemNet>,
    synergy: Option<Synergy>,
}

fn layout<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(store, &mut rng, config.bn);
    let encoder = Encoder::new(&mut b, config.c);
    let disp = DispNet::new(&mut b, config.c);
    let sem = config
        .variant
        .has_semantic()
        .then(|| SemNet::new(&mut b, config.c, config.n_classes));
    let synergy = config
        .variant
        .has_synergy()
        .then(|| Synergy::new(&mut b, config.n_classes));
    Layout {
        encoder,
        disp,
        sem,
        synergy,
    }
}

impl<T: Real> Model<T> {
    /// Freshly initialized model; weights depend only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let l = layout(&config, &mut store, seed);
        Ok(Self {
            config,
            norm: NormStats::default(),
            store,
            encoder: l.encoder,
            disp: l.disp,
            sem: l.sem,
            synergy: l.synergy,
        })
    }

    /// Rebuilds a model around loaded parameters, checking that names and
    /// shapes match the layout implied by `config`.
    pub fn from_parts(config: ModelConfig, norm: NormStats, store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected = model.store.entries();
        if expected.len() != store.len() {
            return Err(Error::Mismatch(format!(
                "expected {} tensors for c={} classes={} variant={}, found {}",
                expected.len(),
                config.c,
                config.n_classes,
                config.variant,
                store.len()
            )));
        }
        for (e, f) in expected.iter().zip(store.entries()) {
            if e.name != f.name || e.value.shape() != f.value.shape() {
                return Err(Error::Mismatch(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    f.name,
                    f.value.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
        }
        model.norm = norm;
        model.store = store;
        Ok(model)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            norm: self.norm,
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            disp: self.disp.clone(),
            sem: self.sem.clone(),
            synergy: self.synergy.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn dispnet(&self) -> &DispNet {
        &self.disp
    }

    pub fn semnet(&self) -> Option<&SemNet> {
        self.sem.as_ref()
    }

    pub fn synergy(&self) -> Option<&Synergy> {
        self.synergy.as_ref()
    }

    /// Normalizes raw `N×3×H×W` images and runs both views through the
    /// shared encoder in one batch.
    pub fn encode(&self, g: &mut Graph<T>, left: &Tensor<T>, right: &Tensor<T>) -> Result<Encoded> {
        let [n, _, h, w] = left.dims4("encode")?;
        if left.shape() != right.shape() {
            return Err(Error::shape(
                "encode",
                "right",
                format!("{:?}", left.shape()),
                format!("{:?}", right.shape()),
            ));
        }
        g.set_stage(0);
        let both = Tensor::stack_batch(&[&self.norm.normalize(left)?, &self.norm.normalize(right)?])?;
        let x = g.input(both);
        let pyramid = self.encoder.extract_features(g, &self.store, x)?;
        let (l, r) = pyramid.split_batch(g, n)?;
        Ok(Encoded {
            left: l,
            right: r,
            batch: n,
            height: h,
            width: w,
        })
    }

    /// Runs every branch of one stage. `prev` must be the previous stage's
    /// outputs for stages 2 and 3.
    pub fn run_stage(
        &self,
        g: &mut Graph<T>,
        enc: &Encoded,
        prev: Option<&StageOutputs>,
        stage: Stage,
        refine: bool,
    ) -> Result<StageOutputs> {
        if stage.is_residual() && prev.map(|p| p.stage) != stage.prev() {
            return Err(Error::contract(
                "run_stage",
                format!("{stage} needs the outputs of the previous stage"),
            ));
        }
        g.set_stage(stage.number());
        let mut times = BranchTimes::default();

        let t = Instant::now();
        let disparity = self.disp.disparity_stage(
            g,
            &self.store,
            enc.left.at(stage),
            enc.right.at(stage),
            prev.map(|p| p.disparity.disparity),
            stage,
        )?;
        times.disparity = t.elapsed();

        let t = Instant::now();
        let logits = match &self.sem {
            Some(sem) => Some(sem.semantic_stage(
                g,
                &self.store,
                &enc.left,
                prev.and_then(|p| p.logits.as_ref()),
                stage,
            )?),
            None => None,
        };
        times.semantic = t.elapsed();

        let t = Instant::now();
        let refined = match (&self.synergy, &logits, refine) {
            (Some(syn), Some(logits), true) => {
                g.push_scope("synergy");
                let sem = syn.compress_semantics(g, &self.store, logits, &disparity.volume);
                g.pop_scope();
                let prev_refined = prev.and_then(|p| p.refined.as_ref()).map(|r| r.disparity);
                Some(syn.refine_stage(g, &self.store, &disparity.volume, sem?, prev_refined, stage)?)
            }
            _ => None,
        };
        times.refine = t.elapsed();

        Ok(StageOutputs {
            stage,
            disparity,
            logits,
            refined,
            times,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        left: &Tensor<T>,
        right: &Tensor<T>,
        opts: RunOptions,
    ) -> Result<ForwardOutputs> {
        let t = Instant::now();
        let encoded = self.encode(g, left, right)?;
        let encode_time = t.elapsed();
        let mut stages: Vec<StageOutputs> = Vec::with_capacity(3);
        for stage in Stage::ALL.into_iter().filter(|&s| s <= opts.stage_stop) {
            let out = self.run_stage(g, &encoded, stages.last(), stage, opts.refine)?;
            stages.push(out);
        }
        Ok(ForwardOutputs {
            encoded,
            encode_time,
            stages,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pair(n: usize, h: usize, w: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = Tensor::from_fn([n, 3, h, w], |_| rng.random_range(0.0..255.0));
        let r = Tensor::from_fn([n, 3, h, w], |_| rng.random_range(0.0..255.0));
        (l, r)
    }

    #[test]
    fn param_count_matches_closed_form() {
        for variant in [Variant::Disparity, Variant::DisparitySemantic, Variant::Full] {
            let cfg = ModelConfig::new(2, 5, variant);
            let m = Model::<f32>::new(cfg, 0).unwrap();
            assert_eq!(m.param_count(), cfg.param_count(), "{variant}");
        }
    }

    #[test]
    fn full_forward_shapes() {
        let m = Model::<f32>::new(ModelConfig::new(1, 4, Variant::Full), 1).unwrap();
        let (l, r) = pair(2, 64, 128, 0);
        let mut g = Graph::new();
        let out = m.forward(&mut g, &l, &r, RunOptions::default()).unwrap();
        assert_eq!(out.stages.len(), 3);
        for s in &out.stages {
            let k = s.stage.downsample();
            let hw = [2, 1, 64 / k, 128 / k];
            assert_eq!(g.shape(s.disparity.disparity), &hw);
            assert_eq!(g.shape(s.refined.as_ref().unwrap().disparity), &hw);
            assert_eq!(g.shape(s.logits.as_ref().unwrap().scores), &[2, 4, 64 / k, 128 / k]);
        }
        assert!(g.first_non_finite().is_none());
    }

    #[test]
    fn early_stop_matches_full_run_prefix() {
        let m = Model::<f32>::new(ModelConfig::new(1, 3, Variant::Full), 2).unwrap();
        let (l, r) = pair(1, 32, 64, 1);
        let mut full = Graph::new();
        let all = m.forward(&mut full, &l, &r, RunOptions::default()).unwrap();
        let mut early = Graph::new();
        let opts = RunOptions {
            stage_stop: Stage::One,
            refine: true,
        };
        let one = m.forward(&mut early, &l, &r, opts).unwrap();
        assert_eq!(one.stages.len(), 1);
        let (a, b) = (&all.stages[0], &one.stages[0]);
        assert!(full.value(a.final_disparity()).bitwise_eq(early.value(b.final_disparity())));
        assert_eq!(early.counters()[2].total_ops(), 0);
        assert_eq!(early.counters()[3].total_ops(), 0);
    }

    #[test]
    fn refined_output_trains_both_branches() {
        let m = Model::<f32>::new(ModelConfig::new(1, 3, Variant::Full), 4).unwrap();
        let (l, r) = pair(1, 32, 64, 2);
        let mut g = Graph::training();
        let out = m.forward(&mut g, &l, &r, RunOptions::default()).unwrap();
        let refined = out.stages[2].refined.as_ref().unwrap().disparity;
        let loss = g.mean(refined);
        g.backward(loss).unwrap();
        let mut norms: std::collections::BTreeMap<&str, f64> = Default::default();
        for (key, v) in g.param_vars() {
            let name = m.store.entry(crate::nn::ParamId(key)).name.as_str();
            let prefix = name.split('.').next().unwrap();
            let sq: f64 = g.grad(v).map_or(0.0, |t| t.data().iter().map(|x| (*x as f64).powi(2)).sum());
            *norms.entry(prefix).or_default() += sq;
        }
        for prefix in ["encoder", "disp", "sem", "synergy"] {
            assert!(norms.get(prefix).copied().unwrap_or(0.0) > 0.0, "{prefix}: {norms:?}");
        }
    }

    #[test]
    fn mismatched_parts_are_rejected() {
        let m = Model::<f32>::new(ModelConfig::new(1, 3, Variant::Full), 0).unwrap();
        let other = ModelConfig::new(2, 3, Variant::Full);
        assert!(matches!(
            Model::from_parts(other, m.norm, m.store.clone()),
            Err(Error::Mismatch(_))
        ));
        assert!(Model::from_parts(m.config, m.norm, m.store.clone()).is_ok());
    }
}
