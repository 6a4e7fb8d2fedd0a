//! Training loop.

use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::optim::{lr_at, Adam};
use crate::data::checkpoint::Checkpoint;
use crate::data::dataset::{synthetic_pair, Batch, Dataset, Pair};
use crate::diffops::{self, Graph};
use crate::error::{Error, Result};
use crate::model::{Model, NormStats};
use crate::nn::ParamId;
use crate::objective::{class_weights, objective, total_loss, ClassStats, StageLosses};
use crate::semnet::IGNORE_ID;
use crate::stage::Stage;
use crate::tensor::Tensor;

/// Training pairs named by the configuration: the on-disk split when
/// `data_root` is set, otherwise `synth_count` generated scenes.
pub fn training_pairs(cfg: &RunConfig) -> Result<Vec<Pair>> {
    match &cfg.data_root {
        Some(root) => Dataset::open(root, &cfg.train_split)?.load_all(),
        None => (0..cfg.synth_count as u64)
            .map(|i| synthetic_pair(cfg.data_seed + i, &cfg.scene_params()))
            .collect(),
    }
}

/// Validation pairs; synthetic ones use seeds disjoint from training.
pub fn validation_pairs(cfg: &RunConfig, count: usize) -> Result<Vec<Pair>> {
    match &cfg.data_root {
        Some(root) => Dataset::open(root, &cfg.val_split)?.load_all(),
        None => (0..count as u64)
            .map(|i| synthetic_pair(cfg.data_seed + 1_000_000 + i, &cfg.scene_params()))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub stages: Vec<(Stage, StageLosses)>,
}

impl StepLog {
    pub fn line(&self) -> String {
        let mut s = format!(
            "step {:>5} epoch {:>4} lr {:.2e} loss {:.5}",
            self.step, self.epoch, self.lr, self.total
        );
        for (st, l) in &self.stages {
            s += &format!(
                " | {st} d {:.4} s {:.4} r {:.4}",
                l.disparity, l.semantic, l.refined
            );
        }
        s
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model<f32>,
    opt: Adam<f32>,
    rng: ChaCha8Rng,
    pairs: Vec<Pair>,
    class_weights: Vec<f64>,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig, pairs: Vec<Pair>) -> Result<Self> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::Config("no training pairs".into()));
        }
        for p in &pairs {
            if p.height() < cfg.crop_height || p.width() < cfg.crop_width {
                return Err(Error::Config(format!(
                    "crop {}x{} larger than training image {}x{}",
                    cfg.crop_height,
                    cfg.crop_width,
                    p.height(),
                    p.width()
                )));
            }
        }
        let mut model = Model::new(cfg.model_config(), cfg.seed)?;
        let views: Vec<Tensor<f32>> = pairs
            .iter()
            .map(|p| p.left.clone().reshape(vec![1, 3, p.height(), p.width()]))
            .collect::<Result<_>>()?;
        model.norm = NormStats::estimate(&views)?;
        let class_weights = if cfg.variant.has_semantic() {
            let maps: Vec<&[u8]> = pairs.iter().filter_map(|p| p.classes.as_deref()).collect();
            if maps.is_empty() {
                vec![1.0; cfg.n_classes]
            } else {
                class_weights(&ClassStats::from_labels(maps, cfg.n_classes, IGNORE_ID)?, cfg.weights.k)?
            }
        } else {
            Vec::new()
        };
        Ok(Self {
            opt: Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps),
            rng: ChaCha8Rng::seed_from_u64(cfg.data_seed ^ 0x5eed),
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            step: 0,
            class_weights,
            pairs,
            model,
            cfg,
        })
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.cfg.batch_size)
    }

    /// Total optimizer steps this configuration asks for.
    pub fn planned_steps(&self) -> usize {
        if self.cfg.steps > 0 {
            self.cfg.steps
        } else {
            self.cfg.epochs * self.steps_per_epoch()
        }
    }

    fn next_batch(&mut self) -> Result<Batch> {
        let bs = self.cfg.batch_size.min(self.pairs.len());
        let mut picked = Vec::with_capacity(bs);
        while picked.len() < bs {
            if self.cursor >= self.order.len() {
                if !self.order.is_empty() {
                    self.epoch += 1;
                }
                self.order = (0..self.pairs.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let p = &self.pairs[self.order[self.cursor]];
            picked.push(p.random_crop(&mut self.rng, self.cfg.crop_height, self.cfg.crop_width)?);
            self.cursor += 1;
        }
        Batch::from_pairs(&picked)
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepLog> {
        let batch = self.next_batch()?;
        let lr = lr_at(self.cfg.lr, self.cfg.lr_halving_epochs, self.epoch);
        let mut g = Graph::training();
        let out = self
            .model
            .forward(&mut g, &batch.left, &batch.right, self.cfg.run_options())?;
        let terms = objective(&mut g, &out, &batch.targets(), &self.cfg.weights, &self.class_weights)?;
        let total = g.value(terms.total).item() as f64;
        if !total.is_finite() {
            let tensor = g.first_non_finite().unwrap_or("loss").to_string();
            return Err(Error::NonFinite { tensor });
        }
        g.backward(terms.total)?;
        let mut bound: Vec<(usize, crate::diffops::Var)> = g.param_vars().collect();
        bound.sort_unstable_by_key(|&(k, _)| k);
        let mut grads = Vec::with_capacity(bound.len());
        for (key, v) in bound {
            let id = ParamId(key);
            if !self.model.store.entry(id).trainable {
                continue;
            }
            if let Some(gr) = g.grad(v) {
                if !gr.is_finite() {
                    return Err(Error::NonFinite {
                        tensor: format!("gradient of {}", self.model.store.entry(id).name),
                    });
                }
                grads.push((id, gr));
            }
        }
        self.opt.step(&mut self.model.store, &grads, lr)?;
        self.model.store.apply_stat_updates(g.take_stat_updates());
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            epoch: self.epoch,
            lr,
            total,
            stages: terms.values(&g),
        })
    }

    /// Runs the remaining planned steps, writing periodic checkpoints to
    /// `checkpoint_dir` when given.
    pub fn run(
        &mut self,
        checkpoint_dir: Option<&PathBuf>,
        mut observe: impl FnMut(&StepLog),
    ) -> Result<Vec<StepLog>> {
        diffops::exec::set_parallel(!self.cfg.sequential);
        let mut logs = Vec::new();
        while self.step < self.planned_steps() {
            let log = self.step()?;
            if self.cfg.log_every > 0 && log.step % self.cfg.log_every == 0 {
                info!("{}", log.line());
            }
            observe(&log);
            logs.push(log);
            if let Some(dir) = checkpoint_dir {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    self.checkpoint().save(&dir.join(format!("step{:06}.ckpt", self.step)))?;
                }
            }
        }
        Ok(logs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.step as u64)
    }
}

/// Recomputes the weighted total from logged sub-losses.
pub fn logged_total(log: &StepLog, cfg: &RunConfig) -> f64 {
    total_loss(&log.stages, &cfg.weights)
}
