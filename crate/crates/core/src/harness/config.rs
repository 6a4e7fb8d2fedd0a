//! Run configuration, loadable from a flat `key = value` file and overridable
//! key by key from the command line.

use std::path::{Path, PathBuf};

use crate::data::SceneParams;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RunOptions, Variant};
use crate::objective::LossWeights;
use crate::stage::Stage;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub c: usize,
    pub n_classes: usize,
    pub variant: Variant,
    pub crop_height: usize,
    pub crop_width: usize,
    pub batch_size: usize,
    /// Optimizer steps; 0 means `epochs` full passes instead.
    pub steps: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halving_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub data_seed: u64,
    pub stage_stop: Stage,
    pub refine: bool,
    /// Run kernels on one thread.
    pub sequential: bool,
    pub data_root: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
    /// Synthetic source used when no `data_root` is given.
    pub synth_count: usize,
    pub synth_height: usize,
    pub synth_width: usize,
    pub synth_objects: usize,
    pub synth_max_disp: f32,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl RunConfig {
    /// Full-size training settings.
    pub fn full() -> Self {
        let w = LossWeights::default();
        Self {
            c: 32,
            n_classes: 19,
            variant: Variant::Full,
            crop_height: 256,
            crop_width: 512,
            batch_size: 6,
            steps: 0,
            epochs: 800,
            lr: 5e-4,
            lr_halving_epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: w,
            seed: 0,
            data_seed: 1,
            stage_stop: Stage::Three,
            refine: true,
            sequential: false,
            data_root: None,
            train_split: "train".into(),
            val_split: "val".into(),
            synth_count: 200,
            synth_height: 256,
            synth_width: 512,
            synth_objects: 4,
            synth_max_disp: 96.0,
            checkpoint_every: 1000,
            log_every: 10,
            out_dir: PathBuf::from("runs"),
        }
    }

    /// CPU-sized settings.
    pub fn desk() -> Self {
        Self {
            c: 4,
            n_classes: 5,
            crop_height: 64,
            crop_width: 128,
            batch_size: 2,
            steps: 500,
            synth_count: 8,
            synth_height: 64,
            synth_width: 128,
            synth_objects: 3,
            synth_max_disp: 32.0,
            checkpoint_every: 0,
            ..Self::full()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.c, self.n_classes, self.variant)
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            stage_stop: self.stage_stop,
            refine: self.refine,
        }
    }

    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            height: self.synth_height,
            width: self.synth_width,
            n_objects: self.synth_objects,
            max_disp: self.synth_max_disp,
            n_classes: self.n_classes,
            constant_background: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.crop_height % 32 != 0 || self.crop_width % 32 != 0 || self.crop_height == 0 || self.crop_width == 0 {
            return bad("crop extents must be positive multiples of 32");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.lr_halving_epochs == 0 {
            return bad("lr_halving_epochs must be positive");
        }
        if self.steps == 0 && self.epochs == 0 {
            return bad("either steps or epochs must be positive");
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "on" | "1" | "yes" => Ok(true),
                "false" | "off" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
            }
        }
        let v = value.trim();
        match key {
            "c" => self.c = parse(key, v)?,
            "n_classes" => self.n_classes = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "crop_height" => self.crop_height = parse(key, v)?,
            "crop_width" => self.crop_width = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_halving_epochs" => self.lr_halving_epochs = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "w_stage1" => self.weights.stage[0] = parse(key, v)?,
            "w_stage2" => self.weights.stage[1] = parse(key, v)?,
            "w_stage3" => self.weights.stage[2] = parse(key, v)?,
            "w_disparity" => self.weights.disparity = parse(key, v)?,
            "w_semantic" => self.weights.semantic = parse(key, v)?,
            "w_refined" => self.weights.refined = parse(key, v)?,
            "gamma" => self.weights.gamma = parse(key, v)?,
            "k" => self.weights.k = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "stage_stop" => {
                let n: usize = parse(key, v)?;
                self.stage_stop = Stage::from_number(n)
                    .ok_or_else(|| Error::Config(format!("stage_stop must be 1, 2 or 3, got {n}")))?;
            }
            "refine" => self.refine = flag(key, v)?,
            "sequential" => self.sequential = flag(key, v)?,
            "data_root" => self.data_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train_split" => self.train_split = v.to_string(),
            "val_split" => self.val_split = v.to_string(),
            "synth_count" => self.synth_count = parse(key, v)?,
            "synth_height" => self.synth_height = parse(key, v)?,
            "synth_width" => self.synth_width = parse(key, v)?,
            "synth_objects" => self.synth_objects = parse(key, v)?,
            "synth_max_disp" => self.synth_max_disp = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment. A `profile` line
    /// (`full` or `desk`) resets every field first.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if k == "profile" {
                *self = Self::profile(v.trim())?;
                continue;
            }
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown profile `{name}` (full or desk)"))),
        }
    }

    pub fn load(path: &Path, base: Self) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = base;
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every field as `key = value` lines, readable by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let pairs: Vec<(&str, String)> = vec![
            ("c", self.c.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("variant", self.variant.to_string()),
            ("crop_height", self.crop_height.to_string()),
            ("crop_width", self.crop_width.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_halving_epochs", self.lr_halving_epochs.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("w_stage1", w.stage[0].to_string()),
            ("w_stage2", w.stage[1].to_string()),
            ("w_stage3", w.stage[2].to_string()),
            ("w_disparity", w.disparity.to_string()),
            ("w_semantic", w.semantic.to_string()),
            ("w_refined", w.refined.to_string()),
            ("gamma", w.gamma.to_string()),
            ("k", w.k.to_string()),
            ("seed", self.seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("stage_stop", self.stage_stop.number().to_string()),
            ("refine", self.refine.to_string()),
            ("sequential", self.sequential.to_string()),
            (
                "data_root",
                self.data_root.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
            ("train_split", self.train_split.clone()),
            ("val_split", self.val_split.clone()),
            ("synth_count", self.synth_count.to_string()),
            ("synth_height", self.synth_height.to_string()),
            ("synth_width", self.synth_width.to_string()),
            ("synth_objects", self.synth_objects.to_string()),
            ("synth_max_disp", self.synth_max_disp.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
