//! Inference with stage early stop, and per-stage evaluation.

use std::time::Duration;

use crate::data::dataset::Pair;
use crate::diffops::{Graph, StageCounters, STAGE_SLOTS};
use crate::dispnet::full_resolution_disparity;
use crate::error::Result;
use crate::harness::report::{KvReport, Table};
use crate::metrics::{Confusion, DisparityStats};
use crate::model::{BranchTimes, ForwardOutputs, Model, RunOptions};
use crate::semnet::{predict_classes, ClassMap, IGNORE_ID};
use crate::stage::Stage;
use crate::tensor::{Real, Tensor};

/// Full-resolution maps produced by one stage.
#[derive(Clone, Debug)]
pub struct StageMaps {
    pub stage: Stage,
    /// `N×1×H×W`, decoder estimate.
    pub disparity: Tensor<f32>,
    /// `N×1×H×W`, refined estimate when refinement ran.
    pub refined: Option<Tensor<f32>>,
    pub classes: Option<ClassMap>,
    pub times: BranchTimes,
}

impl StageMaps {
    pub fn final_disparity(&self) -> &Tensor<f32> {
        self.refined.as_ref().unwrap_or(&self.disparity)
    }
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub stages: Vec<StageMaps>,
    pub encode_time: Duration,
    pub counters: [StageCounters; STAGE_SLOTS],
}

impl InferOutput {
    pub fn last(&self) -> &StageMaps {
        self.stages.last().expect("at least one stage")
    }

    pub fn total_flops(&self) -> u64 {
        self.counters.iter().map(|c| c.flops).sum()
    }
}

/// Lifts every stage of a forward pass to full resolution.
pub fn full_resolution_maps<T: Real>(g: &mut Graph<T>, out: &ForwardOutputs) -> Result<Vec<StageMaps>> {
    let mut maps = Vec::with_capacity(out.stages.len());
    for so in &out.stages {
        let f = so.stage.downsample();
        let d = full_resolution_disparity(g, so.disparity.disparity, f)?;
        let disparity = g.value(d).cast();
        let refined = match &so.refined {
            Some(r) => {
                let v = full_resolution_disparity(g, r.disparity, f)?;
                Some(g.value(v).cast())
            }
            None => None,
        };
        let classes = match &so.logits {
            Some(l) => {
                let up = g.upsample(l.scores, f)?;
                Some(predict_classes(g.value(up))?)
            }
            None => None,
        };
        maps.push(StageMaps {
            stage: so.stage,
            disparity,
            refined,
            classes,
            times: so.times,
        });
    }
    Ok(maps)
}

/// Runs the network up to `opts.stage_stop` on raw `N×3×H×W` images.
pub fn infer(model: &Model<f32>, left: &Tensor<f32>, right: &Tensor<f32>, opts: RunOptions) -> Result<InferOutput> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, left, right, opts)?;
    let counters = g.counters().clone();
    let stages = full_resolution_maps(&mut g, &out)?;
    Ok(InferOutput {
        stages,
        encode_time: out.encode_time,
        counters,
    })
}

pub fn infer_pair(model: &Model<f32>, pair: &Pair, opts: RunOptions) -> Result<InferOutput> {
    let s = vec![1, 3, pair.height(), pair.width()];
    infer(model, &pair.left.clone().reshape(s.clone())?, &pair.right.clone().reshape(s)?, opts)
}

/// Accumulated metrics of one stage.
#[derive(Clone, Debug)]
pub struct StageEval {
    pub stage: Stage,
    pub disparity: DisparityStats,
    pub refined: Option<DisparityStats>,
    pub confusion: Option<Confusion>,
}

impl StageEval {
    /// EPE of the stage's final estimate.
    pub fn final_epe(&self) -> Option<f64> {
        self.refined.as_ref().unwrap_or(&self.disparity).epe()
    }

    pub fn final_d1(&self) -> Option<f64> {
        self.refined.as_ref().unwrap_or(&self.disparity).d1_all()
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub pairs: usize,
    pub stages: Vec<StageEval>,
}

impl EvalReport {
    pub fn kv(&self) -> KvReport {
        let mut r = KvReport::default();
        r.push("pairs", self.pairs);
        for s in &self.stages {
            let n = s.stage.number();
            r.push_opt(format!("stage{n}.epe"), s.final_epe(), 4);
            r.push_opt(format!("stage{n}.d1_all"), s.final_d1(), 3);
            r.push_opt(format!("stage{n}.miou"), s.confusion.as_ref().and_then(|c| c.miou()), 3);
            r.push_opt(format!("stage{n}.pixel_acc"), s.confusion.as_ref().and_then(|c| c.pixel_acc()), 3);
        }
        r
    }

    /// One row per stage; the unrefined decoder estimate is reported too.
    pub fn table(&self) -> Table {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let mut t = Table::new(&["stage", "epe", "d1_all", "epe_unrefined", "miou", "pixel_acc"]);
        for s in &self.stages {
            t.row(vec![
                s.stage.number().to_string(),
                fmt(s.final_epe()),
                fmt(s.final_d1()),
                fmt(s.disparity.epe()),
                fmt(s.confusion.as_ref().and_then(|c| c.miou())),
                fmt(s.confusion.as_ref().and_then(|c| c.pixel_acc())),
            ]);
        }
        t
    }
}

/// Evaluates every stage up to `opts.stage_stop` on full-size pairs.
pub fn evaluate(model: &Model<f32>, pairs: &[Pair], opts: RunOptions) -> Result<EvalReport> {
    let n_classes = model.config.n_classes;
    let mut stages: Vec<StageEval> = Vec::new();
    for pair in pairs {
        let out = infer_pair(model, pair, opts)?;
        if stages.is_empty() {
            stages = out
                .stages
                .iter()
                .map(|m| StageEval {
                    stage: m.stage,
                    disparity: DisparityStats::default(),
                    refined: m.refined.as_ref().map(|_| DisparityStats::default()),
                    confusion: m.classes.as_ref().map(|_| Confusion::new(n_classes)),
                })
                .collect();
        }
        for (acc, m) in stages.iter_mut().zip(&out.stages) {
            acc.disparity.add(m.disparity.data(), pair.disparity.data(), &pair.valid)?;
            if let (Some(a), Some(r)) = (acc.refined.as_mut(), m.refined.as_ref()) {
                a.add(r.data(), pair.disparity.data(), &pair.valid)?;
            }
            if let (Some(c), Some(pred), Some(gt)) = (acc.confusion.as_mut(), m.classes.as_ref(), pair.classes.as_ref()) {
                c.add(&pred.ids, gt, IGNORE_ID)?;
            }
        }
    }
    Ok(EvalReport {
        pairs: pairs.len(),
        stages,
    })
}
