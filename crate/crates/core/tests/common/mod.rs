//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semstereo::data::dataset::{synthetic_pair, Batch};
use semstereo::data::SceneParams;
use semstereo::diffops::{grad_check, BatchNormConfig, ConvGeom, GradCheckReport, Graph, Var};
use semstereo::model::{Model, ModelConfig, RunOptions, Variant};
use semstereo::objective::{objective, LossWeights, Targets};
use semstereo::tensor::Tensor;
use semstereo::Result;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const E2E_TOLERANCE: f64 = 1e-3;
pub const SEEDS: u64 = 10;
/// Smallest gradient scale used to normalize end-to-end errors.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

type Case = fn(u64) -> Result<GradCheckReport>;

fn conv_case(seed: u64, x: &[usize], w: &[usize], geom: ConvGeom) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [rand_t(&mut r, x, -1.0, 1.0), rand_t(&mut r, w, -1.0, 1.0), rand_t(&mut r, &[w[0]], -1.0, 1.0)];
    grad_check(move |g, v| g.conv(v[0], v[1], Some(v[2]), geom), &inputs, OP_TOLERANCE)
}

/// Every differentiable operator with a representative configuration.
pub fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d_3x3", |s| conv_case(s, &[2, 3, 5, 6], &[4, 3, 3, 3], ConvGeom::d2(3, 1, 1))),
        ("conv2d_stride2", |s| conv_case(s, &[1, 2, 6, 8], &[3, 2, 3, 3], ConvGeom::d2(3, 2, 1))),
        ("conv2d_1x1", |s| conv_case(s, &[2, 4, 3, 3], &[3, 4, 1, 1], ConvGeom::d2(1, 1, 0))),
        ("conv3d", |s| conv_case(s, &[1, 2, 3, 4, 5], &[2, 2, 3, 3, 3], ConvGeom::d3(3, 1))),
        ("batch_norm", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let inputs = [
                rand_t(&mut r, &[3, 4, 3, 3], -2.0, 2.0),
                rand_t(&mut r, &[4], 0.5, 1.5),
                rand_t(&mut r, &[4], -0.5, 0.5),
            ];
            let (m, v) = (Tensor::zeros([4]), Tensor::full([4], 1.0));
            grad_check(
                move |g, x| Ok(g.batch_norm(x[0], x[1], x[2], &m, &v, BatchNormConfig::default())?.0),
                &inputs,
                OP_TOLERANCE,
            )
        }),
        ("relu", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            grad_check(|g, v| Ok(g.relu(v[0])), &[rand_t(&mut r, &[2, 3, 4, 5], -1.0, 1.0)], OP_TOLERANCE)
        }),
        ("softmax", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            grad_check(|g, v| g.softmax(v[0], 1), &[rand_t(&mut r, &[2, 4, 3, 3], -3.0, 3.0)], OP_TOLERANCE)
        }),
        ("max_pool_2x2", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            grad_check(|g, v| g.max_pool_2x2(v[0]), &[rand_t(&mut r, &[2, 3, 4, 6], -1.0, 1.0)], OP_TOLERANCE)
        }),
        ("upsample_2x", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            grad_check(|g, v| g.upsample(v[0], 2), &[rand_t(&mut r, &[1, 2, 3, 4], -1.0, 1.0)], OP_TOLERANCE)
        }),
        ("upsample_4x", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            grad_check(|g, v| g.upsample(v[0], 4), &[rand_t(&mut r, &[1, 1, 3, 3], -1.0, 1.0)], OP_TOLERANCE)
        }),
        ("shift_width", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let d = r.random_range(-3i32..=3) as isize;
            grad_check(move |g, v| g.shift_width(v[0], d), &[rand_t(&mut r, &[1, 2, 3, 7], -1.0, 1.0)], OP_TOLERANCE)
        }),
        ("warp_width", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let inputs = [rand_t(&mut r, &[1, 3, 4, 7], -1.0, 1.0), rand_t(&mut r, &[1, 1, 4, 7], 0.1, 3.9)];
            grad_check(|g, v| g.warp_width(v[0], v[1]), &inputs, OP_TOLERANCE)
        }),
        ("distance_volume", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let inputs = [rand_t(&mut r, &[1, 4, 3, 8], -1.0, 1.0), rand_t(&mut r, &[1, 4, 3, 8], -1.0, 1.0)];
            grad_check(|g, v| g.distance_volume(v[0], v[1], &[-2, -1, 0, 1, 2, 5]), &inputs, OP_TOLERANCE)
        }),
        ("soft_argmin", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let offs = [0.0, 1.0, 2.0, 3.0, 4.0];
            grad_check(move |g, v| g.soft_argmin(v[0], &offs), &[rand_t(&mut r, &[2, 1, 5, 3, 4], 0.0, 3.0)], OP_TOLERANCE)
        }),
        ("smooth_l1", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let target = rand_t(&mut r, &[1, 1, 4, 5], -3.0, 3.0);
            let mask: Vec<bool> = (0..20).map(|_| r.random_bool(0.8)).collect();
            let pred = rand_t(&mut r, &[1, 1, 4, 5], -3.0, 3.0);
            grad_check(move |g, v| g.smooth_l1(v[0], &target, &mask), &[pred], OP_TOLERANCE)
        }),
        ("cross_entropy", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let labels: Vec<u8> = (0..18).map(|_| if r.random_bool(0.1) { 255 } else { r.random_range(0..4) }).collect();
            let weights: Vec<f64> = (0..4).map(|_| r.random_range(0.5..2.0)).collect();
            let logits = rand_t(&mut r, &[2, 4, 3, 3], -2.0, 2.0);
            grad_check(move |g, v| g.cross_entropy(v[0], &labels, &weights, 255), &[logits], OP_TOLERANCE)
        }),
        ("elementwise", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let c = rand_t(&mut r, &[2, 3, 4], -1.0, 1.0);
            let inputs = [rand_t(&mut r, &[2, 3, 4], -1.0, 1.0), rand_t(&mut r, &[2, 3, 4], -1.0, 1.0)];
            grad_check(
                move |g, v| {
                    let a = g.add(v[0], v[1])?;
                    let b = g.sub(a, v[1])?;
                    let b = g.mul_const(b, &c)?;
                    let d = g.scale(v[1], 0.3);
                    g.weighted_sum(&[(b, 1.5), (d, -2.0), (v[0], 0.25)])
                },
                &inputs,
                OP_TOLERANCE,
            )
        }),
        ("layout", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let inputs = [rand_t(&mut r, &[2, 3, 2, 4], -1.0, 1.0), rand_t(&mut r, &[2, 1, 2, 4], -1.0, 1.0)];
            grad_check(
                |g, v| {
                    let c = g.concat(&[v[0], v[1]], 1)?;
                    let n = g.narrow(c, 1, 1, 3)?;
                    let m = g.narrow(n, 0, 1, 1)?;
                    let flat = g.reshape(m, vec![3, 8])?;
                    let mean = g.mean(flat);
                    let rest = g.reshape(n, vec![2, 24])?;
                    let k = g.scale(mean, 2.0);
                    let rest = g.mean(rest);
                    g.add(k, rest)
                },
                &inputs,
                OP_TOLERANCE,
            )
        }),
    ]
}

/// Outcome of the end-to-end parameter gradient check.
#[derive(Clone, Debug)]
pub struct E2eReport {
    pub max_rel_error: f64,
    pub probes: usize,
    pub kinks: usize,
    pub worst: String,
}

fn e2e_batch(seed: u64) -> Batch {
    let params = SceneParams {
        n_classes: 3,
        ..SceneParams::desk(32, 64)
    };
    let pairs: Vec<_> = (0..2).map(|i| synthetic_pair(seed * 10 + i, &params).unwrap()).collect();
    Batch::from_pairs(&pairs).unwrap()
}

/// Gradient of the total objective of a c=1 full model with respect to
/// sampled parameters, against central differences in f64.
pub fn e2e_gradient_check(seed: u64, probes_per_tensor: usize) -> Result<E2eReport> {
    let batch = e2e_batch(seed);
    let mut model = Model::<f64>::new(ModelConfig::new(1, 3, Variant::Full), seed)?;
    let targets = Targets::<f64> {
        disparity: batch.disparity.cast(),
        valid: batch.valid.clone(),
        classes: batch.classes.clone(),
        ignore: 255,
    };
    let (left, right) = (batch.left.cast::<f64>(), batch.right.cast::<f64>());
    let weights = LossWeights::default();
    let cw = [0.8, 1.1, 1.1];
    let loss = |m: &Model<f64>, keep: bool| -> Result<(f64, Option<(Graph<f64>, Var)>)> {
        let mut g = Graph::<f64>::training();
        let out = m.forward(&mut g, &left, &right, RunOptions::default())?;
        let t = objective(&mut g, &out, &targets, &weights, &cw)?;
        let v = g.value(t.total).item();
        if keep {
            g.backward(t.total)?;
            Ok((v, Some((g, t.total))))
        } else {
            Ok((v, None))
        }
    };
    let (base, kept) = loss(&model, true)?;
    let (g, _) = kept.expect("kept");
    let mut analytic = std::collections::HashMap::new();
    for (key, v) in g.param_vars() {
        if let Some(gr) = g.grad(v) {
            analytic.insert(key, gr.clone());
        }
    }
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let (mut worst, mut worst_name, mut probes, mut kinks) = (0f64, String::new(), 0, 0);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let entry = model.store.entry(id);
        if !entry.trainable {
            continue;
        }
        let name = entry.name.clone();
        let an = analytic
            .get(&id.index())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(entry.value.shape().to_vec()));
        // biases feeding batch norm have an exactly zero gradient; the floor
        // keeps their finite-difference round-off from dominating
        let scale = an.data().iter().fold(0f64, |m, v| m.max(v.abs())).max(GRAD_FLOOR);
        for _ in 0..probes_per_tensor {
            let j = rng.random_range(0..an.numel());
            let orig = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = orig + h;
            let up = loss(&model, false)?.0;
            model.store.get_mut(id).data_mut()[j] = orig - h;
            let down = loss(&model, false)?.0;
            model.store.get_mut(id).data_mut()[j] = orig;
            let (fwd, bwd) = ((up - base) / h, (base - down) / h);
            if (fwd - bwd).abs() > 0.05 * fwd.abs().max(bwd.abs()).max(1e-9) && (fwd - bwd).abs() > 1e-6 {
                kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let err = (an.data()[j] - numeric).abs() / scale;
            probes += 1;
            if err > worst {
                worst = err;
                worst_name = format!("{name}[{j}]");
            }
        }
    }
    Ok(E2eReport {
        max_rel_error: worst,
        probes,
        kinks,
        worst: worst_name,
    })
}
