//! Central finite differences against every backward rule, 20+ random
//! instances per primitive.

mod common;

use common::{away_from_zero, rng, tie_free, uniform, weighted_sum};
use rand::Rng;
use skelae::autodiff::{BatchNormMode, PoolConfig, RunningStats, Tape, Var};
use skelae::gradcheck::{check_gradients, relative_error};
use skelae::graph::SkeletonGraph;
use skelae::model::{mse_loss, KernelShape, Model, ModelConfig, NormMode};
use skelae::params::Bound;
use skelae::viewpoint::{sample_angles, EulerAngles, SsviHead};
use skelae::{Result, Tensor};

const STEP: f64 = 1e-5;
const INSTANCES: u64 = 20;

fn assert_close<F>(what: &str, case: u64, inputs: &[Tensor], tol: f64, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = check_gradients(inputs, STEP, f).unwrap();
    for (i, e) in report.rel_errors.iter().enumerate() {
        assert!(*e <= tol, "{what} case {case} input {i}: rel err {e:.3e} > {tol:.0e}");
    }
}

#[test]
fn conv2d_gradients() {
    for case in 0..INSTANCES {
        let mut r = rng(100 + case);
        let (kh, kw) = (r.random_range(1..=3), r.random_range(1..=3));
        let stride = (r.random_range(1..=2), r.random_range(1..=2));
        let pad = (r.random_range(0..=1), r.random_range(0..=1));
        let (h, w) = (r.random_range(kh..=5), r.random_range(kw..=6));
        let (n, ci, co) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let x = uniform(&mut r, &[n, ci, h, w], -1.0, 1.0);
        let k = uniform(&mut r, &[co, ci, kh, kw], -1.0, 1.0);
        assert_close("conv2d", case, &[x, k], 1e-6, |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            weighted_sum(t, y, case)
        });
    }
}

#[test]
fn deconv2d_gradients() {
    for case in 0..INSTANCES {
        let mut r = rng(200 + case);
        let (kh, kw) = (r.random_range(1..=3), r.random_range(1..=3));
        let stride = (r.random_range(1..=2), r.random_range(1..=2));
        let pad = (r.random_range(0..=(kh - 1) / 2), r.random_range(0..=(kw - 1) / 2));
        let (h, w) = (r.random_range(1..=4), r.random_range(2..=5));
        let (n, ci, co) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let x = uniform(&mut r, &[n, ci, h, w], -1.0, 1.0);
        let k = uniform(&mut r, &[ci, co, kh, kw], -1.0, 1.0);
        assert_close("deconv2d", case, &[x, k], 1e-6, |t, v| {
            let y = t.deconv2d(v[0], v[1], stride, pad)?;
            weighted_sum(t, y, case)
        });
    }
}

#[test]
fn maxpool_gradients() {
    for case in 0..INSTANCES {
        let mut r = rng(300 + case);
        let window = (r.random_range(1..=2), r.random_range(1..=3));
        let shape = [
            r.random_range(1..=2),
            r.random_range(1..=2),
            window.0 * r.random_range(1..=3),
            window.1 * r.random_range(1..=3),
        ];
        let x = tie_free(&mut r, &shape, 0.01);
        assert_close("maxpool2d", case, &[x], 1e-6, |t, v| {
            let (y, _) = t.maxpool2d(v[0], PoolConfig::new(window))?;
            weighted_sum(t, y, case)
        });
    }
}

#[test]
fn maxunpool_gradients() {
    for case in 0..INSTANCES {
        let mut r = rng(400 + case);
        let window = (r.random_range(1..=2), r.random_range(2..=3));
        let shape = [
            r.random_range(1..=2),
            r.random_range(1..=2),
            window.0 * r.random_range(1..=3),
            window.1 * r.random_range(1..=3),
        ];
        let source = tie_free(&mut r, &shape, 0.01);
        let mut tape = Tape::new();
        let s = tape.constant(source);
        let (pooled, idx) = tape.maxpool2d(s, PoolConfig::new(window)).unwrap();
        let y = uniform(&mut r, tape.value(pooled).shape(), -1.0, 1.0);
        assert_close("maxunpool2d", case, &[y], 1e-6, |t, v| {
            let u = t.maxunpool2d(v[0], &idx, &shape)?;
            weighted_sum(t, u, case)
        });
    }
}

#[test]
fn batchnorm_gradients_in_both_modes() {
    for case in 0..INSTANCES {
        let mut r = rng(500 + case);
        let shape = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3), r.random_range(2..=4)];
        let c = shape[1];
        let x = uniform(&mut r, &shape, -2.0, 2.0);
        let gamma = uniform(&mut r, &[c], 0.5, 1.5);
        let beta = uniform(&mut r, &[c], -0.5, 0.5);
        let mut stats = RunningStats::new(c);
        stats.mean = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
        stats.var = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
        let inputs = [x, gamma, beta];
        assert_close("batchnorm2d (train)", case, &inputs, 1e-5, |t, v| {
            let mut fresh = RunningStats::new(c);
            let y = t.batchnorm2d(v[0], v[1], v[2], BatchNormMode::Train(&mut fresh), 1e-5)?;
            weighted_sum(t, y, case)
        });
        assert_close("batchnorm2d (eval)", case, &inputs, 1e-5, |t, v| {
            let y = t.batchnorm2d(v[0], v[1], v[2], BatchNormMode::Eval(&stats), 1e-5)?;
            weighted_sum(t, y, case)
        });
    }
}

#[test]
fn dense_relu_sigmoid_gradients() {
    for case in 0..INSTANCES {
        let mut r = rng(600 + case);
        let (n, fi, fo) = (r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=5));
        let x = uniform(&mut r, &[n, fi], -1.0, 1.0);
        let w = uniform(&mut r, &[fi, fo], -1.0, 1.0);
        let b = uniform(&mut r, &[fo], -1.0, 1.0);
        assert_close("dense", case, &[x, w, b], 1e-6, |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            weighted_sum(t, y, case)
        });
        let a = away_from_zero(&mut r, &[n, fi], 1e-3);
        assert_close("relu", case, std::slice::from_ref(&a), 1e-6, |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, case)
        });
        assert_close("sigmoid", case, &[a.map(|v| v * 4.0)], 1e-6, |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y, case)
        });
    }
}

/// The reversal layer's analytic gradient is −λ times the finite-difference
/// slope, since its forward pass is the identity.
#[test]
fn grl_gradient_is_reversed_slope() {
    for case in 0..INSTANCES {
        let mut r = rng(700 + case);
        let lambda = r.random_range(0.1..3.0);
        let shape = [r.random_range(1..=3), r.random_range(1..=4)];
        let x = uniform(&mut r, &shape, -1.0, 1.0);
        let report = check_gradients(&[x], STEP, |t, v| {
            let y = t.grl(v[0], lambda)?;
            let sq = t.square(y)?;
            weighted_sum(t, sq, case)
        })
        .unwrap();
        let expected = report.numeric[0].map(|g| -lambda * g);
        let err = relative_error(&report.analytic[0], &expected);
        assert!(err <= 1e-6, "grl case {case}: {err:.3e}");
    }
}

#[test]
fn mse_loss_gradients() {
    for case in 0..INSTANCES {
        let mut r = rng(800 + case);
        let shape = [r.random_range(1..=3), 3, r.random_range(1..=3), r.random_range(1..=4)];
        let x = uniform(&mut r, &shape, -1.0, 1.0);
        let xh = uniform(&mut r, &shape, -1.0, 1.0);
        let report = check_gradients(&[x.clone(), xh.clone()], STEP, |t, v| mse_loss(t, v[0], v[1])).unwrap();
        assert!(report.max_rel_error() <= 1e-8, "mse case {case}: {:.3e}", report.max_rel_error());
        // ∂/∂X̂ = (X̂ − X)/N exactly.
        let n = shape[0] as f64;
        let closed = xh.zip_map(&x, |a, b| (a - b) / n);
        assert!(relative_error(&report.analytic[1], &closed) < 1e-15);
    }
}

#[test]
fn r_skel_gradients() {
    let graph = SkeletonGraph::stick9();
    for case in 0..INSTANCES {
        let mut r = rng(900 + case);
        let shape = [r.random_range(1..=3), 3, 9, r.random_range(1..=5)];
        let x = uniform(&mut r, &shape, -1.0, 1.0);
        assert_close("r_skel", case, &[x], 1e-6, |t, v| t.r_skel(v[0], &graph));
    }
}

fn head_bound(vars: &[Var]) -> Bound {
    ["ssvi.hidden.weight", "ssvi.hidden.bias", "ssvi.out.weight", "ssvi.out.bias"]
        .iter()
        .zip(vars)
        .map(|(n, v)| (n.to_string(), *v))
        .collect()
}

/// Head parameters follow the plain L1 slope; the code `z` sits behind the
/// reversal layer and so gets −λ times it.
#[test]
fn ssvi_loss_gradients() {
    for case in 0..INSTANCES {
        let mut r = rng(1000 + case);
        let (n, latent, hidden) = (r.random_range(1..=4), r.random_range(2..=5), r.random_range(2..=6));
        let lambda = r.random_range(0.5..2.0);
        let head = SsviHead::new(latent, hidden, lambda).unwrap();
        let z = uniform(&mut r, &[n, latent], -1.0, 1.0);
        let hw = uniform(&mut r, &[latent, hidden], -1.0, 1.0);
        let hb = away_from_zero(&mut r, &[hidden], 0.05);
        let ow = uniform(&mut r, &[hidden, 3], -1.0, 1.0);
        let ob = uniform(&mut r, &[3], -1.0, 1.0);
        let targets: Vec<EulerAngles> = (0..n).map(|_| sample_angles(&mut r)).collect();
        let report =
            check_gradients(&[z, hw, hb, ow, ob], STEP, |t, v| head.loss(t, &head_bound(&v[1..]), v[0], &targets))
                .unwrap();
        for i in 1..5 {
            assert!(report.rel_errors[i] <= 1e-5, "ssvi case {case} param {i}: {:.3e}", report.rel_errors[i]);
        }
        let reversed = report.numeric[0].map(|g| -lambda * g);
        let err = relative_error(&report.analytic[0], &reversed);
        assert!(err <= 1e-5, "ssvi case {case} code: {err:.3e}");
    }
}

/// Two joints, four frames: the whole autoencoder loss against finite
/// differences in every parameter. A batch of four keeps the decoder
/// BatchNorm statistics away from the near-zero variances whose curvature
/// swamps a 1e-5 central difference.
#[test]
fn full_model_gradient_on_toy_config() {
    let config = ModelConfig {
        joints: 2,
        frames: 4,
        channels: vec![2, 3, 3],
        kernels: vec![KernelShape::K1x3, KernelShape::K1x1, KernelShape::K1x3],
        pools: vec![(1, 2), (1, 1), (2, 1)],
        latent_dim: 3,
        ..ModelConfig::default()
    };
    for seed in 0..6 {
        let model = Model::build(&config, seed).unwrap();
        let names: Vec<String> = model.params.names().map(str::to_owned).collect();
        let mut inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
        let x = tie_free(&mut rng(seed), &[4, 3, 2, 4], 0.05);
        inputs.push(x);
        let plan = model.plan.clone();
        let report = check_gradients(&inputs, STEP, |t, v| {
            let p: Bound = names.iter().cloned().zip(v.iter().copied()).collect();
            let input = v[v.len() - 1];
            let enc = plan.encode(t, &p, input)?;
            let recon = plan.decode(t, &p, enc.z, &enc.pools, NormMode::Batch)?;
            mse_loss(t, input, recon)
        })
        .unwrap();
        for (i, e) in report.rel_errors.iter().enumerate() {
            let what = names.get(i).map_or("input", String::as_str);
            assert!(*e <= 1e-5, "seed {seed} {what}: rel err {e:.3e}");
        }
    }
}
