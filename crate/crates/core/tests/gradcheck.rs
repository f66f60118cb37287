//! Gradient verification against central finite differences, the
//! independent oracle for every differentiable operation.

mod common;

use common::{rel_err, RandomGraph};
use ldm_lab::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Check d loss / d leaf for every element of one parameter against central
/// differences of a replayable forward closure.
fn check_param(
    name: &str,
    values: &[f64],
    grad: &[f64],
    mut replay: impl FnMut(usize, f64) -> f64,
) {
    for i in 0..values.len() {
        let fd = (replay(i, H) - replay(i, -H)) / (2.0 * H);
        let err = rel_err(grad[i], fd);
        assert!(err < TOL, "{name}[{i}]: ad {} vs fd {fd} (rel err {err})", grad[i]);
    }
}

#[test]
fn relu_backward_matches_finite_differences() {
    // random 4x3 input kept away from the kink
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let vals: Vec<f64> = (0..12)
        .map(|_| {
            let m = 0.1 + rng.random::<f64>();
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    let weights: Vec<f64> = (0..12).map(|_| rng.random::<f64>() + 0.5).collect();
    let forward = |v: &[f64]| {
        let x = Tensor::from_vec(v.to_vec(), &[4, 3]).unwrap();
        let w = Tensor::from_vec(weights.clone(), &[4, 3]).unwrap();
        x.relu().mul(&w).unwrap().sum().item()
    };
    let x = Tensor::param(vals.clone(), &[4, 3]).unwrap();
    let w = Tensor::from_vec(weights.clone(), &[4, 3]).unwrap();
    x.relu().mul(&w).unwrap().sum().backward().unwrap();
    check_param("relu-input", &vals, &x.grad(), |i, eps| {
        let mut v = vals.clone();
        v[i] += eps;
        forward(&v)
    });
}

#[test]
fn softmax_cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let vals: Vec<f64> = (0..80).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
    let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..10)).collect();
    let forward = |v: &[f64]| {
        let logits = Tensor::from_vec(v.to_vec(), &[8, 10]).unwrap();
        logits.softmax_cross_entropy(&labels).unwrap().item()
    };
    let logits = Tensor::param(vals.clone(), &[8, 10]).unwrap();
    logits.softmax_cross_entropy(&labels).unwrap().backward().unwrap();
    check_param("logits", &vals, &logits.grad(), |i, eps| {
        let mut v = vals.clone();
        v[i] += eps;
        forward(&v)
    });
}

#[test]
fn full_mlp_loss_gradient_matches_finite_differences() {
    // 784-32-10 network on a small batch; every parameter checked on a
    // random subsample of coordinates to keep the FD pass fast, plus the
    // biases checked in full.
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let k = 4;
    let x: Vec<f64> = (0..k * 784).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<usize> = (0..k).map(|_| rng.random_range(0..10)).collect();
    let w1v: Vec<f64> = (0..784 * 32).map(|_| 0.05 * (rng.random::<f64>() - 0.5)).collect();
    let b1v: Vec<f64> = (0..32).map(|_| 0.1 * (rng.random::<f64>() - 0.5)).collect();
    let w2v: Vec<f64> = (0..32 * 10).map(|_| 0.2 * (rng.random::<f64>() - 0.5)).collect();
    let b2v: Vec<f64> = (0..10).map(|_| 0.1 * (rng.random::<f64>() - 0.5)).collect();

    let forward = |w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]| {
        let xt = Tensor::from_vec(x.clone(), &[k, 784]).unwrap();
        let w1t = Tensor::from_vec(w1.to_vec(), &[784, 32]).unwrap();
        let b1t = Tensor::from_vec(b1.to_vec(), &[32]).unwrap();
        let w2t = Tensor::from_vec(w2.to_vec(), &[32, 10]).unwrap();
        let b2t = Tensor::from_vec(b2.to_vec(), &[10]).unwrap();
        let hidden = xt.matmul(&w1t).unwrap().add_row_bias(&b1t).unwrap().relu();
        let logits = hidden.matmul(&w2t).unwrap().add_row_bias(&b2t).unwrap();
        logits.softmax_cross_entropy(&labels).unwrap().item()
    };

    let w1 = Tensor::param(w1v.clone(), &[784, 32]).unwrap();
    let b1 = Tensor::param(b1v.clone(), &[32]).unwrap();
    let w2 = Tensor::param(w2v.clone(), &[32, 10]).unwrap();
    let b2 = Tensor::param(b2v.clone(), &[10]).unwrap();
    let xt = Tensor::from_vec(x.clone(), &[k, 784]).unwrap();
    let hidden = xt.matmul(&w1).unwrap().add_row_bias(&b1).unwrap().relu();
    let logits = hidden.matmul(&w2).unwrap().add_row_bias(&b2).unwrap();
    logits.softmax_cross_entropy(&labels).unwrap().backward().unwrap();

    let g1 = w1.grad();
    let mut sample_rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..120 {
        let i = sample_rng.random_range(0..w1v.len());
        let mut v = w1v.clone();
        v[i] += H;
        let up = forward(&v, &b1v, &w2v, &b2v);
        v[i] -= 2.0 * H;
        let down = forward(&v, &b1v, &w2v, &b2v);
        let fd = (up - down) / (2.0 * H);
        assert!(rel_err(g1[i], fd) < TOL, "w1[{i}]: ad {} vs fd {fd}", g1[i]);
    }
    let g2 = w2.grad();
    for _ in 0..80 {
        let i = sample_rng.random_range(0..w2v.len());
        let mut v = w2v.clone();
        v[i] += H;
        let up = forward(&w1v, &b1v, &v, &b2v);
        v[i] -= 2.0 * H;
        let down = forward(&w1v, &b1v, &v, &b2v);
        let fd = (up - down) / (2.0 * H);
        assert!(rel_err(g2[i], fd) < TOL, "w2[{i}]: ad {} vs fd {fd}", g2[i]);
    }
    check_param("b1", &b1v, &b1.grad(), |i, eps| {
        let mut v = b1v.clone();
        v[i] += eps;
        forward(&w1v, &v, &w2v, &b2v)
    });
    check_param("b2", &b2v, &b2.grad(), |i, eps| {
        let mut v = b2v.clone();
        v[i] += eps;
        forward(&w1v, &b1v, &w2v, &v)
    });
}

#[test]
fn conv_pool_path_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let (k, c, h, w) = (2, 1, 6, 6);
    let (f, kh) = (3, 3);
    let xv: Vec<f64> = (0..k * c * h * w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let wv: Vec<f64> = (0..f * c * kh * kh).map(|_| 0.5 * (rng.random::<f64>() - 0.5)).collect();
    let bv: Vec<f64> = (0..f).map(|_| 0.1 * (rng.random::<f64>() - 0.5)).collect();
    let mix: Vec<f64> = (0..f).map(|_| rng.random::<f64>() + 0.5).collect();

    let forward = |xd: &[f64], wd: &[f64], bd: &[f64]| {
        let xt = Tensor::from_vec(xd.to_vec(), &[k, c, h, w]).unwrap();
        let wt = Tensor::from_vec(wd.to_vec(), &[f, c, kh, kh]).unwrap();
        let bt = Tensor::from_vec(bd.to_vec(), &[f]).unwrap();
        let pooled = xt.conv2d(&wt, &bt).unwrap().relu().max_pool2().unwrap();
        let batch = pooled.filters_to_batch().unwrap();
        let rows = batch.shape()[0];
        let mixer = Tensor::from_vec(mix.clone(), &[f, 1]).unwrap();
        let scored = batch.matmul(&mixer).unwrap();
        let _ = rows;
        scored.sigmoid().ln_clamped().mean().item()
    };

    let xt = Tensor::param(xv.clone(), &[k, c, h, w]).unwrap();
    let wt = Tensor::param(wv.clone(), &[f, c, kh, kh]).unwrap();
    let bt = Tensor::param(bv.clone(), &[f]).unwrap();
    let pooled = xt.conv2d(&wt, &bt).unwrap().relu().max_pool2().unwrap();
    let mixer = Tensor::from_vec(mix.clone(), &[f, 1]).unwrap();
    let loss = pooled
        .filters_to_batch()
        .unwrap()
        .matmul(&mixer)
        .unwrap()
        .sigmoid()
        .ln_clamped()
        .mean();
    loss.backward().unwrap();

    check_param("conv-weight", &wv, &wt.grad(), |i, eps| {
        let mut v = wv.clone();
        v[i] += eps;
        forward(&xv, &v, &bv)
    });
    check_param("conv-bias", &bv, &bt.grad(), |i, eps| {
        let mut v = bv.clone();
        v[i] += eps;
        forward(&xv, &wv, &v)
    });
    // input gradient through pool argmax routing, sampled
    let gx = xt.grad();
    let mut sample_rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..40 {
        let i = sample_rng.random_range(0..xv.len());
        let mut v = xv.clone();
        v[i] += H;
        let up = forward(&v, &wv, &bv);
        v[i] -= 2.0 * H;
        let down = forward(&v, &wv, &bv);
        let fd = (up - down) / (2.0 * H);
        assert!(rel_err(gx[i], fd) < TOL, "x[{i}]: ad {} vs fd {fd}", gx[i]);
    }
}

#[test]
fn hundred_random_graphs_match_finite_differences() {
    for seed in 0..100u64 {
        let graph = RandomGraph::generate(seed * 7919 + 11);
        let grads = graph.gradients();
        for (leaf, grad) in grads.iter().enumerate() {
            for i in 0..grad.len() {
                let up = graph.value_with_nudge(leaf, i, H);
                let down = graph.value_with_nudge(leaf, i, -H);
                let fd = (up - down) / (2.0 * H);
                let err = rel_err(grad[i], fd);
                assert!(
                    err < TOL,
                    "graph seed {} leaf {leaf}[{i}]: ad {} vs fd {fd} (rel err {err})",
                    graph.seed,
                    grad[i]
                );
            }
        }
    }
}
