//! Shared test oracles, all independent of the library's estimation paths:
//! numerical quadrature for continuous JS divergences, seeded samplers, a
//! finite-difference gradient checker, and random-structure generators.

#![allow(dead_code)]

use ldm_lab::estim::ActivationBatch;
use ldm_lab::info::DiscreteJoint;
use ldm_lab::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// ---------------------------------------------------------------------------
// Gauss-Legendre quadrature oracle for 2-D Gaussian JS divergence
// ---------------------------------------------------------------------------

/// Nodes and weights of n-point Gauss-Legendre quadrature on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Newton iteration from the Chebyshev-like initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            // Legendre P_n(x) and derivative by recurrence.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                let (mut q0, mut q1) = (1.0, x);
                for k in 2..=n {
                    let q2 = ((2 * k - 1) as f64 * x * q1 - (k - 1) as f64 * q0) / k as f64;
                    q0 = q1;
                    q1 = q2;
                }
                let dq = n as f64 * (x * q1 - q0) / (x * x - 1.0);
                nodes[i] = x;
                weights[i] = 2.0 / ((1.0 - x * x) * dq * dq);
                break;
            }
        }
    }
    (nodes, weights)
}

fn bivariate_density(x: f64, y: f64, rho: f64) -> f64 {
    let det = 1.0 - rho * rho;
    let quad = (x * x - 2.0 * rho * x * y + y * y) / det;
    (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

/// Exact (to quadrature accuracy) JS divergence between the standard
/// bivariate normal with correlation `rho` and the product of its marginals
/// (the independent standard normal pair).
pub fn jsd_gaussian_vs_product(rho: f64) -> f64 {
    let (nodes, weights) = gauss_legendre(160);
    let half = 9.0;
    let mut total = 0.0;
    for (i, &xi) in nodes.iter().enumerate() {
        let x = xi * half;
        for (j, &yj) in nodes.iter().enumerate() {
            let y = yj * half;
            let p = bivariate_density(x, y, rho);
            let q = bivariate_density(x, y, 0.0);
            let m = 0.5 * (p + q);
            let mut f = 0.0;
            if p > 0.0 {
                f += 0.5 * p * (p / m).ln();
            }
            if q > 0.0 {
                f += 0.5 * q * (q / m).ln();
            }
            total += weights[i] * weights[j] * f * half * half;
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

/// K samples of a standard bivariate normal pair with correlation rho.
pub fn correlated_gaussian_batch(k: usize, rho: f64, seed: u64) -> ActivationBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(2 * k);
    let t = (1.0 - rho * rho).sqrt();
    for _ in 0..k {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        values.push(z1);
        values.push(rho * z1 + t * z2);
    }
    ActivationBatch::new(values, k, 2).unwrap()
}

/// K i.i.d. samples from a discrete joint, one column per unit axis, plus
/// labels when the joint has a label axis.
pub fn sample_discrete_joint(joint: &DiscreteJoint, k: usize, seed: u64) -> ActivationBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut axes: Vec<usize> = joint.unit_sizes().to_vec();
    if joint.classes() > 0 {
        axes.push(joint.classes());
    }
    let pmf = joint.pmf();
    let m = joint.unit_sizes().len();
    let mut values = Vec::with_capacity(k * m);
    let mut labels = Vec::with_capacity(k);
    for _ in 0..k {
        let mut u: f64 = rng.random();
        let mut flat = pmf.len() - 1;
        for (i, &mass) in pmf.iter().enumerate() {
            if u < mass {
                flat = i;
                break;
            }
            u -= mass;
        }
        // decode row-major outcome, label axis last
        let mut outcome = vec![0usize; axes.len()];
        let mut rem = flat;
        for a in (0..axes.len()).rev() {
            outcome[a] = rem % axes[a];
            rem /= axes[a];
        }
        for &v in outcome.iter().take(m) {
            values.push(v as f64);
        }
        if joint.classes() > 0 {
            labels.push(outcome[m]);
        }
    }
    if joint.classes() > 0 {
        ActivationBatch::with_labels(values, k, m, labels).unwrap()
    } else {
        ActivationBatch::new(values, k, m).unwrap()
    }
}

/// Random dense joint over units (and optionally labels); a fraction of the
/// cells is zeroed to exercise empty-support paths.
pub fn random_joint(rng: &mut ChaCha8Rng, max_units: usize, max_alphabet: usize, max_classes: usize) -> DiscreteJoint {
    let m = rng.random_range(2..=max_units);
    let sizes: Vec<usize> = (0..m).map(|_| rng.random_range(2..=max_alphabet)).collect();
    let classes = if max_classes > 0 { rng.random_range(2..=max_classes) } else { 0 };
    let len: usize = sizes.iter().product::<usize>() * classes.max(1);
    let sparsify = rng.random::<f64>() < 0.3;
    let mut pmf: Vec<f64> = (0..len)
        .map(|_| {
            if sparsify && rng.random::<f64>() < 0.25 {
                0.0
            } else {
                rng.random::<f64>() + 1e-3
            }
        })
        .collect();
    let sum: f64 = pmf.iter().sum();
    for v in pmf.iter_mut() {
        *v /= sum;
    }
    DiscreteJoint::with_labels(&sizes, classes, pmf).unwrap()
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking over randomly composed graphs
// ---------------------------------------------------------------------------

/// Relative error guarded against tiny denominators.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// One reproducible randomly-composed scalar graph: the same seed rebuilds
/// the same structure (ops, permutations, fresh-leaf draws), optionally with
/// leaf values overridden, so central differences replay exactly.
pub struct RandomGraph {
    pub seed: u64,
    pub leaf_values: Vec<Vec<f64>>,
    pub leaf_shapes: Vec<Vec<usize>>,
}

impl RandomGraph {
    pub fn generate(seed: u64) -> Self {
        let (_, _, leaf_values, leaf_shapes) = build_graph(seed, None);
        RandomGraph { seed, leaf_values, leaf_shapes }
    }

    /// Forward value with one leaf element nudged by eps (eps = 0 replays
    /// the clean value).
    pub fn value_with_nudge(&self, leaf: usize, index: usize, eps: f64) -> f64 {
        let mut values = self.leaf_values.clone();
        values[leaf][index] += eps;
        let (loss, _, _, _) = build_graph(self.seed, Some(&values));
        loss.item()
    }

    /// Backward gradients of every leaf.
    pub fn gradients(&self) -> Vec<Vec<f64>> {
        let (loss, leaves, _, _) = build_graph(self.seed, Some(&self.leaf_values));
        loss.backward().unwrap();
        leaves.iter().map(Tensor::grad).collect()
    }
}

/// Build the seed's graph. All rng draws happen in both record and replay
/// mode so the decision stream stays aligned; `overrides`, when given,
/// replaces every recorded leaf value.
fn build_graph(
    seed: u64,
    overrides: Option<&[Vec<f64>]>,
) -> (Tensor, Vec<Tensor>, Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut recorded_values: Vec<Vec<f64>> = Vec::new();
    let mut recorded_shapes: Vec<Vec<usize>> = Vec::new();
    let mut leaves: Vec<Tensor> = Vec::new();

    let mut make_leaf = |data: Vec<f64>,
                         shape: Vec<usize>,
                         recorded_values: &mut Vec<Vec<f64>>,
                         recorded_shapes: &mut Vec<Vec<usize>>,
                         leaves: &mut Vec<Tensor>|
     -> Tensor {
        let idx = recorded_values.len();
        let actual = match overrides {
            Some(all) => all[idx].clone(),
            None => data.clone(),
        };
        recorded_values.push(data);
        recorded_shapes.push(shape.clone());
        let t = Tensor::param(actual, &shape).unwrap();
        leaves.push(t.clone());
        t
    };

    // 2-4 leaf matrices with small shapes, magnitudes kept off the kinks
    let leaf_count = rng.random_range(2..=4usize);
    for _ in 0..leaf_count {
        let r = rng.random_range(2..=4usize);
        let c = rng.random_range(2..=4usize);
        let data: Vec<f64> = (0..r * c)
            .map(|_| {
                let mag = 0.2 + 0.8 * rng.random::<f64>();
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        make_leaf(data, vec![r, c], &mut recorded_values, &mut recorded_shapes, &mut leaves);
    }

    let mut pool: Vec<Tensor> = leaves.clone();
    let op_count = rng.random_range(2..=5usize);
    for _ in 0..op_count {
        let pick = rng.random_range(0..pool.len());
        let t = pool[pick].clone();
        let shape = t.shape();
        let choice = rng.random_range(0..8u8);
        let next = match choice {
            0 => t.relu(),
            1 => t.sigmoid(),
            2 => t.sigmoid().ln_clamped(),
            3 => t.scale(1.0 + rng.random::<f64>()),
            4 => t.add_scalar(rng.random::<f64>() - 0.5),
            5 => {
                let partner = pool
                    .iter()
                    .find(|p| p.shape() == shape)
                    .cloned()
                    .unwrap_or_else(|| t.clone());
                match rng.random_range(0..3u8) {
                    0 => t.add(&partner).unwrap(),
                    1 => t.sub(&partner).unwrap(),
                    _ => t.mul(&partner).unwrap(),
                }
            }
            6 => {
                // matmul against a fresh leaf sized to fit
                let inner = shape[1];
                let out = rng.random_range(2..=3usize);
                let data: Vec<f64> = (0..inner * out).map(|_| rng.random::<f64>() - 0.5).collect();
                let w = make_leaf(
                    data,
                    vec![inner, out],
                    &mut recorded_values,
                    &mut recorded_shapes,
                    &mut leaves,
                );
                t.matmul(&w).unwrap()
            }
            _ => {
                let (k, m) = (shape[0], shape[1]);
                let perms: Vec<Vec<usize>> = (0..m)
                    .map(|_| {
                        let mut p: Vec<usize> = (0..k).collect();
                        use rand::seq::SliceRandom;
                        p.shuffle(&mut rng);
                        p
                    })
                    .collect();
                t.shuffle_columns(&perms).unwrap()
            }
        };
        pool.push(next);
    }

    let last = pool.last().unwrap().clone();
    let loss = if rng.random::<bool>() { last.mean() } else { last.sum().scale(0.25) };
    (loss, leaves, recorded_values, recorded_shapes)
}
